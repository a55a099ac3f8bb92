"""Run manifests: everything needed to reproduce a simulation or a fit."""

import hashlib
import logging
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from tclmarket.git_utils import code_version, get_git_info

logger = logging.getLogger(__name__)


def file_digest(path: Path, chunk_size: int = 8192) -> str:
    """SHA-256 checksum of a file."""
    sha256 = hashlib.sha256()
    with open(path, "rb") as f:
        while chunk := f.read(chunk_size):
            sha256.update(chunk)
    return sha256.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    seed: Optional[int]
    code_version: str
    input_digests: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    created_at: str = ""
    host: str = ""
    git: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def start(
        cls,
        command: str,
        config: Dict[str, Any],
        inputs: Iterable[Path],
        seed: Optional[int] = None,
    ) -> "RunManifest":
        """Record inputs before any work is done."""
        digests = {str(p): file_digest(Path(p)) for p in inputs}
        manifest = cls(
            command=command,
            config=config,
            seed=seed,
            code_version=code_version(),
            input_digests=digests,
            created_at=datetime.now(timezone.utc).isoformat(),
            host=platform.node(),
            git=get_git_info(),
        )
        logger.debug(f"manifest for {command}: {len(digests)} inputs hashed")
        return manifest

    def add_output(self, name: str, path: Path) -> None:
        self.outputs[name] = str(path)

    def output_digests(self) -> Dict[str, str]:
        return {name: file_digest(Path(p)) for name, p in self.outputs.items()}

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunManifest":
        return cls(**data)
