"""Git integration utilities for tclmarket run manifests."""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

from git import InvalidGitRepositoryError, NoSuchPathError, Repo

from tclmarket.version import __version__

logger = logging.getLogger(__name__)


def get_git_info(path: Optional[Path] = None) -> Dict[str, Any]:
    """Commit, branch and dirty flag of the repository containing ``path``."""
    info: Dict[str, Any] = {
        "commit": None,
        "branch": None,
        "is_dirty": False,
    }

    try:
        repo = Repo(path or os.getcwd(), search_parent_directories=True)
        if not repo.bare:
            info["commit"] = repo.head.commit.hexsha
            try:
                info["branch"] = repo.active_branch.name
            except TypeError:
                # Detached HEAD state
                info["branch"] = f"detached@{info['commit'][:7]}"
            info["is_dirty"] = repo.is_dirty(untracked_files=False)
    except (InvalidGitRepositoryError, NoSuchPathError):
        logger.debug("Not in a git repository")
    except Exception as e:
        logger.warning(f"Error getting git info: {e}")

    return info


def code_version(path: Optional[Path] = None) -> str:
    """Package version, plus the short commit (and a dirty marker) inside a checkout."""
    info = get_git_info(path)
    if not info["commit"]:
        return __version__
    suffix = "+dirty" if info["is_dirty"] else ""
    return f"{__version__}+g{info['commit'][:7]}{suffix}"
