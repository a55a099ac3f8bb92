"""Tests for tclmarket."""
