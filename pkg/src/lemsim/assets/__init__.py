"""Bundled surrogate data: the 88-bus feeder and the reference scenario."""

from importlib import resources
from pathlib import Path


def asset_path(name: str) -> Path:
    """Filesystem path of a bundled asset (feeder88.toml, reference.toml)."""
    return Path(resources.files(__package__) / name)
