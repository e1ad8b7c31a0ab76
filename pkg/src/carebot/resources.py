"""Access to the data files shipped inside the package."""

from __future__ import annotations

from importlib import resources
from pathlib import Path


def data_path(*parts: str) -> Path:
    """Path of a shipped data file, e.g. data_path("stopwords_en.txt")."""
    root = resources.files("carebot") / "data"
    path = Path(str(root)).joinpath(*parts)
    if not path.exists():
        raise FileNotFoundError(f"packaged data file not found: {path}")
    return path


def default_config_path() -> Path:
    """The shipped engine configuration wired to the fixture corpus."""
    return data_path("config.json")
