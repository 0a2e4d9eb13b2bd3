"""Public package exports for consor."""

from importlib.metadata import PackageNotFoundError, version

__all__ = [
    "annotations",
    "cir",
    "config",
    "encoders",
    "evaluation",
    "featurepack",
    "msat",
    "network",
    "prompts",
    "toy",
    "training",
]

try:
    __version__ = version("consor-relations")
except PackageNotFoundError:  # pragma: no cover - during local source usage
    __version__ = "0.0.0"
