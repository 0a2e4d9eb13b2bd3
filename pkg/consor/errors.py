"""Exception hierarchy shared by every consor module."""

from __future__ import annotations

from typing import TYPE_CHECKING, Optional, Sequence

if TYPE_CHECKING:  # pragma: no cover
    from .model import ValidationReport


class ConsorError(Exception):
    """Base error; ``category`` is the short tag the CLI prints on failure."""

    category = "runtime"


class TaxonomyError(ConsorError, ValueError):
    category = "taxonomy"


class AnnotationError(ConsorError, ValueError):
    """Annotation file could not be parsed or violates dataset invariants."""

    category = "annotation"

    def __init__(
        self,
        message: str,
        *,
        path: Optional[str] = None,
        position: Optional[str] = None,
        report: Optional["ValidationReport"] = None,
    ) -> None:
        where = ""
        if path:
            where = f"{path}: "
        if position:
            where = f"{where}{position}: "
        super().__init__(f"{where}{message}")
        self.path = path
        self.position = position
        self.report = report


class PackCorruptError(ConsorError, ValueError):
    category = "pack-corrupt"


class MissingFixtureError(ConsorError, KeyError):
    """One or more images/texts have no frozen features available."""

    category = "missing-fixture"

    def __init__(self, missing: Sequence[str], kind: str = "image") -> None:
        self.missing = tuple(missing)
        self.kind = kind
        shown = ", ".join(self.missing[:20])
        more = f" (+{len(self.missing) - 20} more)" if len(self.missing) > 20 else ""
        super().__init__(f"missing {kind} fixture(s): {shown}{more}")

    def __str__(self) -> str:
        return str(self.args[0])


class ShapeMismatchError(ConsorError, ValueError):
    category = "shape"


class PromptError(ConsorError, ValueError):
    category = "prompt"


class ZeroNormError(ConsorError, ValueError):
    category = "zero-norm"


class NonFiniteLossError(ConsorError, RuntimeError):
    category = "non-finite-loss"

    def __init__(self, message: str, dump_path: Optional[str] = None) -> None:
        suffix = f" (diagnostic dump: {dump_path})" if dump_path else ""
        super().__init__(f"{message}{suffix}")
        self.dump_path = dump_path


class AttentionNotRetainedError(ConsorError, RuntimeError):
    category = "attention"


class ConfigError(ConsorError, ValueError):
    category = "config"


class EmptyTableError(ConsorError, ValueError):
    category = "empty-table"


class ScheduleError(ConfigError):
    category = "schedule"


class GradCheckError(ConsorError, AssertionError):
    category = "grad-check"
