"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes (see eqmap.cli):
usage 2, not-found 3, data/format 4, numeric failure 5. Library code
raises ValueError for plain invalid arguments; the CLI treats those as
data errors unless argparse catches them first.
"""


class UsageError(Exception):
    """Bad command-line usage detected past argparse (exit 2)."""


class NotFoundError(Exception):
    """A dataset, checkpoint, or results path does not exist (exit 3)."""


class DataFormatError(Exception):
    """Malformed container, config, or dataset contents (exit 4)."""


class DegenerateWarpError(ValueError):
    """Warp spec cannot be realized: singular affine or coincident
    thin-plate control points."""


class NumericFailure(Exception):
    """Training hit a non-finite loss (exit 5). Carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
