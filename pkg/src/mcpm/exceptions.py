"""Exception types shared across the package.

The command line front end maps these onto exit codes, so library code
should raise the most specific type that applies rather than a bare
ValueError when the failure is numerical.
"""

from __future__ import annotations


class McpmError(Exception):
    """Base class for failures specific to this package."""


class MgfDomainError(McpmError):
    """Moment generating function evaluated outside its domain.

    Raised when 1 - t^2 * var_w * var_f falls at or below the domain
    guard for some latent. The offending indices are carried so callers
    can report which latent (and optionally which cell/task) failed.
    """

    def __init__(self, t, latent, denom, cell=None, task=None):
        self.t = t
        self.latent = latent
        self.denom = denom
        self.cell = cell
        self.task = task
        where = f"latent {latent}"
        if cell is not None:
            where += f", cell {cell}"
        if task is not None:
            where += f", task {task}"
        super().__init__(
            f"MGF undefined at t={t} for {where}: "
            f"1 - t^2 var_w var_f = {denom:.3e} <= domain guard"
        )


class FactorizationError(McpmError):
    """Cholesky factorization failed even at the jitter cap."""


class TrainingFailureError(McpmError):
    """No valid optimization step could be taken in the first epoch."""
