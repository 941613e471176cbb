"""Balanced entropy-regularized optimal transport between samples and prototypes.

The solver works on ``log Q`` so the Gibbs kernel ``exp(lam * scores)`` never
materializes and cannot overflow. Everything runs in float64 under
``torch.no_grad``: the resulting pseudo-labels are training targets, never a
gradient path.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch

from tubeot.config import SinkhornConfig
from tubeot.errors import ConfigError, NumericError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OTProblem:
    #: ``[K, B]``: one row per prototype, one column per sample.
    scores: torch.Tensor
    lam: float

    def __post_init__(self) -> None:
        if self.lam <= 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if self.scores.dim() != 2 or 0 in self.scores.shape:
            raise ShapeError(f"scores must be a non-empty matrix, got {tuple(self.scores.shape)}")
        if not torch.isfinite(self.scores).all():
            raise NumericError("non-finite scores passed to the transport solver")

    @property
    def n_prototypes(self) -> int:
        return int(self.scores.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.scores.shape[1])

    @property
    def row_marginal(self) -> torch.Tensor:
        return torch.full((self.n_prototypes,), 1.0 / self.n_prototypes, dtype=torch.float64)

    @property
    def col_marginal(self) -> torch.Tensor:
        return torch.full((self.n_samples,), 1.0 / self.n_samples, dtype=torch.float64)


@dataclass(frozen=True)
class AssignmentMatrix:
    #: ``[K, B]`` transport plan, float64, total mass one.
    Q: torch.Tensor
    iterations: int
    #: Largest absolute deviation of a row sum from ``1 / K``.
    max_violation: float


def _row_violation(log_q: torch.Tensor, n_prototypes: int) -> float:
    return float((log_q.exp().sum(dim=1) - 1.0 / n_prototypes).abs().max())


@torch.no_grad()
def sinkhorn(
    problem: OTProblem,
    n_iters: int = 3,
    tol: float | None = None,
    *,
    max_iters: int = 1000,
) -> AssignmentMatrix:
    """Alternate row and column scaling, ending on the columns.

    With ``tol`` unset exactly ``n_iters`` rounds run. With ``tol`` set, rounds
    continue until the row sums are within ``tol`` of ``1 / K`` or ``max_iters``
    rounds have run.
    """
    if tol is None and n_iters < 1:
        raise ConfigError(f"need n_iters >= 1 or a positive tol, got n_iters={n_iters}")
    if tol is not None and tol <= 0:
        raise ConfigError(f"tol must be positive, got {tol}")

    k, b = problem.n_prototypes, problem.n_samples
    log_kernel = problem.lam * problem.scores.detach().to(torch.float64)
    log_r, log_c = -math.log(k), -math.log(b)
    log_u = torch.zeros(k, dtype=torch.float64)
    log_v = torch.zeros(b, dtype=torch.float64)

    cap = n_iters if tol is None else max_iters
    iterations = 0
    violation = math.inf
    for iterations in range(1, cap + 1):
        log_u = log_r - torch.logsumexp(log_kernel + log_v[None, :], dim=1)
        log_v = log_c - torch.logsumexp(log_kernel + log_u[:, None], dim=0)
        if tol is not None:
            violation = _row_violation(log_u[:, None] + log_kernel + log_v[None, :], k)
            if violation <= tol:
                break

    log_q = log_u[:, None] + log_kernel + log_v[None, :]
    q = log_q.exp()
    # Pin the columns to 1/B in floating point as well.
    q = q / q.sum(dim=0, keepdim=True) / b
    violation = float((q.sum(dim=1) - 1.0 / k).abs().max())
    if tol is not None and violation > tol:
        logger.warning(
            "sinkhorn stopped after %d iterations with row violation %.3g > %.3g",
            iterations,
            violation,
            tol,
        )
    return AssignmentMatrix(Q=q, iterations=iterations, max_violation=violation)


def pseudo_labels(assignment: AssignmentMatrix) -> torch.Tensor:
    """``[B, K]`` rows: each sample's column of ``Q`` rescaled to a distribution."""
    col_mass = assignment.Q.sum(dim=0, keepdim=True)
    if bool((col_mass <= 0).any()):
        raise NumericError("transport plan has a column with zero mass")
    return (assignment.Q / col_mass).T


def assign(x_tilde: torch.Tensor, config: SinkhornConfig) -> torch.Tensor:
    """Pseudo-labels for a ``[B, K]`` score matrix, in the score dtype."""
    problem = OTProblem(scores=x_tilde.detach().T, lam=config.lam)
    assignment = sinkhorn(problem, config.n_iters, config.tol, max_iters=config.max_iters)
    return pseudo_labels(assignment).to(x_tilde.dtype)
