"""Training losses: pixel regression, feature regression and swapped prototype prediction."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from tubeot.config import SinkhornConfig
from tubeot.errors import ConfigError, NumericError, ShapeError, TargetError
from tubeot.model.prototypes import PrototypeBank, scores
from tubeot.sinkhorn import assign

#: Tolerance on target rows summing to one.
TARGET_TOL = 1e-6


@dataclass(frozen=True)
class LossReport:
    """A scalar loss plus its named terms; ``loss`` equals the sum of ``terms``."""

    loss: torch.Tensor
    batch_size: int
    terms: dict[str, torch.Tensor] = field(default_factory=dict)
    #: Pseudo-labels computed for each side, ``[B, K]``; empty for regression losses.
    q_phi: torch.Tensor | None = None
    q_psi: torch.Tensor | None = None

    def item(self) -> float:
        return float(self.loss.detach())

    def term(self, name: str) -> float:
        value = self.terms.get(name)
        return float(value.detach()) if value is not None else float("nan")


def _squared_l2(prediction: torch.Tensor, target: torch.Tensor, what: str) -> LossReport:
    if prediction.shape != target.shape:
        raise ShapeError(
            f"{what}: prediction {tuple(prediction.shape)} and target {tuple(target.shape)} differ"
        )
    if prediction.dim() < 2 or prediction.shape[-2] == 0:
        raise ShapeError(f"{what}: need at least one masked row")
    loss = ((prediction - target) ** 2).sum(dim=-1).mean()
    if not torch.isfinite(loss):
        raise NumericError(f"{what} is not finite")
    rows = int(prediction.numel() // prediction.shape[-1])
    return LossReport(loss=loss, batch_size=rows)


def pixel_l2_loss(pixel_pred: torch.Tensor, raw_tubes_masked: torch.Tensor) -> LossReport:
    """Mean squared L2 distance between predicted and true masked tube pixels."""
    return _squared_l2(pixel_pred, raw_tubes_masked, "pixel loss")


def feature_l2_loss(x_phi: torch.Tensor, x_psi: torch.Tensor) -> LossReport:
    """Mean squared L2 distance between target and predicted feature rows.

    Both sides receive gradient, so the loss is minimized by any constant
    output shared by the two networks.
    """
    return _squared_l2(x_psi, x_phi, "feature loss")


def _check_targets(q: torch.Tensor) -> None:
    if bool((q < -TARGET_TOL).any()):
        raise TargetError("target rows contain negative mass")
    # Summed in float64 so float32 rows are not failed for accumulated rounding.
    row_sums = q.to(torch.float64).sum(dim=1)
    deviation = float((row_sums - 1).abs().max()) if q.numel() else 0.0
    if deviation > TARGET_TOL:
        raise TargetError(f"target rows sum to 1 only within {deviation:.3g}")


def cross_entropy_term(x_tilde: torch.Tensor, q_targets: torch.Tensor, tau: float) -> torch.Tensor:
    """``mean_b( -sum_k q[b, k] * log softmax(x_tilde[b] / tau)_k )`` with ``q`` held constant."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if x_tilde.shape != q_targets.shape:
        raise ShapeError(
            f"scores {tuple(x_tilde.shape)} and targets {tuple(q_targets.shape)} differ"
        )
    q = q_targets.detach()
    _check_targets(q)
    return -(q * F.log_softmax(x_tilde / tau, dim=1)).sum(dim=1).mean()


def sigma_loss(
    x_phi: torch.Tensor,
    x_psi: torch.Tensor,
    bank: PrototypeBank,
    tau: float,
    ot_config: SinkhornConfig,
    *,
    feasibility_ratio: float = 16.0,
    targets: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> LossReport:
    """Swapped prediction: each network predicts the other's balanced assignment.

    ``terms["ce_phi"]`` scores the projection network against the video model's
    pseudo-labels and ``terms["ce_psi"]`` the reverse. ``targets`` replaces the
    ``(q_phi, q_psi)`` pair computed by the solver.
    """
    if x_phi.dim() != 2 or x_phi.shape != x_psi.shape:
        raise ShapeError(
            f"feature rows must be matching [B, d] matrices, got {tuple(x_phi.shape)} "
            f"and {tuple(x_psi.shape)}"
        )
    batch = int(x_phi.shape[0])
    if batch < bank.count / feasibility_ratio:
        raise ConfigError(
            f"a batch of {batch} rows cannot spread over {bank.count} prototypes "
            f"(need at least {bank.count / feasibility_ratio:g})"
        )

    s_phi = scores(x_phi, bank).x_tilde
    s_psi = scores(x_psi, bank).x_tilde
    if targets is None:
        q_phi, q_psi = assign(s_phi, ot_config), assign(s_psi, ot_config)
    else:
        q_phi, q_psi = (q.detach() for q in targets)

    ce_phi = cross_entropy_term(s_phi, q_psi, tau)
    ce_psi = cross_entropy_term(s_psi, q_phi, tau)
    loss = ce_phi + ce_psi
    if not torch.isfinite(loss):
        raise NumericError("swapped prediction loss is not finite")
    return LossReport(
        loss=loss,
        batch_size=batch,
        terms={"ce_phi": ce_phi, "ce_psi": ce_psi},
        q_phi=q_phi,
        q_psi=q_psi,
    )
