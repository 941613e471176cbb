"""Everything a training run needs to continue from where it stopped."""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass

import torch
from torch import nn

from tubeot.config import RunConfig
from tubeot.model.networks import ProjectionMLP, VideoModel
from tubeot.model.prototypes import PrototypeBank


@dataclass
class TrainState:
    config: RunConfig
    model: VideoModel
    projector: ProjectionMLP | None
    bank: PrototypeBank
    optimizer: torch.optim.AdamW
    #: Optimizer steps taken so far.
    step: int = 0
    #: Epoch the next step belongs to.
    epoch: int = 0
    #: Byte state of the epoch generator at the start of ``epoch``.
    epoch_generator: torch.Tensor | None = None
    #: Clip order drawn for ``epoch``.
    epoch_order: torch.Tensor | None = None

    def modules(self) -> dict[str, nn.Module]:
        modules: dict[str, nn.Module] = {"psi": self.model}
        if self.projector is not None:
            modules["phi"] = self.projector
        modules["bank"] = self.bank
        return modules

    def named_parameters(self) -> Iterator[tuple[str, nn.Parameter]]:
        for prefix, module in self.modules().items():
            for name, param in module.named_parameters():
                yield f"{prefix}.{name}", param

    def train(self, mode: bool = True) -> None:
        for module in self.modules().values():
            module.train(mode)

    def eval(self) -> None:
        self.train(False)


def build_state(config: RunConfig) -> TrainState:
    """Freshly initialized networks and optimizer for ``config``.

    Parameter init is seeded from ``train.seed``; prototypes from their own seed.
    """
    objective = config.train.objective
    torch.manual_seed(config.train.seed)
    model = VideoModel(config.model, config.tube_dim, pixel_head=objective == "pixel_l2")
    projector = None
    if objective != "pixel_l2" and config.projection.source == "mlp":
        projector = ProjectionMLP.from_config(
            config.projection, config.tube_dim, config.model.d_feat
        )
    bank = PrototypeBank.from_config(config.prototypes, config.model.d_feat)

    params = list(model.parameters())
    if projector is not None:
        params += list(projector.parameters())
    # Outside the swapped objective the bank only feeds diagnostics.
    if objective == "sigma":
        params += list(bank.parameters())
    else:
        bank.requires_grad_(False)

    train = config.train
    optimizer = torch.optim.AdamW(
        params,
        lr=train.lr,
        betas=train.betas,
        eps=train.eps,
        weight_decay=train.weight_decay,
    )
    return TrainState(
        config=config, model=model, projector=projector, bank=bank, optimizer=optimizer
    )
