"""Linear probe: multinomial logistic regression on mean-pooled frozen features."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from tubeot.config import ProbeConfig
from tubeot.data.synthetic import VideoClip
from tubeot.errors import ConfigError, NumericError, ShapeError
from tubeot.eval.features import FeatureExtractor, as_extractor
from tubeot.train.state import TrainState


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    train_accuracy: float
    per_class_accuracy: dict[int, float] = field(default_factory=dict)
    n_train: int = 0
    n_test: int = 0
    n_classes: int = 0


def pooled_features(clips: Sequence[VideoClip], extractor: FeatureExtractor) -> torch.Tensor:
    """``[n, d]``: average over every tube of each clip."""
    if not clips:
        raise ConfigError("cannot pool features of an empty clip set")
    return torch.stack([extractor(clip).pooled() for clip in clips]).to(torch.float64)


def clip_labels(clips: Sequence[VideoClip]) -> torch.Tensor:
    labels = []
    for clip in clips:
        if clip.label is None:
            raise ConfigError(f"{clip.clip_id} has no label")
        labels.append(clip.label)
    return torch.tensor(labels, dtype=torch.int64)


def _accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    return float((logits.argmax(dim=1) == labels).to(torch.float64).mean())


def fit_linear_probe(
    train_x: torch.Tensor,
    train_y: torch.Tensor,
    test_x: torch.Tensor,
    test_y: torch.Tensor,
    config: ProbeConfig | None = None,
) -> ProbeResult:
    """Fit on ``(train_x, train_y)`` with full-batch L-BFGS and score on the test pair.

    Features are standardized with the training statistics. The classifier
    starts at zero, so for a given ``config`` the result does not depend on any
    random state.
    """
    config = config or ProbeConfig()
    if train_x.dim() != 2 or test_x.dim() != 2 or train_x.shape[1] != test_x.shape[1]:
        raise ShapeError(
            f"probe features must be [n, d] with equal d, got {tuple(train_x.shape)} "
            f"and {tuple(test_x.shape)}"
        )
    if train_x.shape[0] != train_y.shape[0] or test_x.shape[0] != test_y.shape[0]:
        raise ShapeError("features and labels differ in count")
    if test_x.shape[0] == 0:
        raise ConfigError("the probe test set is empty")
    if train_y.unique().numel() < 2:
        raise ConfigError("the probe training set holds a single class")

    n_classes = int(max(int(train_y.max()), int(test_y.max()))) + 1
    x_train = train_x.to(torch.float64)
    mean = x_train.mean(dim=0)
    std = x_train.std(dim=0, unbiased=False) + 1e-6
    x_train = (x_train - mean) / std
    x_test = (test_x.to(torch.float64) - mean) / std

    torch.manual_seed(config.seed)
    classifier = nn.Linear(x_train.shape[1], n_classes, dtype=torch.float64)
    nn.init.zeros_(classifier.weight)
    nn.init.zeros_(classifier.bias)
    optimizer = torch.optim.LBFGS(
        classifier.parameters(),
        lr=config.lr,
        max_iter=config.max_iters,
        tolerance_grad=1e-9,
        tolerance_change=1e-12,
        history_size=20,
        line_search_fn="strong_wolfe",
    )

    def closure() -> torch.Tensor:
        optimizer.zero_grad()
        loss = F.cross_entropy(classifier(x_train), train_y)
        loss = loss + 0.5 * config.weight_decay * classifier.weight.pow(2).sum()
        loss.backward()
        return loss

    optimizer.step(closure)
    with torch.no_grad():
        train_logits = classifier(x_train)
        test_logits = classifier(x_test)
    if not torch.isfinite(test_logits).all():
        raise NumericError("linear probe diverged")

    per_class = {}
    for cls in test_y.unique().tolist():
        members = test_y == cls
        per_class[int(cls)] = _accuracy(test_logits[members], test_y[members])
    return ProbeResult(
        accuracy=_accuracy(test_logits, test_y),
        train_accuracy=_accuracy(train_logits, train_y),
        per_class_accuracy=per_class,
        n_train=int(train_x.shape[0]),
        n_test=int(test_x.shape[0]),
        n_classes=n_classes,
    )


def linear_probe(
    train_set: Sequence[VideoClip],
    test_set: Sequence[VideoClip],
    train_state: TrainState | FeatureExtractor,
    probe_config: ProbeConfig | None = None,
) -> ProbeResult:
    extractor = as_extractor(train_state)
    return fit_linear_probe(
        pooled_features(train_set, extractor),
        clip_labels(train_set),
        pooled_features(test_set, extractor),
        clip_labels(test_set),
        probe_config,
    )
