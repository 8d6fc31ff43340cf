"""Residual CNN backbone with layer taps, linear probes and self-ensembles."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import crossmax as cm
from .dataio import Dataset, MixupSchedule, batch_order, mixup_batches
from .gradcore import NumericError, OptimizerState, ShapeError, conv2d, optimizer_step, softmax_cross_entropy
from .multires import MultiResConfig, multires_input

Tensor = torch.Tensor
log = logging.getLogger(__name__)

EVAL_DRAW = 1_000_000  # draw index used for clean/robust accuracy of stochastic models


@dataclass(frozen=True)
class BackboneConfig:
    input_channels: int = 12
    widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    class_count: int = 10
    taps: tuple[int, ...] | None = None  # layer indices; None = every layer

    @property
    def n_layers(self) -> int:
        return 1 + len(self.widths) * self.blocks_per_stage

    @property
    def tap_indices(self) -> tuple[int, ...]:
        taps = tuple(range(self.n_layers)) if self.taps is None else tuple(self.taps)
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ValueError(f"tap indices must be strictly increasing: {taps}")
        if not taps or taps[-1] != self.n_layers - 1:
            raise ValueError(f"last tap must be the final feature layer {self.n_layers - 1}: {taps}")
        if taps[0] < 0:
            raise ValueError("tap indices must be non-negative")
        return taps


class Conv(nn.Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, gain: float = 1.0):
        super().__init__()
        self.stride, self.pad = stride, k // 2
        std = gain * math.sqrt(2.0 / (cin * k * k))
        self.weight = nn.Parameter(torch.randn(cout, cin, k, k) * std)
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, zero_padding=self.pad)


class ResBlock(nn.Module):
    """Two 3x3 convs with a skip; no normalization layers."""

    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = Conv(cin, cout, 3, stride)
        self.conv2 = Conv(cout, cout, 3, 1, gain=0.3)
        self.skip = Conv(cin, cout, 1, stride) if (stride != 1 or cin != cout) else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv2(F.relu(self.conv1(x)))
        return F.relu(h + (x if self.skip is None else self.skip(x)))


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig, seed: int = 0):
        super().__init__()
        self.config = config
        config.tap_indices  # validate early
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            layers: list[nn.Module] = [nn.Sequential(Conv(config.input_channels, config.widths[0], 3), nn.ReLU())]
            c = config.widths[0]
            for si, w in enumerate(config.widths):
                for bi in range(config.blocks_per_stage):
                    layers.append(ResBlock(c, w, 2 if (bi == 0 and si > 0) else 1))
                    c = w
            self.layers = nn.ModuleList(layers)
            self.head = nn.Linear(c, config.class_count)
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward_with_taps(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"backbone expects {self.config.input_channels} input channels, got shape {tuple(x.shape)}"
            )
        taps = set(self.config.tap_indices)
        acts = []
        h = self.normalize(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i in taps:
                acts.append(h)
        return self.head(h.mean(dim=(2, 3))), acts

    @staticmethod
    def normalize(x: Tensor) -> Tensor:
        return (x - 0.5) * 4.0  # fixed centring; inputs live in [0,1]

    def run_until(self, x: Tensor, layer_index: int) -> Tensor:
        """Activation after layer ``layer_index`` without computing later layers."""
        h = self.normalize(x)
        for layer in self.layers[: layer_index + 1]:
            h = layer(h)
        return h

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_taps(x)[0]


class ReferenceCNN(nn.Module):
    """Three conv layers and a linear head; used to sanity-check datasets."""

    def __init__(self, class_count: int, in_channels: int = 3, width: int = 32, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.c1 = nn.Conv2d(in_channels, width, 3, padding=1)
            self.c2 = nn.Conv2d(width, width, 3, stride=2, padding=1)
            self.c3 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
            self.fc = nn.Linear(2 * width, class_count)

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.c3(F.relu(self.c2(F.relu(self.c1(x))))))
        return self.fc(h.mean(dim=(2, 3)))


def fit_reference_cnn(dataset: Dataset, epochs: int = 5, lr: float = 3e-3, batch_size: int = 32, seed: int = 0):
    """Train a :class:`ReferenceCNN`; returns (model, train accuracy per epoch)."""
    model = ReferenceCNN(dataset.class_count, dataset.images.shape[1], seed=seed)
    state = OptimizerState(lr)
    n, accs = len(dataset), []
    for epoch in range(epochs):
        order = torch.from_numpy(batch_order(n, seed, epoch))
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            loss = softmax_cross_entropy(model(Backbone.normalize(dataset.images[idx])), dataset.labels[idx])
            params = list(model.parameters())
            optimizer_step(params, torch.autograd.grad(loss, params), state)
        with torch.no_grad():
            pred = model(Backbone.normalize(dataset.images)).argmax(1)
        accs.append(float((pred == dataset.labels).double().mean()))
    return model, accs


# ---------------------------------------------------------------------------
# classifiers: preprocessing + backbone


class Classifier(nn.Module):
    """Raw [B,3,R,R] images in, logits out.

    With a ``multires`` config the input becomes a jittered, noised
    multi-resolution stack, so the model is stochastic: ``draw`` selects the
    augmentation draw and ``sample_ids`` the per-sample stream.
    """

    def __init__(self, backbone: Backbone, multires: MultiResConfig | None = None):
        super().__init__()
        self.backbone = backbone
        self.multires = multires
        want = 3 if multires is None else multires.channels
        if backbone.config.input_channels != want:
            raise ShapeError(f"backbone takes {backbone.config.input_channels} channels, preprocessing gives {want}")

    @property
    def stochastic(self) -> bool:
        return self.multires is not None and (
            self.multires.jitter_amplitude > 0
            or self.multires.eval_noise_sigma > 0
            or self.multires.grayscale_shift_max > 0
            or self.multires.contrast_range != (1.0, 1.0)
        )

    def preprocess(self, x: Tensor, draw: int | None = 0, sample_ids=None) -> Tensor:
        if self.multires is None:
            return x
        cfg = self.multires if self.training else self.multires.for_eval()
        return multires_input(x, cfg, draw, sample_ids)

    def forward_with_taps(self, x: Tensor, draw: int | None = 0, sample_ids=None):
        return self.backbone.forward_with_taps(self.preprocess(x, draw, sample_ids))

    def forward(self, x: Tensor, draw: int | None = 0, sample_ids=None) -> Tensor:
        return self.backbone(self.preprocess(x, draw, sample_ids))


def make_classifier(
    class_count: int,
    multires: MultiResConfig | None = None,
    widths: Sequence[int] = (16, 32, 64),
    blocks_per_stage: int = 2,
    seed: int = 0,
) -> Classifier:
    cin = 3 if multires is None else multires.channels
    cfg = BackboneConfig(cin, tuple(widths), blocks_per_stage, class_count)
    return Classifier(Backbone(cfg, seed), multires).eval()


class LinearProbe(nn.Module):
    """Affine map from a pooled (or flattened) activation to class logits.

    ``pool`` is ``"avg"`` (global average), ``"flatten"``, or an int grid
    size for adaptive average pooling.
    """

    def __init__(self, layer_index: int, act_shape: Sequence[int], class_count: int, pool="avg", seed: int = 0):
        super().__init__()
        self.layer_index = layer_index
        self.pool = pool
        c, h, w = act_shape
        dim = {"avg": c, "flatten": c * h * w}.get(pool) if isinstance(pool, str) else c * pool * pool
        if dim is None:
            raise ValueError(f"unknown probe pooling {pool!r}")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.weight = nn.Parameter(torch.randn(class_count, dim) / math.sqrt(dim))
            self.bias = nn.Parameter(torch.zeros(class_count))

    def features(self, act: Tensor) -> Tensor:
        if self.pool == "avg":
            return act.mean(dim=(2, 3))
        if self.pool == "flatten":
            return act.flatten(1)
        return F.adaptive_avg_pool2d(act, self.pool).flatten(1)

    def forward(self, act: Tensor) -> Tensor:
        f = self.features(act)
        if f.shape[1] != self.weight.shape[1]:
            raise ShapeError(f"probe expects {self.weight.shape[1]} features, got {f.shape[1]}")
        return F.linear(f, self.weight, self.bias)


class SelfEnsemble(nn.Module):
    def __init__(self, classifier: Classifier, probes: Sequence[LinearProbe], mode: cm.AggregationMode = cm.CROSSMAX_SELF):
        super().__init__()
        taps = classifier.backbone.config.tap_indices
        if len(probes) != len(taps):
            raise ValueError(f"{len(probes)} probes for {len(taps)} taps")
        self.classifier = classifier
        self.probes = nn.ModuleList(probes)
        self.mode = mode

    @property
    def stochastic(self) -> bool:
        return self.classifier.stochastic

    def probe_logits(self, x: Tensor, draw: int | None = 0, sample_ids=None) -> Tensor:
        _, acts = self.classifier.forward_with_taps(x, draw, sample_ids)
        return torch.stack([p(a) for p, a in zip(self.probes, acts)], dim=1)

    def forward(self, x: Tensor, draw: int | None = 0, sample_ids=None) -> Tensor:
        return selfensemble_predict(self, x, draw, sample_ids)

    def probe_predictor(self, alpha: int) -> "ProbePredictor":
        if not 0 <= alpha < len(self.probes):
            raise IndexError(f"tap {alpha} out of range [0, {len(self.probes)})")
        return ProbePredictor(self, alpha)


class ProbePredictor:
    """Logits of a single probe; runs the backbone only up to its tap."""

    def __init__(self, ensemble: SelfEnsemble, alpha: int):
        self.ensemble, self.alpha = ensemble, alpha
        self.stochastic = ensemble.stochastic

    def __call__(self, x: Tensor, draw: int | None = 0, sample_ids=None) -> Tensor:
        clf = self.ensemble.classifier
        stop = clf.backbone.config.tap_indices[self.alpha]
        h = clf.backbone.run_until(clf.preprocess(x, draw, sample_ids), stop)
        return self.ensemble.probes[self.alpha](h)


def selfensemble_predict(ensemble: SelfEnsemble, x: Tensor, draw: int | None = 0, sample_ids=None) -> Tensor:
    return cm.crossmax(ensemble.probe_logits(x, draw, sample_ids), ensemble.mode)


class Ensemble:
    """Several predictors aggregated through a logit block."""

    def __init__(self, members: Sequence[Callable], mode: cm.AggregationMode = cm.CROSSMAX):
        self.members = list(members)
        self.mode = mode
        self.stochastic = any(getattr(m, "stochastic", False) for m in self.members)

    def block(self, x: Tensor, draw: int | None = 0, sample_ids=None) -> Tensor:
        return torch.stack([m(x, draw, sample_ids) for m in self.members], dim=1)

    def __call__(self, x: Tensor, draw: int | None = 0, sample_ids=None) -> Tensor:
        return cm.crossmax(self.block(x, draw, sample_ids), self.mode)

    def with_mode(self, mode: cm.AggregationMode) -> "Ensemble":
        return Ensemble(self.members, mode)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainSchedule:
    epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 128
    mixup: MixupSchedule | None = None
    adversarial: bool = False
    adv_epsilon: float = 8 / 255
    seed: int = 0


class TrainingDiverged(NumericError):
    def __init__(self, msg: str, trace: list[float]):
        super().__init__(msg)
        self.trace = trace


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().contiguous().cpu().numpy().tobytes())
    return h.hexdigest()


def _step(model: nn.Module, loss: Tensor, state: OptimizerState, trace: list[float]) -> None:
    value = float(loss.detach())
    trace.append(value)
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value} at step {len(trace)}", trace)
    params = [p for p in model.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    optimizer_step(params, grads, state)


def train_backbone(dataset: Dataset, classifier: Classifier, schedule: TrainSchedule) -> tuple[Classifier, list[float]]:
    """Train ``classifier`` in place with Adam at a flat learning rate.

    Returns the classifier and the per-batch loss trace.  With
    ``schedule.adversarial`` every batch is replaced by its FGSM version.
    """
    from .attacks import fgsm  # attacks depends on model only by duck typing

    if dataset.class_count != classifier.backbone.config.class_count:
        raise ValueError(
            f"dataset has {dataset.class_count} classes, model {classifier.backbone.config.class_count}"
        )
    state = OptimizerState(schedule.lr)
    trace: list[float] = []
    classifier.train()
    n = len(dataset)
    bs = min(schedule.batch_size, n)
    try:
        for epoch in range(schedule.epochs):
            if schedule.mixup is not None:
                batches = mixup_batches(dataset, schedule.mixup, epoch, bs)
            else:
                order = torch.from_numpy(batch_order(n, schedule.seed, epoch))
                batches = (
                    (dataset.images[idx], dataset.labels[idx], dataset.labels[idx], torch.zeros(len(idx)), idx)
                    for idx in (order[s:s + bs] for s in range(0, n, bs))
                )
            for x, y, y2, p, idx in batches:
                ids = idx.tolist()

                def loss_fn(logits, y=y, y2=y2, p=p):
                    if schedule.mixup is None:
                        return softmax_cross_entropy(logits, y)
                    lp = F.log_softmax(logits, dim=1)
                    nll1 = -lp.gather(1, y[:, None]).squeeze(1)
                    nll2 = -lp.gather(1, y2[:, None]).squeeze(1)
                    return ((1 - p) * nll1 + p * nll2).mean()

                if schedule.adversarial:
                    x = fgsm(
                        lambda z: classifier(z, epoch, ids), x, y, schedule.adv_epsilon, loss_fn=loss_fn
                    )
                loss = loss_fn(classifier(x, epoch, ids))
                _step(classifier, loss, state, trace)
    finally:
        classifier.eval()
    return classifier, trace


def train_probes(
    classifier: Classifier,
    dataset: Dataset,
    epochs: int = 1,
    lr: float = 1e-2,
    batch_size: int = 64,
    pool=4,
    seed: int = 0,
) -> list[LinearProbe]:
    """Fit one linear probe per tap on the frozen backbone.

    Each probe has its own optimizer state; backbone parameters are never
    touched.
    """
    classifier.eval()
    n = len(dataset)
    bs = min(batch_size, n)
    with torch.no_grad():
        _, acts = classifier.forward_with_taps(dataset.images[:1], None)
    taps = classifier.backbone.config.tap_indices
    probes = [
        LinearProbe(li, a.shape[1:], dataset.class_count, pool, seed=seed * 1000 + i)
        for i, (li, a) in enumerate(zip(taps, acts))
    ]
    states = [OptimizerState(lr) for _ in probes]
    for epoch in range(epochs):
        order = torch.from_numpy(batch_order(n, seed + 17, epoch))
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            with torch.no_grad():
                _, acts = classifier.forward_with_taps(dataset.images[idx], EVAL_DRAW + 1 + epoch, idx.tolist())
            y = dataset.labels[idx]
            for probe, st, a in zip(probes, states, acts):
                loss = softmax_cross_entropy(probe(a), y)
                params = list(probe.parameters())
                optimizer_step(params, torch.autograd.grad(loss, params), st)
    return probes


def build_selfensemble(
    classifier: Classifier,
    dataset: Dataset,
    mode: cm.AggregationMode = cm.CROSSMAX_SELF,
    **probe_kwargs,
) -> SelfEnsemble:
    return SelfEnsemble(classifier, train_probes(classifier, dataset, **probe_kwargs), mode)


@torch.no_grad()
def predict_logits(predictor: Callable, images: Tensor, draw: int | None = EVAL_DRAW, batch_size: int = 256) -> Tensor:
    outs = []
    for s in range(0, images.shape[0], batch_size):
        ids = list(range(s, min(s + batch_size, images.shape[0])))
        outs.append(predictor(images[s:s + batch_size], draw, ids))
    return torch.cat(outs)


def accuracy(predictor: Callable, images: Tensor, labels: Tensor, draw: int | None = EVAL_DRAW) -> float:
    if images.shape[0] == 0:
        raise ValueError("accuracy of an empty set")
    pred = cm.predict(predict_logits(predictor, images, draw))
    return float((pred == labels).double().mean())


def probe_accuracies(ensemble: SelfEnsemble, images: Tensor, labels: Tensor, draw: int | None = EVAL_DRAW) -> list[float]:
    block = predict_logits(ensemble.probe_logits, images, draw)
    return [float((block[:, i].argmax(-1) == labels).double().mean()) for i in range(block.shape[1])]
