"""CrossMax logit aggregation and its ablation variants.

Logit blocks are ``[B, N, C]`` (batch, predictors, classes).  Normalization
step ``A`` subtracts each predictor's max over classes; step ``B``
subtracts each class's max over predictors.  The reducer then collapses the
predictor axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

Tensor = torch.Tensor

NORMALIZATIONS = ("", "A", "B", "AB", "BA")
REDUCERS = ("median", "kth_highest", "mean", "plain_median")


@dataclass(frozen=True)
class AggregationMode:
    kind: str = "median"
    normalization: str = "AB"
    k: int = 3
    clamp_k: bool = False

    def __post_init__(self):
        if self.kind not in REDUCERS:
            raise ValueError(f"unknown reducer {self.kind!r}; expected one of {REDUCERS}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}")
        if self.kind == "kth_highest" and self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")

    @property
    def label(self) -> str:
        norm = self.normalization or "_"
        red = f"top{self.k}" if self.kind == "kth_highest" else self.kind
        return f"{norm}+{red}"


CROSSMAX = AggregationMode("median", "AB")
CROSSMAX_SELF = AggregationMode("kth_highest", "AB", k=3)
MEAN = AggregationMode("mean", "")
PLAIN_MEDIAN = AggregationMode("plain_median", "")


def _check_block(z: Tensor) -> None:
    if z.ndim != 3:
        raise ValueError(f"logit block must be [B,N,C], got shape {tuple(z.shape)}")
    if z.shape[1] < 1 or z.shape[2] < 2:
        raise ValueError(f"need N >= 1 predictors and C >= 2 classes, got {tuple(z.shape)}")


def normalize(z: Tensor, steps: str) -> Tensor:
    for step in steps:
        if step == "A":
            z = z - z.max(dim=2, keepdim=True).values
        elif step == "B":
            z = z - z.max(dim=1, keepdim=True).values
        else:
            raise ValueError(f"unknown normalization step {step!r}")
    return z


def median(z: Tensor, dim: int) -> Tensor:
    """Median with the even-count convention of averaging the two central values."""
    n = z.shape[dim]
    s = z.sort(dim=dim).values
    if n % 2:
        return s.select(dim, n // 2)
    return (s.select(dim, n // 2 - 1) + s.select(dim, n // 2)) / 2


def kth_highest(z: Tensor, k: int, dim: int) -> Tensor:
    return z.sort(dim=dim, descending=True).values.select(dim, k - 1)


def crossmax(block: Tensor, mode: AggregationMode = CROSSMAX) -> Tensor:
    """Aggregate a ``[B,N,C]`` logit block to ``[B,C]``."""
    _check_block(block)
    n = block.shape[1]
    z = normalize(block, mode.normalization)
    if mode.kind in ("median", "plain_median"):
        return median(z, dim=1)
    if mode.kind == "mean":
        return z.mean(dim=1)
    k = mode.k
    if k > n:
        if not mode.clamp_k:
            raise ValueError(f"k={k} exceeds the number of predictors N={n}")
        k = n
    return kth_highest(z, k, dim=1)


def baseline_aggregate(block: Tensor, kind: str = "mean") -> Tensor:
    """Unnormalized mean or median over predictors."""
    if kind not in ("mean", "plain_median", "median"):
        raise ValueError(f"unknown baseline {kind!r}")
    return crossmax(block, MEAN if kind == "mean" else PLAIN_MEDIAN)


def predict(aggregated: Tensor) -> Tensor:
    """Argmax over classes; ties go to the lowest class index."""
    return aggregated.argmax(dim=-1)
