"""Channel-wise multi-resolution stacks with seeded stochastic augmentation.

An RGB image is resized down to each resolution in ``resolutions`` and back
up to full size; the copies are concatenated along the channel axis.  Each
3-channel group is then jittered, noised, contrast-scaled and partially
desaturated with draws that are a pure function of
``(seed, sample_index, draw_index)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

from .gradcore import ShapeError, resize_bilinear

Tensor = torch.Tensor


@dataclass(frozen=True)
class MultiResConfig:
    resolutions: tuple[int, ...] = (32, 16, 8, 4)
    jitter_amplitude: int = 3
    noise_sigma: float = 0.2
    eval_noise_sigma: float = 0.1
    contrast_range: tuple[float, float] = (0.9, 1.1)
    grayscale_shift_max: float = 0.2
    noise_before_upsample: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.resolutions:
            raise ValueError("need at least one resolution")
        if any(r < 1 for r in self.resolutions):
            raise ValueError(f"resolutions must be >= 1, got {self.resolutions}")
        if self.jitter_amplitude < 0 or self.noise_sigma < 0 or self.eval_noise_sigma < 0:
            raise ValueError("jitter amplitude and noise sigma must be non-negative")
        lo, hi = self.contrast_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad contrast range {self.contrast_range}")
        if not 0 <= self.grayscale_shift_max <= 1:
            raise ValueError("grayscale_shift_max must lie in [0,1]")

    @property
    def groups(self) -> int:
        return len(self.resolutions)

    @property
    def channels(self) -> int:
        return 3 * len(self.resolutions)

    def for_eval(self) -> "MultiResConfig":
        return replace(self, noise_sigma=self.eval_noise_sigma)


@dataclass(frozen=True)
class AugmentationDraw:
    offsets: np.ndarray  # [G,2] int (dx, dy)
    noise_seed: int
    contrast: float
    gray_mix: float
    noise_sigma: float

    @staticmethod
    def identity(groups: int) -> "AugmentationDraw":
        return AugmentationDraw(np.zeros((groups, 2), np.int64), 0, 1.0, 0.0, 0.0)


def make_draw(config: MultiResConfig, sample_index: int, draw_index: int) -> AugmentationDraw:
    rng = np.random.default_rng([config.seed, sample_index, draw_index])
    a = config.jitter_amplitude
    offsets = rng.integers(-a, a + 1, size=(config.groups, 2))
    noise_seed = int(rng.integers(0, 2**63 - 1))
    contrast = float(rng.uniform(*config.contrast_range))
    gray = float(rng.uniform(0.0, config.grayscale_shift_max))
    return AugmentationDraw(offsets, noise_seed, contrast, gray, config.noise_sigma)


def make_draws(config: MultiResConfig, sample_ids: Sequence[int], draw_index: int) -> list[AugmentationDraw]:
    return [make_draw(config, int(i), draw_index) for i in sample_ids]


def decompose(image: Tensor, config: MultiResConfig) -> Tensor:
    """[3,R,R] or [B,3,R,R] -> [3|rho|,R,R] or [B,3|rho|,R,R], groups ordered as ``resolutions``."""
    batched = image.ndim == 4
    x = image if batched else image.unsqueeze(0)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected RGB image(s), got {tuple(image.shape)}")
    h, w = x.shape[-2:]
    if h != w:
        raise ShapeError(f"square images required, got {h}x{w}")
    parts = []
    for r in config.resolutions:
        if r > h:
            raise ValueError(f"resolution {r} exceeds native resolution {h}")
        parts.append(resize_bilinear(resize_bilinear(x, r, r), h, h))
    out = torch.cat(parts, dim=1)
    return out if batched else out.squeeze(0)


def translate(x: Tensor, offsets: Tensor) -> Tensor:
    """Shift each [3,R,R] group of each sample by integer (dx, dy), zero fill.

    ``x`` is [B,3G,R,R]; ``offsets`` is [B,G,2].  Differentiable in ``x``.
    """
    b, c, h, w = x.shape
    g = c // 3
    a = int(offsets.abs().max()) if offsets.numel() else 0
    if a == 0:
        return x
    xp = torch.nn.functional.pad(x, (a, a, a, a))
    dx = offsets[..., 0].repeat_interleave(3, dim=1)  # [B,C]
    dy = offsets[..., 1].repeat_interleave(3, dim=1)
    rows = (torch.arange(h).view(1, 1, h) + a - dy.unsqueeze(-1))  # [B,C,H]
    cols = (torch.arange(w).view(1, 1, w) + a - dx.unsqueeze(-1))  # [B,C,W]
    bi = torch.arange(b).view(b, 1, 1, 1)
    ci = torch.arange(c).view(1, c, 1, 1)
    return xp[bi, ci, rows.unsqueeze(-1), cols.unsqueeze(-2)]


def _noise(draws: Sequence[AugmentationDraw], shape, dtype) -> Tensor:
    out = torch.empty((len(draws), *shape), dtype=dtype)
    gen = torch.Generator()
    for i, d in enumerate(draws):
        gen.manual_seed(d.noise_seed % (2**63))
        out[i] = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype) * d.noise_sigma
    return out


def stochastic_augment(stack: Tensor, draws: AugmentationDraw | Sequence[AugmentationDraw]) -> Tensor:
    """Jitter, noise, contrast and grayscale shift per group, then clamp to [0,1].

    Accepts a single [3G,R,R] stack with one draw, or a [B,3G,R,R] batch
    with one draw per sample.
    """
    single = stack.ndim == 3
    if single:
        stack = stack.unsqueeze(0)
        draws = [draws]
    b, c, h, w = stack.shape
    if len(draws) != b:
        raise ValueError(f"{len(draws)} draws for a batch of {b}")
    g = c // 3
    offsets = torch.as_tensor(np.stack([d.offsets for d in draws]), dtype=torch.long).view(b, g, 2)
    x = translate(stack, offsets)
    if any(d.noise_sigma > 0 for d in draws):
        x = x + _noise(draws, (c, h, w), x.dtype)
    contrast = torch.tensor([d.contrast for d in draws], dtype=x.dtype).view(b, 1, 1, 1)
    x = 0.5 + contrast * (x - 0.5)
    gray = torch.tensor([d.gray_mix for d in draws], dtype=x.dtype).view(b, 1, 1, 1, 1)
    xg = x.view(b, g, 3, h, w)
    xg = (1 - gray) * xg + gray * xg.mean(dim=2, keepdim=True)
    out = xg.reshape(b, c, h, w).clamp(0.0, 1.0)
    return out.squeeze(0) if single else out


def noisy_decompose(image: Tensor, config: MultiResConfig, draws: Sequence[AugmentationDraw]) -> Tensor:
    """Decompose with extra noise injected at each low resolution before upsampling."""
    h = image.shape[-1]
    parts = []
    for gi, r in enumerate(config.resolutions):
        low = resize_bilinear(image, r, r)
        noise = torch.stack([
            torch.randn(low.shape[1:], generator=torch.Generator().manual_seed((d.noise_seed + 1 + gi) % (2**63)),
                        dtype=torch.float64).to(low.dtype) * d.noise_sigma
            for d in draws
        ])
        parts.append(resize_bilinear(low + noise, h, h))
    return torch.cat(parts, dim=1)


def multires_input(
    images: Tensor,
    config: MultiResConfig,
    draw_index: int | None,
    sample_ids: Sequence[int] | None = None,
) -> Tensor:
    """Full preprocessing: decompose then augment; ``draw_index=None`` skips augmentation."""
    if draw_index is None:
        return decompose(images, config)
    if sample_ids is None:
        sample_ids = range(images.shape[0])
    draws = make_draws(config, sample_ids, draw_index)
    if config.noise_before_upsample:
        stack = noisy_decompose(images, config, draws)
    else:
        stack = decompose(images, config)
    return stochastic_augment(stack, draws)
