"""Differentiable building blocks shared by every other module.

Tensors are plain ``torch.Tensor`` objects; autograd provides the gradient
slot.  The functions here add shape validation and the explicit error
behaviour the rest of the toolkit relies on.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class ShapeError(ValueError):
    """Raised when tensor dimensions do not line up."""


class NumericError(ArithmeticError):
    """Raised when a NaN or Inf shows up where finite values are required."""


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(t).all():
        bad = int((~torch.isfinite(t)).sum())
        raise NumericError(f"{what} contains {bad} non-finite value(s)")
    return t


def conv2d(
    input: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    zero_padding: int = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    Output spatial size is ``floor((H + 2*padding - k) / stride) + 1``.
    """
    if input.ndim != 4:
        raise ShapeError(f"conv2d input must be [B,Cin,H,W], got shape {tuple(input.shape)}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [Cout,Cin,k,k], got shape {tuple(kernel.shape)}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if zero_padding < 0:
        raise ShapeError(f"padding must be >= 0, got {zero_padding}")
    _, cin, h, w = input.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"input channels Cin={cin} do not match kernel Cin={kcin}")
    if kh > h + 2 * zero_padding or kw > w + 2 * zero_padding:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * zero_padding}x{w + 2 * zero_padding}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {tuple(bias.shape)} does not match Cout={cout}")
    return F.conv2d(input, kernel, bias, stride=stride, padding=zero_padding)


def conv_output_size(h: int, k: int, stride: int, padding: int) -> int:
    return (h + 2 * padding - k) // stride + 1


@functools.lru_cache(maxsize=512)
def _resample_weights(n_in: int, n_out: int, dtype: torch.dtype = torch.float64) -> Tensor:
    """[n_out, n_in] matrix of the 1-D half-pixel bilinear resampler."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    centres = (np.arange(n_out) + 0.5) * scale  # in input pixel units
    if scale <= 1.0:
        src = np.clip(centres - 0.5, 0.0, n_in - 1)
        j0 = np.floor(src).astype(int)
        j1 = np.minimum(j0 + 1, n_in - 1)
        frac = src - j0
        np.add.at(w, (np.arange(n_out), j0), 1.0 - frac)
        np.add.at(w, (np.arange(n_out), j1), frac)
    else:
        # shrinking: triangle filter stretched by the scale factor
        dist = np.abs(np.arange(n_in)[None, :] + 0.5 - centres[:, None]) / scale
        w = np.maximum(0.0, 1.0 - dist)
        w /= w.sum(axis=1, keepdims=True)
    return torch.from_numpy(w).to(dtype)


def resize_bilinear(input: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centres.

    Downsampling widens the triangle filter by the scale factor so every
    input pixel contributes (antialiasing); upsampling is ordinary bilinear.
    The map is linear, so constant images stay constant.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be >= 1, got {out_h}x{out_w}")
    squeeze = input.ndim == 3
    if squeeze:
        input = input.unsqueeze(0)
    if input.ndim != 4:
        raise ShapeError(f"resize input must be [B,C,H,W] or [C,H,W], got {tuple(input.shape)}")
    h, w = input.shape[-2:]
    if (h, w) == (out_h, out_w):
        out = input
    else:
        out = input
        if h != out_h:
            out = torch.matmul(_resample_weights(h, out_h, input.dtype), out)
        if w != out_w:
            out = torch.matmul(out, _resample_weights(w, out_w, input.dtype).T)
    return out.squeeze(0) if squeeze else out


def resize_adjoint(grad_out: Tensor, in_h: int, in_w: int) -> Tensor:
    """Adjoint (transpose) of :func:`resize_bilinear` from ``in_h x in_w``."""
    shape = (*grad_out.shape[:-2], in_h, in_w)
    probe = torch.zeros(shape, dtype=grad_out.dtype, requires_grad=True)
    out = resize_bilinear(probe, grad_out.shape[-2], grad_out.shape[-1])
    (g,) = torch.autograd.grad(out, probe, grad_out)
    return g


def softmax_cross_entropy(logits: Tensor, labels: Tensor | Sequence[int]) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B,C], got {tuple(logits.shape)}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels length {labels.numel()} does not match batch {logits.shape[0]}")
    c = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c}): min={int(labels.min())} max={int(labels.max())}")
    return F.cross_entropy(logits, labels)


def input_gradient(
    model_forward: Callable[[Tensor], Tensor],
    input: Tensor,
    loss_target: Callable[[Tensor], Tensor] | Tensor | Sequence[int] | None = None,
) -> Tensor:
    """Gradient of a scalar loss with respect to ``input``.

    ``loss_target`` may be a callable mapping the forward output to a scalar,
    a label sequence (cross-entropy is used), or ``None`` when the forward
    output is already scalar.  Parameter ``.grad`` fields are left alone.
    """
    x = input.detach().clone().requires_grad_(True)
    out = model_forward(x)
    if loss_target is None:
        loss = out
    elif callable(loss_target):
        loss = loss_target(out)
    else:
        loss = softmax_cross_entropy(out, loss_target)
    if loss.ndim != 0:
        raise ShapeError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        raise RuntimeError(
            "loss is not connected to the input through differentiable operations "
            "(the graph was cut by a detached or integer-valued node)"
        )
    (g,) = torch.autograd.grad(loss, x, allow_unused=True)
    if g is None:
        raise RuntimeError("input does not reach the loss through a differentiable path")
    return g


@dataclass
class OptimizerState:
    learning_rate: float
    mode: str = "adaptive"  # "adaptive" | "plain"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list[Tensor] = field(default_factory=list)
    second_moment: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.mode not in ("adaptive", "plain"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")


def optimizer_step(
    params: Sequence[Tensor], grads: Sequence[Tensor | None], state: OptimizerState
) -> OptimizerState:
    """Update ``params`` in place.

    Adaptive mode is Adam with bias correction; plain mode is
    ``param -= lr * grad``.  A non-finite gradient raises before anything
    is modified.
    """
    params = list(params)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"param {i} shape {tuple(p.shape)} != grad shape {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            raise NumericError(f"gradient {i} contains non-finite values")

    lr = state.learning_rate
    with torch.no_grad():
        if state.mode == "plain":
            for p, g in zip(params, grads):
                p.sub_(lr * g)
        else:
            if not state.first_moment:
                state.first_moment = [torch.zeros_like(p) for p in params]
                state.second_moment = [torch.zeros_like(p) for p in params]
            elif len(state.first_moment) != len(params):
                raise ShapeError("optimizer state was built for a different parameter list")
            t = state.step_count + 1
            b1, b2 = state.beta1, state.beta2
            c1 = 1.0 - b1**t
            c2 = math.sqrt(1.0 - b2**t)
            for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
                m.mul_(b1).add_(g, alpha=1.0 - b1)
                v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
                denom = (v.sqrt() / c2).add_(state.eps)
                p.addcdiv_(m, denom, value=-lr / c1)
    state.step_count += 1
    return state
