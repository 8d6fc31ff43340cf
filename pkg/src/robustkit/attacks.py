"""White-box L-inf attacks and multi-resolution perturbation optimisation.

A *predictor* is any callable ``f(x, draw, sample_ids) -> logits`` on raw
images in [0,1].  Predictors with ``stochastic = True`` are attacked with
gradients averaged over several augmentation draws (EOT).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .gradcore import resize_bilinear, softmax_cross_entropy
from .multires import MultiResConfig, make_draws, stochastic_augment

Tensor = torch.Tensor
Predictor = Callable[..., Tensor]

ATTACK_LABEL = "apgd-lite"


@dataclass(frozen=True)
class AttackSpec:
    epsilon: float = 8 / 255
    steps: int = 20
    step_size: float | None = None  # None -> 2.5 * epsilon / steps
    restarts: int = 1
    eot_samples: int = 8
    targeted: int | None = None
    momentum: float = 0.75
    halving_schedule: bool = True
    random_start: bool = True
    targeted_restarts: int = 3  # extra runs toward the top non-true classes (APGD-T stand-in)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0,1], got {self.epsilon}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.eot_samples < 1:
            raise ValueError("eot_samples must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0,1)")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else 2.5 * self.epsilon / self.steps


def _draw_index(seed: int, restart: int, step: int, sample: int) -> int:
    # disjoint from training epochs and the evaluation draw
    return 2_000_000 + ((seed * 131 + restart) * 4099 + step) * 64 + sample


def _per_sample_ce(logits: Tensor, y: Tensor) -> Tensor:
    # float64 keeps the softmax tail nonzero for confident predictors; in
    # float32 margins past ~100 give exactly zero gradient and a stalled attack
    return F.cross_entropy(logits.double(), y, reduction="none")


def fgsm(model_fn: Callable[[Tensor], Tensor], x: Tensor, y: Tensor, epsilon: float, loss_fn=None) -> Tensor:
    """One signed-gradient step that increases the loss, clamped to [0,1]."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if epsilon == 0:
        return x.detach().clone()
    xr = x.detach().clone().requires_grad_(True)
    logits = model_fn(xr)
    loss = loss_fn(logits) if loss_fn is not None else softmax_cross_entropy(logits, y)
    (g,) = torch.autograd.grad(loss, xr)
    return (x.detach() + epsilon * g.sign()).clamp(0.0, 1.0)


def _loss_and_grad(predictor: Predictor, x: Tensor, y: Tensor, target, draws: Sequence[int | None]):
    """Per-sample attack objective (to maximise) averaged over draws, and its gradient."""
    xr = x.detach().requires_grad_(True)
    total = torch.zeros(x.shape[0], dtype=torch.float64)
    for d in draws:
        logits = predictor(xr, d, None)
        if target is None:
            total = total + _per_sample_ce(logits, y)
        else:
            total = total - _per_sample_ce(logits, target)
    total = total / len(draws)
    (g,) = torch.autograd.grad(total.sum(), xr)
    return total.detach(), g


def _project(x_adv: Tensor, x: Tensor, eps: float) -> Tensor:
    return torch.min(torch.max(x_adv, x - eps), x + eps).clamp(0.0, 1.0)


@dataclass
class AttackResult:
    images: Tensor
    success: Tensor
    loss: Tensor  # objective at the returned iterate
    loss_history: list[list[float]] = field(default_factory=list)


def _run_pgd(predictor: Predictor, x: Tensor, y: Tensor, spec: AttackSpec, target, restart: int, gen: torch.Generator):
    eps = spec.epsilon
    stochastic = getattr(predictor, "stochastic", False)
    n_draws = spec.eot_samples if stochastic else 1
    if spec.random_start and eps > 0:
        noise = (torch.rand(x.shape, generator=gen, dtype=torch.float64) * 2 - 1).to(x.dtype)
        x_adv = _project(x + eps * noise, x, eps)
    else:
        x_adv = x.clone()
    b = x.shape[0]
    alpha = torch.full((b, 1, 1, 1), spec.alpha, dtype=x.dtype)
    patience = max(1, spec.steps // 10)
    best_loss = torch.full((b,), -math.inf, dtype=torch.float64)
    best_x = x_adv.clone()
    since_improve = torch.zeros(b, dtype=torch.long)
    g_acc = torch.zeros_like(x)
    history = []
    for step in range(spec.steps + 1):
        draws = [_draw_index(spec.seed, restart, step, i) for i in range(n_draws)] if stochastic else [0]
        loss, g = _loss_and_grad(predictor, x_adv, y, target, draws)
        history.append(float(loss.mean()))
        improved = loss > best_loss
        best_loss = torch.where(improved, loss, best_loss)
        best_x[improved] = x_adv[improved]
        since_improve = torch.where(improved, torch.zeros_like(since_improve), since_improve + 1)
        if step == spec.steps:
            break
        if spec.halving_schedule:
            stall = since_improve >= patience
            alpha = torch.where(stall.view(-1, 1, 1, 1), alpha / 2, alpha)
            since_improve = torch.where(stall, torch.zeros_like(since_improve), since_improve)
        g_acc = spec.momentum * g_acc + (1 - spec.momentum) * g
        x_adv = _project(x_adv + alpha * g_acc.sign(), x, eps)
    return best_x, best_loss, history


def _success(predictor: Predictor, x_adv: Tensor, y: Tensor, target, eval_draw) -> Tensor:
    with torch.no_grad():
        pred = predictor(x_adv, eval_draw, None).argmax(-1)
    return pred != y if target is None else pred == target


def pgd_linf(
    predictor: Predictor,
    x: Tensor,
    y: Tensor,
    spec: AttackSpec,
    eval_draw: int | None = None,
) -> AttackResult:
    """Projected sign-gradient attack in the L-inf ball around ``x``.

    Per step: EOT-averaged gradient, momentum blend, sign step, projection.
    With ``halving_schedule`` a sample's step size halves after ``steps/10``
    steps without improvement.  The best-objective iterate over all steps
    and restarts is returned.  ``spec.targeted_restarts`` adds runs toward
    the highest-scoring wrong classes for samples still unbroken.
    """
    from .model import EVAL_DRAW

    eval_draw = EVAL_DRAW if eval_draw is None else eval_draw
    x = x.detach()
    gen = torch.Generator().manual_seed(spec.seed)
    target = None
    if spec.targeted is not None:
        target = torch.full_like(y, spec.targeted)

    best_x, best_loss, hist_all = x.clone(), torch.full((x.shape[0],), -math.inf, dtype=torch.float64), []
    for r in range(max(1, spec.restarts)):
        bx, bl, hist = _run_pgd(predictor, x, y, spec, target, r, gen)
        better = bl > best_loss
        best_x[better], best_loss[better] = bx[better], bl[better]
        hist_all.append(hist)
    success = _success(predictor, best_x, y, target, eval_draw)

    if spec.targeted is None and spec.targeted_restarts > 0:
        with torch.no_grad():
            clean_logits = predictor(x, eval_draw, None).clone()
        clean_logits[torch.arange(len(y)), y] = -math.inf
        ranked = clean_logits.argsort(dim=1, descending=True)
        for j in range(min(spec.targeted_restarts, ranked.shape[1] - 1)):
            todo = ~success
            if not todo.any():
                break
            t = ranked[:, j]
            bx, _, hist = _run_pgd(
                BoundIds(predictor, todo.nonzero().squeeze(1).tolist()), x[todo], y[todo], spec, t[todo], 100 + j, gen
            )
            hist_all.append(hist)
            hit = _success(BoundIds(predictor, todo.nonzero().squeeze(1).tolist()), bx, y[todo], None, eval_draw)
            idx = todo.nonzero().squeeze(1)[hit]
            best_x[idx] = bx[hit]
            success[idx] = True
    return AttackResult(best_x, success, best_loss, hist_all)


class BoundIds:
    """Predictor whose per-sample draw streams use fixed ``ids`` instead of batch positions."""

    def __init__(self, predictor: Predictor, ids: Sequence[int]):
        self.predictor = predictor
        if isinstance(predictor, BoundIds):
            self.predictor = predictor.predictor
            ids = [predictor.ids[i] for i in ids]
        self.ids = list(ids)
        self.stochastic = getattr(predictor, "stochastic", False)

    def __call__(self, x, draw=0, sample_ids=None):
        return self.predictor(x, draw, self.ids if sample_ids is None else sample_ids)


# ---------------------------------------------------------------------------
# layer attacks


def layer_attack(ensemble, alpha: int, x: Tensor, y: Tensor, spec: AttackSpec) -> Tensor:
    """PGD against the cross-entropy of the probe at tap ``alpha``."""
    return pgd_linf(ensemble.probe_predictor(alpha), x, y, spec).images


@dataclass
class TransferMatrix:
    clean: list[float]  # accuracy of each probe on clean inputs
    matrix: list[list[float]]  # matrix[a][b]: probe b accuracy on inputs attacked against probe a

    def diagonal_min_fraction(self) -> float:
        rows = [i for i, row in enumerate(self.matrix) if row[i] <= min(row)]
        return len(rows) / len(self.matrix)


def transfer_matrix(ensemble, x: Tensor, y: Tensor, spec: AttackSpec) -> TransferMatrix:
    from .model import probe_accuracies

    clean = probe_accuracies(ensemble, x, y)
    rows = []
    for a in range(len(ensemble.probes)):
        xa = layer_attack(ensemble, a, x, y, spec)
        rows.append(probe_accuracies(ensemble, xa, y))
    return TransferMatrix(clean, rows)


# ---------------------------------------------------------------------------
# multi-resolution parameterised attacks


@dataclass(frozen=True)
class MultiResAttackSpec:
    resolutions: tuple[int, ...] | None = None  # None -> every r in 1..R
    steps: int = 50
    lr: float = 5e-3
    cosine: bool = True
    plain_gradient: bool = True
    jitter: int = 5
    noise_sigma: float = 0.6
    seed: int = 0

    @staticmethod
    def generation() -> "MultiResAttackSpec":
        return MultiResAttackSpec(steps=400, lr=1.0, cosine=False, plain_gradient=True)


@dataclass
class MultiResAttackResult:
    image: Tensor
    perturbations: dict[int, Tensor]
    losses: list[float]

    def composed(self, size: int) -> Tensor:
        return compose_perturbation(self.perturbations, size)


def compose_perturbation(perturbations: dict[int, Tensor], size: int) -> Tensor:
    """Sum over resolutions of each perturbation resized to ``size``."""
    total = None
    for r, p in perturbations.items():
        up = resize_bilinear(p, size, size)
        total = up if total is None else total + up
    return total


def multires_attack(
    model_fns: Predictor | Sequence[Predictor],
    start_image: Tensor,
    target: int | Sequence[int] | Tensor,
    spec: MultiResAttackSpec = MultiResAttackSpec(),
) -> MultiResAttackResult:
    """Optimise ``start + sum_r rescale_R(P_r)`` toward ``target``.

    All ``P_r`` start at zero and are updated jointly by gradient descent on
    the target cross-entropy summed over models, with fresh jitter and
    pixel noise at every step.  Accepts [3,R,R] or [B,3,R,R] starts.
    """
    if callable(model_fns):
        model_fns = [model_fns]
    single = start_image.ndim == 3
    x0 = (start_image.unsqueeze(0) if single else start_image).detach()
    b, _, size, _ = x0.shape
    t = torch.as_tensor(target, dtype=torch.long).reshape(-1).expand(b).clone()
    resolutions = spec.resolutions or tuple(range(1, size + 1))
    ps = {r: torch.zeros(b, 3, r, r, dtype=x0.dtype, requires_grad=True) for r in resolutions}
    aug = MultiResConfig(
        resolutions=(size,), jitter_amplitude=spec.jitter, noise_sigma=spec.noise_sigma,
        contrast_range=(1.0, 1.0), grayscale_shift_max=0.0, seed=spec.seed,
    )
    m1 = {r: torch.zeros_like(p) for r, p in ps.items()}
    m2 = {r: torch.zeros_like(p) for r, p in ps.items()}
    losses = []
    for step in range(spec.steps):
        lr = spec.lr * (0.5 * (1 + math.cos(math.pi * step / spec.steps)) if spec.cosine else 1.0)
        img = (x0 + compose_perturbation(ps, size)).clamp(0, 1)
        if spec.jitter > 0 or spec.noise_sigma > 0:
            img = stochastic_augment(img, make_draws(aug, range(b), 5_000_000 + step))
        loss = sum(softmax_cross_entropy(f(img, 5_000_000 + step, None), t) for f in model_fns)
        grads = torch.autograd.grad(loss, list(ps.values()))
        losses.append(float(loss.detach()))
        with torch.no_grad():
            for (r, p), g in zip(ps.items(), grads):
                if spec.plain_gradient:
                    p.sub_(lr * g * b)  # undo the batch mean so per-image steps match B=1
                else:
                    k = step + 1
                    m1[r].mul_(0.9).add_(g, alpha=0.1)
                    m2[r].mul_(0.999).addcmul_(g, g, value=0.001)
                    p.sub_(lr * (m1[r] / (1 - 0.9**k)) / ((m2[r] / (1 - 0.999**k)).sqrt() + 1e-8))
    with torch.no_grad():
        final = {r: p.detach() for r, p in ps.items()}
        image = (x0 + compose_perturbation(final, size)).clamp(0, 1)
    if single:
        image = image.squeeze(0)
        final = {r: p.squeeze(0) for r, p in final.items()}
    return MultiResAttackResult(image, final, losses)


# ---------------------------------------------------------------------------
# export


def _to_png_array(img: Tensor) -> np.ndarray:
    arr = img.detach().clamp(0, 1).permute(1, 2, 0).double().numpy()
    return np.round(arr * 255).astype(np.uint8)


def export_images(out_dir: str | Path, name: str, images: dict[str, Tensor], metadata: dict) -> list[Path]:
    """Write PNGs plus exact ``.npy`` arrays and a JSON sidecar.

    Perturbations (signed) are written as PNGs rescaled to [0,1] for viewing;
    the ``.npy`` files keep the exact float values.
    """
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    scales = {}
    for key, t in images.items():
        t = t.detach()
        np.save(out / f"{name}_{key}.npy", t.numpy())
        view = t
        if t.min() < 0 or t.max() > 1:
            lo, hi = float(t.min()), float(t.max())
            view = (t - lo) / max(hi - lo, 1e-12)
            scales[key] = [lo, hi]
        path = out / f"{name}_{key}.png"
        Image.fromarray(_to_png_array(view)).save(path)
        written.append(path)
    side = dict(metadata, display_ranges=scales, files=[p.name for p in written])
    (out / f"{name}.json").write_text(json.dumps(side, indent=2, sort_keys=True, default=_jsonable))
    return written


def _jsonable(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, Tensor):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")
