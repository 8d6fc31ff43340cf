"""Robustness curves, ensemble comparisons, ablations, spectra and generation."""

from __future__ import annotations

import copy
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from itertools import product
from typing import Callable, Sequence

import numpy as np
import torch

from .. import crossmax as cm
from ..attacks import AttackSpec, BoundIds, MultiResAttackSpec, multires_attack, pgd_linf
from ..dataio import Dataset
from ..model import (
    EVAL_DRAW,
    Classifier,
    Ensemble,
    TrainSchedule,
    make_classifier,
    parameter_hash,
    predict_logits,
    train_backbone,
)
from ..multires import MultiResConfig
from .reports import Table, config_hash, robustness_report
from .spectrum import radial_power_spectrum

log = logging.getLogger(__name__)
Tensor = torch.Tensor
MID_GRAY = 0.5


def pmap(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Ordered map over independent work units, optionally on a thread pool.

    Each unit runs its own single-threaded kernels, so results do not depend
    on ``workers``.  Callers must not touch the global torch RNG inside ``fn``.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def attack_images(predictor, x: Tensor, y: Tensor, spec: AttackSpec, batch_size: int = 128) -> Tensor:
    """Run :func:`pgd_linf` chunk by chunk with dataset-wide sample ids."""
    out = []
    for s in range(0, x.shape[0], batch_size):
        ids = list(range(s, min(s + batch_size, x.shape[0])))
        out.append(pgd_linf(BoundIds(predictor, ids), x[s:s + batch_size], y[s:s + batch_size], spec).images)
    return torch.cat(out)


def robust_correct(predictor, x: Tensor, y: Tensor, epsilon: float, spec: AttackSpec, batch_size: int = 128) -> Tensor:
    """Per-sample mask: clean-correct and still correct after the attack."""
    clean = cm.predict(predict_logits(predictor, x)) == y
    if epsilon == 0:
        return clean
    xa = attack_images(predictor, x, y, replace(spec, epsilon=epsilon), batch_size)
    return clean & (cm.predict(predict_logits(predictor, xa)) == y)


def _model_hashes(predictor) -> list[str]:
    members = getattr(predictor, "members", [predictor])
    out = []
    for m in members:
        if isinstance(m, torch.nn.Module):
            out.append(parameter_hash(m)[:16])
    return out


def eval_robust_curve(
    predictor,
    x: Tensor,
    y: Tensor,
    epsilons: Sequence[float],
    spec: AttackSpec = AttackSpec(),
    label: str = "model",
    seed: int | None = None,
    workers: int = 1,
) -> Table:
    if list(epsilons) != sorted(epsilons):
        raise ValueError("epsilons must be sorted ascending")
    t0 = time.perf_counter()
    accs = pmap(lambda e: float(robust_correct(predictor, x, y, e, spec).double().mean()), epsilons, workers)
    meta = {
        "attack": "apgd-lite",
        "attack_spec": asdict(spec),
        "model_hashes": _model_hashes(predictor),
        "seed": spec.seed if seed is None else seed,
        "wall_clock_s": time.perf_counter() - t0,
    }
    meta["config_hash"] = config_hash({k: v for k, v in meta.items() if k != "wall_clock_s"})
    return robustness_report(label, epsilons, accs, x.shape[0], meta)


def train_classifier(
    dataset: Dataset,
    multires: MultiResConfig | None,
    schedule: TrainSchedule,
    widths: Sequence[int] = (16, 32, 64),
    blocks_per_stage: int = 2,
    seed: int = 0,
) -> tuple[Classifier, list[float]]:
    clf = make_classifier(dataset.class_count, multires, widths, blocks_per_stage, seed)
    return train_backbone(dataset, clf, replace(schedule, seed=seed))


def finetune_classifier(
    classifier: Classifier, dataset: Dataset, schedule: TrainSchedule
) -> tuple[Classifier, list[float]]:
    """Continue training a copy of ``classifier``; the original is untouched."""
    return train_backbone(dataset, copy.deepcopy(classifier), schedule)


def compare_aggregations(
    members: Sequence[Callable],
    x: Tensor,
    y: Tensor,
    modes: Sequence[cm.AggregationMode],
    epsilons: Sequence[float],
    spec: AttackSpec,
    include_individuals: bool = True,
    workers: int = 1,
) -> Table:
    """Robust accuracy of each aggregation mode, attacked through the aggregate.

    Individual members are evaluated too; their mean is reported as
    ``individual_mean``.
    """
    t = Table("ensemble", ["predictor", "epsilon", "epsilon_255", "accuracy", "n"])
    t0 = time.perf_counter()
    ens = Ensemble(members)
    units = list(product(modes, epsilons))
    accs = pmap(lambda u: float(robust_correct(ens.with_mode(u[0]), x, y, u[1], spec).double().mean()), units, workers)
    for (mode, e), acc in zip(units, accs):
        t.add(mode.label, float(e), round(e * 255, 6), acc, x.shape[0])
        log.info("%s eps=%.1f/255 acc=%.4f", mode.label, e * 255, acc)
    if include_individuals:
        units = list(product(range(len(members)), epsilons))
        flat = pmap(lambda u: float(robust_correct(members[u[0]], x, y, u[1], spec).double().mean()), units, workers)
        per = np.array(flat).reshape(len(members), len(epsilons))
        for (i, e), acc in zip(units, flat):
            t.add(f"member{i}", float(e), round(e * 255, 6), acc, x.shape[0])
        for j, e in enumerate(epsilons):
            t.add("individual_mean", float(e), round(e * 255, 6), float(per[:, j].mean()), x.shape[0])
    t.meta.update(
        attack="apgd-lite",
        attack_spec=asdict(spec),
        model_hashes=_model_hashes(ens),
        wall_clock_s=time.perf_counter() - t0,
    )
    return t


def train_ensemble(
    n_models: int,
    dataset: Dataset,
    multires: MultiResConfig | None,
    schedule: TrainSchedule,
    widths: Sequence[int] = (16, 32, 64),
    seed: int = 0,
    workers: int = 1,
    blocks_per_stage: int = 2,
) -> list[Classifier]:
    if n_models < 2:
        raise ValueError("an ensemble needs at least 2 models")
    seeds = [(seed * 1000 + i) % 2**63 for i in range(n_models)]
    # initialisation touches the global RNG, so it stays serial
    clfs = [make_classifier(dataset.class_count, multires, widths, blocks_per_stage, s) for s in seeds]
    done = pmap(lambda i: train_backbone(dataset, clfs[i], replace(schedule, seed=seeds[i])), range(n_models), workers)
    for i, (_, trace) in enumerate(done):
        log.info("model %d final loss %.4f", i, trace[-1] if trace else float("nan"))
    return [clf for clf, _ in done]


def ensemble_experiment(
    n_models: int,
    dataset: Dataset,
    test: Dataset,
    modes: Sequence[cm.AggregationMode],
    epsilons: Sequence[float],
    spec: AttackSpec,
    schedule: TrainSchedule,
    multires: MultiResConfig | None = None,
    widths: Sequence[int] = (16, 32, 64),
    seed: int = 0,
    workers: int = 1,
) -> Table:
    """Train ``n_models`` independently seeded classifiers and compare aggregators."""
    members = train_ensemble(n_models, dataset, multires, schedule, widths, seed, workers)
    t = compare_aggregations(members, test.images, test.labels, modes, epsilons, spec, workers=workers)
    t.meta["seed"] = seed
    t.meta["config_hash"] = config_hash(
        {"n_models": n_models, "schedule": asdict(schedule), "multires": multires and asdict(multires),
         "widths": list(widths), "modes": [m.label for m in modes], "epsilons": list(epsilons),
         "spec": asdict(spec), "seed": seed}
    )
    return t


def ablation_variants(reducers: Sequence[str] = ("median",), k: int = 3) -> list[cm.AggregationMode]:
    return [cm.AggregationMode(r, n, k=k) for r, n in product(reducers, cm.NORMALIZATIONS)]


def ablation_suite(
    members_or_ensemble,
    x: Tensor,
    y: Tensor,
    variants: Sequence[cm.AggregationMode],
    epsilon: float,
    spec: AttackSpec,
    workers: int = 1,
) -> Table:
    """Clean and robust accuracy per aggregation variant, each attacked white-box."""
    if hasattr(members_or_ensemble, "probe_logits"):
        se = members_or_ensemble
        aggregate = lambda mode: _SelfEnsembleView(se, mode)
    else:
        ens = Ensemble(list(members_or_ensemble))
        aggregate = ens.with_mode
    t = Table("ablation", ["variant", "normalization", "reducer", "clean", "robust", "epsilon", "n"])

    def run(mode):
        pred = aggregate(mode)
        clean = float((cm.predict(predict_logits(pred, x)) == y).double().mean())
        return clean, float(robust_correct(pred, x, y, epsilon, spec).double().mean())

    for mode, (clean, robust) in zip(variants, pmap(run, variants, workers)):
        t.add(mode.label, mode.normalization or "_", mode.kind, clean, robust, float(epsilon), x.shape[0])
        log.info("ablation %s clean=%.3f robust=%.3f", mode.label, clean, robust)
    t.meta.update(attack="apgd-lite", attack_spec=asdict(spec))
    return t


class _SelfEnsembleView:
    def __init__(self, se, mode):
        self.se, self.mode = se, mode
        self.stochastic = se.stochastic

    def __call__(self, x, draw=0, sample_ids=None):
        return cm.crossmax(self.se.probe_logits(x, draw, sample_ids), self.mode)


# ---------------------------------------------------------------------------
# spectra and generation


def perturbation_slopes(perturbations: Tensor) -> np.ndarray:
    return np.array([radial_power_spectrum(p).slope for p in perturbations])


def spectral_comparison(
    predictor,
    x: Tensor,
    y: Tensor,
    targets: Tensor,
    pgd_spec: AttackSpec,
    mr_spec: MultiResAttackSpec,
) -> Table:
    """Slopes of single-resolution PGD vs multi-resolution perturbations, per image.

    The PGD side is targeted at the same class as the multi-resolution side.
    """
    pgd_deltas = []
    for i in range(x.shape[0]):
        res = pgd_linf(BoundIds(predictor, [i]), x[i:i + 1], y[i:i + 1], replace(pgd_spec, targeted=int(targets[i])))
        pgd_deltas.append(res.images[0] - x[i])
    mr = multires_attack(predictor, x, targets, mr_spec)
    mr_deltas = mr.composed(x.shape[-1])
    s_pgd = perturbation_slopes(torch.stack(pgd_deltas))
    s_mr = perturbation_slopes(mr_deltas)
    t = Table("spectral", ["image", "target", "slope_pgd", "slope_multires"])
    for i in range(x.shape[0]):
        t.add(i, int(targets[i]), float(s_pgd[i]), float(s_mr[i]))
    t.meta.update(
        mean_slope_pgd=float(s_pgd.mean()),
        mean_slope_multires=float(s_mr.mean()),
        pgd_spec=asdict(pgd_spec),
        multires_spec=asdict(mr_spec),
    )
    return t


def generate_class_image(
    predictor,
    target: int,
    spec: MultiResAttackSpec = MultiResAttackSpec.generation(),
    size: int = 32,
    n: int = 1,
):
    """Optimise from a uniform mid-gray canvas toward ``target``.

    Returns the images [n,3,R,R], the per-resolution perturbations, and the
    predictor's probability of ``target`` on each result.
    """
    start = torch.full((n, 3, size, size), MID_GRAY)
    res = multires_attack(predictor, start, target, spec)
    with torch.no_grad():
        prob = torch.softmax(predict_logits(predictor, res.image), dim=-1)[:, target]
    return res.image, res.perturbations, prob
