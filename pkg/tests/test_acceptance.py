"""Exit criteria 1-9, one test each; every test prints a PASS/FAIL line.

Trained models are cached as checkpoints under ``ROBUSTKIT_ACCEPT_CACHE``
(default ``.acceptance_cache`` in the repo), keyed by the training recipe and
a hash of the package source, so any code change retrains from scratch.  The
recorded training time is added back into every runtime check.

Environment:
    ROBUSTKIT_CIFAR_DIR   run on CIFAR-10 binaries instead of the synthetic corpus
    ROBUSTKIT_ACCEPT_N    attacked test images (default 128)
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from robustkit import checkpoint
from robustkit import crossmax as cm
from robustkit.attacks import AttackSpec, MultiResAttackSpec, transfer_matrix
from robustkit.dataio import load_cifar, synth_dataset
from robustkit.harness import experiments as ex
from robustkit.harness.cli import main as cli_main
from robustkit.harness.reports import Table
from robustkit.harness.spectrum import radial_power_spectrum
from robustkit.model import TrainSchedule, build_selfensemble, predict_logits
from robustkit.multires import MultiResConfig

from gradchecks import CASES
from oracles import crossmax_reference, max_relative_error

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("ROBUSTKIT_ACCEPT_CACHE", ROOT / ".acceptance_cache"))
N_TEST = int(os.environ.get("ROBUSTKIT_ACCEPT_N", "128"))
CIFAR = os.environ.get("ROBUSTKIT_CIFAR_DIR")

SCHEDULE = TrainSchedule(epochs=10, lr=1e-3, batch_size=64)
MULTIRES = MultiResConfig(noise_sigma=0.1, eval_noise_sigma=0.1)
FINETUNE = TrainSchedule(epochs=3, lr=5e-4, batch_size=64, adversarial=True, adv_epsilon=8 / 255, seed=1)
PGD20 = AttackSpec(steps=20)


def _source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted((ROOT / "src" / "robustkit").rglob("*.py")):
        h.update(p.relative_to(ROOT).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


# data ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def splits():
    if CIFAR:
        train = load_cifar(CIFAR, "cifar10", "train").subset(5000)
        test = load_cifar(CIFAR, "cifar10", "test").subset(N_TEST)
    else:
        train, test = synth_dataset(0, 5000), synth_dataset(1, N_TEST)
    return train, test


def _cached(name: str, recipe: dict, build):
    """(model, training seconds); trains with ``build()`` on a cache miss."""
    key = hashlib.sha256(json.dumps({**recipe, "src": _source_hash(), "cifar": bool(CIFAR)},
                                    sort_keys=True, default=str).encode()).hexdigest()[:16]
    path = CACHE / f"{name}-{key}.rkc"
    if path.exists():
        model, meta = checkpoint.load(path)
        return model, meta["extra"]["train_seconds"]
    t0 = time.perf_counter()
    model = build()
    secs = time.perf_counter() - t0
    CACHE.mkdir(parents=True, exist_ok=True)
    checkpoint.save(path, model, {"train_seconds": secs, "recipe": recipe})
    return model, secs


@pytest.fixture(scope="module")
def members(splits):
    """Five independently seeded plain CNNs (seeds 0..4) and their total training time."""
    train, _ = splits
    out, total = [], 0.0
    for i in range(5):
        m, s = _cached(f"plain{i}", {"kind": "plain", "seed": i, "schedule": repr(SCHEDULE)},
                       lambda i=i: ex.train_classifier(train, None, SCHEDULE, seed=i)[0])
        out.append(m)
        total += s
    return out, total


@pytest.fixture(scope="module")
def multires_model(splits):
    train, _ = splits
    return _cached("multires0", {"kind": "multires", "seed": 0, "schedule": repr(SCHEDULE), "mr": repr(MULTIRES)},
                   lambda: ex.train_classifier(train, MULTIRES, SCHEDULE, seed=0)[0])


@pytest.fixture(scope="module")
def finetuned_model(splits, multires_model):
    train, _ = splits
    base, _ = multires_model
    return _cached("multires0-fgsm", {"kind": "fgsm-finetune", "base": repr(MULTIRES), "schedule": repr(SCHEDULE),
                                      "finetune": repr(FINETUNE)},
                   lambda: ex.finetune_classifier(base, train, FINETUNE)[0])


def _acc(model, x, y) -> float:
    return float((cm.predict(predict_logits(model, x)) == y).double().mean())


def _robust(model, x, y, eps, spec=PGD20) -> float:
    return float(ex.robust_correct(model, x, y, eps, spec).double().mean())


# 1 -------------------------------------------------------------------------


def test_criterion_1_crossmax_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    modes = [cm.AggregationMode(r, n, k=k) for n in cm.NORMALIZATIONS
             for r, k in [("median", 3), ("kth_highest", 1), ("kth_highest", 2), ("kth_highest", 3)]]
    mismatches = 0
    for i in range(10_000):
        mode = modes[i % len(modes)]
        lo = mode.k if mode.kind == "kth_highest" else 1
        b, n, c = int(rng.integers(1, 5)), int(rng.integers(lo, 7)), int(rng.integers(2, 9))
        z = rng.normal(size=(b, n, c)) * rng.choice([1e-3, 1.0, 1e3])
        if i % 10 == 0:  # exact ties
            z = np.round(z)
        got = cm.crossmax(torch.from_numpy(z), mode).numpy()
        want = np.array(crossmax_reference(z.tolist(), mode.normalization, mode.kind, mode.k))
        mismatches += not np.array_equal(got, want)
    secs = time.perf_counter() - t0
    ok = mismatches == 0 and secs < 60
    verdict(1, ok, f"{mismatches} bitwise mismatches in 10000 blocks, {secs:.1f}s (< 60s)")
    assert ok


# 2 -------------------------------------------------------------------------


def test_criterion_2_gradient_integrity(verdict):
    t0 = time.perf_counter()
    worst = {}
    for name, case in CASES.items():
        worst[name] = max(max_relative_error(*case(seed)) for seed in range(100))
    secs = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and secs < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, ok, f"worst relative error over 100 cases each: {detail}; {secs:.0f}s (< 300s)")
    assert ok


# 3 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_3_ensemble_ordering(verdict, members, splits):
    models, train_secs = members
    _, test = splits
    t0 = time.perf_counter()
    eps = [4 / 255, 6 / 255, 8 / 255]
    t = ex.compare_aggregations(models, test.images, test.labels, [cm.CROSSMAX, cm.MEAN], eps, PGD20)
    secs = train_secs + time.perf_counter() - t0

    def acc(pred, e):
        return t.where(predictor=pred, epsilon=e)[0]["accuracy"]

    parts, hit = [], False
    for e in eps:
        a, m, ind = acc(cm.CROSSMAX.label, e), acc(cm.MEAN.label, e), acc("individual_mean", e)
        good = a >= m + 0.05 and a > ind and m > ind
        hit |= good
        parts.append(f"{round(e * 255)}/255 crossmax {a:.3f} mean {m:.3f} individual {ind:.3f}{' *' if good else ''}")
    ok = hit and secs <= 7200
    verdict(3, ok, "; ".join(parts) + f"; {secs / 60:.0f} min (<= 120)")
    assert ok


# 4 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_4_ablation_ordering(verdict, members, splits):
    models, _ = members
    _, test = splits
    variants = ex.ablation_variants(("median",))
    t = ex.ablation_suite(models, test.images, test.labels, variants, 4 / 255, PGD20)
    robust = {r["normalization"]: r["robust"] for r in t.where()}
    ab = robust["AB"]
    ok = all(ab >= v for v in robust.values()) and robust["B"] <= ab / 2 and robust["BA"] <= ab / 2
    verdict(4, ok, "robust at 4/255: " + ", ".join(f"{k} {v:.3f}" for k, v in robust.items()))
    assert ok


# 5 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_layer_decorrelation(verdict, members, splits):
    train, test = splits
    t0 = time.perf_counter()
    se = build_selfensemble(members[0][0], train)
    tm = transfer_matrix(se, test.images, test.labels, AttackSpec(epsilon=8 / 255, steps=20))
    secs = time.perf_counter() - t0
    clean, m = tm.clean, tm.matrix
    deep_hit = m[-1][-1] < 0.1 * clean[-1]
    shallow_kept = m[-1][0] >= 0.5 * clean[0]
    shallow_hit = m[0][0] < 0.1 * clean[0]
    deep_kept = m[0][-1] >= 0.5 * clean[-1]
    frac = tm.diagonal_min_fraction()
    ok = deep_hit and shallow_kept and shallow_hit and deep_kept and frac >= 0.8 and secs <= 1800
    verdict(5, ok, (
        f"attack deepest: deepest {clean[-1]:.3f}->{m[-1][-1]:.3f}, shallowest {clean[0]:.3f}->{m[-1][0]:.3f}; "
        f"attack shallowest: shallowest ->{m[0][0]:.3f}, deepest ->{m[0][-1]:.3f}; "
        f"diagonal row-min fraction {frac:.2f}; {secs / 60:.1f} min (<= 30)"
    ))
    assert ok


# 6 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_multires_gain(verdict, members, multires_model, splits):
    _, test = splits
    base, mr = members[0][0], multires_model[0]
    t0 = time.perf_counter()
    spec = AttackSpec(steps=20, eot_samples=8)
    x, y = test.images, test.labels
    c_base, c_mr = _acc(base, x, y), _acc(mr, x, y)
    r_base, r_mr = _robust(base, x, y, 4 / 255, spec), _robust(mr, x, y, 4 / 255, spec)
    # baseline training time is one fifth of the ensemble's
    secs = multires_model[1] + members[1] / 5 + time.perf_counter() - t0
    ok = r_mr > r_base and abs(c_mr - c_base) <= 0.05 and secs <= 3600
    verdict(6, ok, f"robust at 4/255: multires {r_mr:.3f} vs single-res {r_base:.3f}; "
                   f"clean {c_mr:.3f} vs {c_base:.3f}; {secs / 60:.0f} min (<= 60)")
    assert ok


# 7 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_adversarial_finetuning(verdict, multires_model, finetuned_model, splits):
    _, test = splits
    spec = AttackSpec(steps=20, eot_samples=8)
    x, y = test.images, test.labels
    r_clean = _robust(multires_model[0], x, y, 8 / 255, spec)
    r_ft = _robust(finetuned_model[0], x, y, 8 / 255, spec)
    ok = r_ft >= r_clean
    verdict(7, ok, f"robust at 8/255: FGSM-finetuned {r_ft:.3f} vs clean-trained {r_clean:.3f} "
                   f"({'strict' if r_ft > r_clean else 'no'} improvement); "
                   f"clean {_acc(finetuned_model[0], x, y):.3f} vs {_acc(multires_model[0], x, y):.3f}")
    assert ok


# 8 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_8_spectral_slopes(verdict, members, splits):
    _, test = splits
    n = 20
    x, y = test.images[:n], test.labels[:n]
    g = torch.Generator().manual_seed(0)
    targets = (y + torch.randint(1, test.class_count, (n,), generator=g)) % test.class_count
    t = ex.spectral_comparison(members[0][0], x, y, targets, AttackSpec(epsilon=8 / 255, steps=20),
                               MultiResAttackSpec())
    s_pgd, s_mr = t.meta["mean_slope_pgd"], t.meta["mean_slope_multires"]
    rng = np.random.default_rng(8)
    s_white = float(np.mean([radial_power_spectrum(rng.uniform(size=(3, 32, 32))).slope for _ in range(n)]))
    ok = s_mr <= s_pgd - 0.5 and abs(s_white) < 0.3
    verdict(8, ok, f"mean slope over {n} images: multires {s_mr:.2f}, PGD {s_pgd:.2f} "
                   f"(gap {s_pgd - s_mr:.2f} >= 0.5); white noise {s_white:.2f} (|s| < 0.3)")
    assert ok


# 9 -------------------------------------------------------------------------

_TINY = """
[data]
train_size = 160
test_size = 16
[model]
widths = 4, 8
blocks_per_stage = 1
[multires]
resolutions = 32, 16, 8, 4
[train]
epochs = 2
batch_size = 32
[probe]
pool = 2
[attack]
steps = 3
eot_samples = 2
[eval]
epsilons = 0, 2, 4
[ensemble]
n_models = 2
[spectrum]
images = 2
steps = 4
[generate]
steps = 4
classes = 1, 3
"""


def _pipeline(out: Path, cfg: Path, threads: int) -> list[int]:
    common = ["--config", str(cfg), "--seed", "123", "--threads", str(threads)]
    model, se = out / "train" / "model.rkc", out / "probe" / "selfensemble.rkc"
    calls = [
        ["train", "--out", out / "train"],
        ["probe", "--out", out / "probe", "--checkpoint", model],
        ["attack", "--out", out / "attack", "--checkpoint", model, "--images", "2"],
        ["eval", "--out", out / "eval", "--checkpoint", model],
        ["ensemble", "--out", out / "ensemble"],
        ["ablate", "--out", out / "ablate", "--checkpoint", se, "--transfer"],
        ["spectrum", "--out", out / "spectrum", "--checkpoint", model],
        ["generate", "--out", out / "generate", "--checkpoint", model],
    ]
    return [cli_main([str(a) for a in c[:1] + common + c[1:]]) for c in calls]


def _comparable(path: Path):
    if path.suffix == ".json":
        d = json.loads(path.read_text())
        if {"columns", "rows", "meta"} <= d.keys():
            return Table.from_json(path.read_text()).stable()
        return d
    return path.read_bytes()


@pytest.mark.slow
def test_criterion_9_determinism(verdict, tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(_TINY)
    codes = {t: _pipeline(tmp_path / f"run{t}", cfg, t) for t in (1, 2)}
    codes_again = _pipeline(tmp_path / "again", cfg, 1)
    files = sorted(p.relative_to(tmp_path / "run1") for p in (tmp_path / "run1").rglob("*") if p.is_file())
    diffs = []
    for other in ("run2", "again"):
        names = sorted(p.relative_to(tmp_path / other) for p in (tmp_path / other).rglob("*") if p.is_file())
        if names != files:
            diffs.append(f"{other}: different file set")
            continue
        diffs += [f"{other}/{f}" for f in files if _comparable(tmp_path / "run1" / f) != _comparable(tmp_path / other / f)]
    ok = not diffs and all(c == 0 for c in codes[1] + codes[2] + codes_again)
    verdict(9, ok, f"8 commands x (1 thread, 2 threads, repeat): {len(files)} output files, "
                   f"{len(diffs)} differing{': ' + ', '.join(map(str, diffs[:5])) if diffs else ''}")
    assert ok
