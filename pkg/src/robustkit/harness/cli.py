"""Command-line entry point: ``robustkit <command> [options]``.

Exit codes: 0 success, 2 validation error (bad flags, config, data or
checkpoint), 3 numeric failure (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .. import checkpoint, crossmax as cm
from ..attacks import ATTACK_LABEL, BoundIds, export_images, pgd_linf, transfer_matrix
from ..dataio import Dataset, load_cifar, synth_dataset
from ..gradcore import NumericError
from ..model import (
    Classifier,
    SelfEnsemble,
    accuracy,
    build_selfensemble,
    parameter_hash,
    predict_logits,
    probe_accuracies,
)
from . import experiments as ex
from .config import ConfigError, RunConfig, dump_config, load_config
from .reports import Table, config_hash
from .spectrum import radial_power_spectrum

log = logging.getLogger("robustkit")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
COMMANDS = ("train", "probe", "attack", "eval", "ensemble", "ablate", "spectrum", "generate")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


class Run:
    """Parsed flags + config + output bookkeeping for one invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.cfg: RunConfig = load_config(args.config)
        self.seed: int = args.seed
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.t0 = time.perf_counter()
        self.chash = config_hash(dump_config(self.cfg))

    def data(self, split: str) -> Dataset:
        d = self.cfg.data
        size = d.train_size if split == "train" else d.test_size
        if d.source == "synthetic":
            if self.args.data_dir:
                raise UsageError("--data-dir given but data.source is synthetic")
            seed = 0 if split == "train" else 1
            ds = synth_dataset(seed, size, d.class_count, template_seed=d.template_seed,
                               signal=d.signal, clutter=d.clutter)
        else:
            if not self.args.data_dir:
                raise UsageError(f"data.source = {d.source} needs --data-dir")
            ds = load_cifar(self.args.data_dir, d.source, split)
        # --subset always takes a prefix of the configured split
        if self.args.subset is not None:
            size = min(size, self.args.subset)
        return ds.subset(min(size, len(ds)))

    def meta(self) -> dict:
        return {
            "command": self.args.command,
            "seed": self.seed,
            "config_hash": self.chash,
            "attack": ATTACK_LABEL,
            "wall_clock_s": time.perf_counter() - self.t0,
        }

    def save(self, table: Table, stem: str | None = None, **extra) -> None:
        table.meta = {**table.meta, **extra, **self.meta()}
        for p in table.save(self.out, stem):
            log.info("wrote %s", p)

    def load(self, path) -> Classifier | SelfEnsemble:
        model, _ = checkpoint.load(path)
        return model


def _need(path: str | None, flag: str) -> str:
    if not path:
        raise UsageError(f"{flag} is required for this command")
    return path


def _classifier(model) -> Classifier:
    return model.classifier if isinstance(model, SelfEnsemble) else model


# ---------------------------------------------------------------------------
# commands


def cmd_train(run: Run) -> None:
    """Train a classifier (or fine-tune --checkpoint) and write model.rkc."""
    train, test = run.data("train"), run.data("test")
    if run.args.checkpoint:
        # architecture and input stack come from the checkpoint, the schedule from the config
        start = _classifier(run.load(run.args.checkpoint))
        clf, trace = ex.finetune_classifier(start, train, run.cfg.schedule(run.seed))
    else:
        clf, trace = ex.train_classifier(
            train, run.cfg.multires_config(run.seed), run.cfg.schedule(run.seed),
            run.cfg.model.widths, run.cfg.model.blocks_per_stage, run.seed,
        )
    checkpoint.save(run.out / "model.rkc", clf, {"seed": run.seed, "config_hash": run.chash})
    steps = Table("train_loss", ["step", "loss"])
    for i, v in enumerate(trace):
        steps.add(i, v)
    run.save(steps)
    t = Table("train", ["split", "accuracy", "n"])
    t.add("train", accuracy(clf, train.images, train.labels), len(train))
    t.add("test", accuracy(clf, test.images, test.labels), len(test))
    run.save(t, model_hashes=[parameter_hash(clf)[:16]])


def cmd_probe(run: Run) -> None:
    """Fit linear probes on a trained backbone; write selfensemble.rkc."""
    clf = _classifier(run.load(_need(run.args.checkpoint, "--checkpoint")))
    train, test = run.data("train"), run.data("test")
    before = parameter_hash(clf)
    p = run.cfg.probe
    pool = int(p.pool) if p.pool.isdigit() else p.pool
    se = build_selfensemble(
        clf, train, cm.AggregationMode("kth_highest", "AB", k=p.k, clamp_k=True),
        epochs=p.epochs, lr=p.lr, batch_size=p.batch_size, pool=pool, seed=run.seed,
    )
    if parameter_hash(clf) != before:
        raise RuntimeError("backbone parameters changed during probe training")
    checkpoint.save(run.out / "selfensemble.rkc", se, {"seed": run.seed, "config_hash": run.chash})
    t = Table("probes", ["probe", "layer_index", "train_accuracy", "test_accuracy"])
    tr = probe_accuracies(se, train.images, train.labels)
    te = probe_accuracies(se, test.images, test.labels)
    for i, probe in enumerate(se.probes):
        t.add(i, probe.layer_index, tr[i], te[i])
    t.add("selfensemble", -1, accuracy(se, train.images, train.labels), accuracy(se, test.images, test.labels))
    run.save(t, model_hashes=[before[:16]])


def cmd_attack(run: Run) -> None:
    """Run apgd-lite PGD at attack.epsilon and export attacked images."""
    model = run.load(_need(run.args.checkpoint, "--checkpoint"))
    test = run.data("test")
    spec = run.cfg.attack_spec(run.seed)
    x, y = test.images, test.labels
    res = pgd_linf(BoundIds(model, list(range(len(test)))), x, y, spec)
    clean = cm.predict(predict_logits(model, x))
    adv = cm.predict(predict_logits(model, res.images))
    t = Table("attack", ["index", "label", "clean_pred", "adv_pred", "success", "loss", "linf"])
    linf = (res.images - x).abs().flatten(1).max(1).values
    for i in range(len(test)):
        t.add(i, int(y[i]), int(clean[i]), int(adv[i]), bool(res.success[i]), float(res.loss[i]), float(linf[i]))
    run.save(t, attack_spec=asdict(spec), model_hashes=[parameter_hash(model)[:16]])
    for i in range(min(len(test), run.args.images)):
        export_images(run.out / "images", f"sample{i:04d}",
                      {"clean": x[i], "adversarial": res.images[i], "perturbation": res.images[i] - x[i]},
                      {"attack_spec": asdict(spec), "seed": run.seed, "index": i, "loss": float(res.loss[i])})


def cmd_eval(run: Run) -> None:
    """Robust accuracy curve over eval.epsilons."""
    model = run.load(_need(run.args.checkpoint, "--checkpoint"))
    test = run.data("test")
    eps = [e / 255 for e in run.cfg.eval.epsilons]
    t = ex.eval_robust_curve(model, test.images, test.labels, eps, run.cfg.attack_spec(run.seed),
                             label=Path(run.args.checkpoint).stem, seed=run.seed, workers=run.args.threads)
    run.save(t)


def _members(run: Run) -> list[Classifier]:
    if run.args.checkpoints:
        members = [_classifier(run.load(p)) for p in run.args.checkpoints]
        if len(members) < 2:
            raise UsageError("an ensemble needs at least 2 --checkpoints")
        return members
    members = ex.train_ensemble(
        run.cfg.ensemble.n_models, run.data("train"), run.cfg.multires_config(run.seed),
        run.cfg.schedule(run.seed), run.cfg.model.widths, run.seed, run.args.threads,
        blocks_per_stage=run.cfg.model.blocks_per_stage,
    )
    for i, m in enumerate(members):
        checkpoint.save(run.out / f"member{i}.rkc", m, {"seed": run.seed, "member": i})
    return members


def cmd_ensemble(run: Run) -> None:
    """Compare aggregation modes on an ensemble of classifiers."""
    members = _members(run)
    test = run.data("test")
    eps = [e / 255 for e in run.cfg.eval.epsilons]
    t = ex.compare_aggregations(members, test.images, test.labels, run.cfg.modes(), eps,
                                run.cfg.attack_spec(run.seed), workers=run.args.threads)
    run.save(t)


def cmd_ablate(run: Run) -> None:
    """CrossMax normalization/reducer ablation at ablate.epsilon."""
    test = run.data("test")
    k = run.cfg.probe.k
    variants = ex.ablation_variants(run.cfg.ablate.reducers, k)
    target = None
    if run.args.checkpoint:
        target = run.load(run.args.checkpoint)
        if not isinstance(target, SelfEnsemble):
            raise UsageError("ablate --checkpoint expects a self-ensemble (from `probe`)")
        variants = [cm.AggregationMode(v.kind, v.normalization, v.k, clamp_k=True) for v in variants]
    else:
        target = _members(run)
    t = ex.ablation_suite(target, test.images, test.labels, variants, run.cfg.ablate.epsilon / 255,
                          run.cfg.attack_spec(run.seed), run.args.threads)
    run.save(t)
    if isinstance(target, SelfEnsemble) and run.args.transfer:
        spec = run.cfg.transfer_attack_spec(run.seed)
        tm = transfer_matrix(target, test.images, test.labels, spec)
        m = Table("transfer", ["attacked"] + [f"probe{b}" for b in range(len(tm.clean))])
        m.add("clean", *tm.clean)
        for a, row in enumerate(tm.matrix):
            m.add(f"probe{a}", *row)
        run.save(m, diagonal_min_fraction=tm.diagonal_min_fraction(), attack_spec=asdict(spec))


def cmd_spectrum(run: Run) -> None:
    """Power-spectrum slopes of PGD vs multi-resolution perturbations."""
    model = run.load(_need(run.args.checkpoint, "--checkpoint"))
    n = run.cfg.spectrum.images
    if run.args.subset is not None:
        n = min(n, run.args.subset)
    test = run.data("test").subset(n)
    g = torch.Generator().manual_seed(run.seed)
    offsets = torch.randint(1, test.class_count, (len(test),), generator=g)
    targets = (test.labels + offsets) % test.class_count
    pgd = run.cfg.attack_spec(run.seed)
    t = ex.spectral_comparison(model, test.images, test.labels, targets, pgd, run.cfg.multires_attack_spec(run.seed))
    noise = torch.rand(n, 3, 32, 32, generator=g)
    t.meta["mean_slope_white_noise"] = float(np.mean([radial_power_spectrum(z).slope for z in noise]))
    run.save(t, model_hashes=[parameter_hash(model)[:16]])
    prof = radial_power_spectrum(test.images[0])
    (run.out / "spectrum_example.json").write_text(json.dumps(prof.to_dict(), indent=2))


def cmd_generate(run: Run) -> None:
    """Generate class images from mid-gray with a multi-resolution attack."""
    paths = run.args.checkpoints or [_need(run.args.checkpoint, "--checkpoint")]
    models = [run.load(p) for p in paths]
    gen = run.cfg.generation_spec(run.seed)
    t = Table("generate", ["target", "index", "probability"])
    for target in run.cfg.generate.classes:
        img, perts, prob = ex.generate_class_image(models if len(models) > 1 else models[0], target, gen,
                                                   n=run.cfg.generate.count)
        if len(models) > 1:
            # report the probability under the first model only
            prob = torch.softmax(predict_logits(models[0], img), -1)[:, target]
        for i in range(img.shape[0]):
            t.add(int(target), i, float(prob[i]))
            export_images(run.out / "images", f"class{target}_{i}", {"image": img[i]},
                          {"target": int(target), "probability": float(prob[i]), "spec": asdict(gen),
                           "seed": run.seed})
    run.save(t, spec=asdict(gen))


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration (see docs/config.md)")
    common.add_argument("--seed", type=_u64, default=0, help="run seed (unsigned 64-bit)")
    common.add_argument("--data-dir", help="directory holding CIFAR binary batches")
    common.add_argument("--out", default="runs/out", help="output directory")
    common.add_argument("--subset", type=_positive, help="cap the number of images used")
    common.add_argument("--threads", type=_positive, default=1,
                        help="worker threads for independent units (members, epsilons, variants)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="robustkit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name, parents=[common], help=HANDLERS[name].__doc__ or name)
        if name in ("train", "probe", "attack", "eval", "spectrum", "generate", "ablate"):
            s.add_argument("--checkpoint", help="model file written by train/probe (train: fine-tune it)")
        if name in ("ensemble", "ablate", "generate"):
            s.add_argument("--checkpoints", nargs="+", help="member model files (else members are trained)")
        if name == "attack":
            s.add_argument("--images", type=int, default=8, help="how many samples to export as PNG")
        if name == "ablate":
            s.add_argument("--transfer", action="store_true", help="also write the layer transfer matrix")
    return p


def _u64(s: str) -> int:
    v = int(s)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # kernels stay single-threaded so results are bit-identical for any --threads
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        run = Run(args)
        HANDLERS[args.command](run)
    except NumericError as e:
        print(f"robustkit: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, checkpoint.CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"robustkit: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
