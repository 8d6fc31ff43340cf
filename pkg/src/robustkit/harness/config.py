"""Plain-text run configuration: INI sections of key = value pairs.

Every key, its type and default is listed in ``docs/config.md``.  Lists are
comma separated; epsilons are given in units of 1/255.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .. import crossmax as cm
from ..attacks import AttackSpec, MultiResAttackSpec
from ..dataio import MixupSchedule
from ..model import TrainSchedule
from ..multires import MultiResConfig


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps this to exit code 2."""


@dataclass
class DataSection:
    source: str = "synthetic"  # synthetic | cifar10 | cifar100
    train_size: int = 5000
    test_size: int = 256
    class_count: int = 10  # synthetic only
    signal: float = 0.15
    clutter: float = 0.05
    template_seed: int = 0


@dataclass
class ModelSection:
    widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    multires: bool = True


@dataclass
class MultiresSection:
    resolutions: tuple[int, ...] = (32, 16, 8, 4)
    jitter: int = 3
    noise: float = 0.1
    eval_noise: float = 0.1
    contrast_low: float = 0.9
    contrast_high: float = 1.1
    grayscale: float = 0.2
    noise_before_upsample: bool = False


@dataclass
class TrainSection:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 64
    mixup: bool = False
    adversarial: bool = False
    adv_epsilon: float = 8.0


@dataclass
class ProbeSection:
    epochs: int = 1
    lr: float = 1e-2
    batch_size: int = 64
    pool: str = "4"  # avg | flatten | <int grid>
    k: int = 3


@dataclass
class AttackSection:
    epsilon: float = 8.0
    steps: int = 20
    step_size: float = 0.0  # 0 -> 2.5 * epsilon / steps
    restarts: int = 1
    eot_samples: int = 8
    momentum: float = 0.75
    halving: bool = True
    random_start: bool = True
    targeted_restarts: int = 3
    target: int = -1  # -1 -> untargeted


@dataclass
class EvalSection:
    epsilons: tuple[float, ...] = (0.0, 2.0, 4.0, 6.0, 8.0)


@dataclass
class EnsembleSection:
    n_models: int = 5
    modes: tuple[str, ...] = ("AB+median", "_+mean", "_+plain_median")


@dataclass
class AblateSection:
    reducers: tuple[str, ...] = ("median",)
    epsilon: float = 4.0
    transfer_epsilon: float = 8.0


@dataclass
class SpectrumSection:
    images: int = 20
    steps: int = 50
    lr: float = 5e-3
    jitter: int = 5
    noise: float = 0.6


@dataclass
class GenerateSection:
    classes: tuple[int, ...] = (0,)
    steps: int = 400
    lr: float = 1.0
    count: int = 1


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    multires: MultiresSection = field(default_factory=MultiresSection)
    train: TrainSection = field(default_factory=TrainSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    spectrum: SpectrumSection = field(default_factory=SpectrumSection)
    generate: GenerateSection = field(default_factory=GenerateSection)

    # --- conversions to library objects -----------------------------------

    def multires_config(self, seed: int = 0) -> MultiResConfig | None:
        if not self.model.multires:
            return None
        m = self.multires
        return MultiResConfig(
            resolutions=m.resolutions,
            jitter_amplitude=m.jitter,
            noise_sigma=m.noise,
            eval_noise_sigma=m.eval_noise,
            contrast_range=(m.contrast_low, m.contrast_high),
            grayscale_shift_max=m.grayscale,
            noise_before_upsample=m.noise_before_upsample,
            seed=seed,
        )

    def schedule(self, seed: int = 0) -> TrainSchedule:
        t = self.train
        return TrainSchedule(
            epochs=t.epochs,
            lr=t.lr,
            batch_size=t.batch_size,
            mixup=MixupSchedule(seed=seed) if t.mixup else None,
            adversarial=t.adversarial,
            adv_epsilon=t.adv_epsilon / 255,
            seed=seed,
        )

    def attack_spec(self, seed: int = 0, epsilon: float | None = None) -> AttackSpec:
        a = self.attack
        return AttackSpec(
            epsilon=(a.epsilon if epsilon is None else epsilon) / 255,
            steps=a.steps,
            step_size=a.step_size / 255 if a.step_size > 0 else None,
            restarts=a.restarts,
            eot_samples=a.eot_samples,
            targeted=None if a.target < 0 else a.target,
            momentum=a.momentum,
            halving_schedule=a.halving,
            random_start=a.random_start,
            targeted_restarts=a.targeted_restarts,
            seed=seed,
        )

    def transfer_attack_spec(self, seed: int = 0) -> AttackSpec:
        return self.attack_spec(seed, self.ablate.transfer_epsilon)

    def multires_attack_spec(self, seed: int = 0) -> MultiResAttackSpec:
        s = self.spectrum
        return MultiResAttackSpec(steps=s.steps, lr=s.lr, jitter=s.jitter, noise_sigma=s.noise, seed=seed)

    def generation_spec(self, seed: int = 0) -> MultiResAttackSpec:
        g = self.generate
        return replace(MultiResAttackSpec.generation(), steps=g.steps, lr=g.lr, seed=seed)

    def modes(self) -> list[cm.AggregationMode]:
        return [parse_mode(m, self.probe.k) for m in self.ensemble.modes]


def parse_mode(label: str, k: int = 3) -> cm.AggregationMode:
    """``"AB+median"``, ``"_+mean"``, ``"AB+top3"`` -> AggregationMode."""
    try:
        norm, red = label.split("+")
    except ValueError:
        raise ConfigError(f"aggregation mode {label!r} is not of the form NORM+REDUCER") from None
    norm = "" if norm == "_" else norm
    if red.startswith("top"):
        red, k = "kth_highest", int(red[3:] or k)
    try:
        return cm.AggregationMode(red, norm, k=k)
    except ValueError as e:
        raise ConfigError(str(e)) from None


_BOOL = {"true": True, "yes": True, "on": True, "1": True, "false": False, "no": False, "off": False, "0": False}


def _convert(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return _BOOL[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        return raw
    except (KeyError, ValueError):
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _validate(cfg: RunConfig) -> None:
    d = cfg.data
    if d.source not in ("synthetic", "cifar10", "cifar100"):
        raise ConfigError(f"data.source must be synthetic, cifar10 or cifar100, got {d.source!r}")
    for name in ("train_size", "test_size", "class_count"):
        if getattr(d, name) < 1:
            raise ConfigError(f"data.{name} must be positive")
    for sec, name in [("train", "epochs"), ("train", "batch_size"), ("probe", "batch_size"),
                      ("attack", "steps"), ("attack", "eot_samples"), ("attack", "restarts"),
                      ("ensemble", "n_models"), ("spectrum", "images"), ("generate", "count")]:
        if getattr(getattr(cfg, sec), name) < 1:
            raise ConfigError(f"{sec}.{name} must be >= 1")
    if cfg.ensemble.n_models < 2:
        raise ConfigError("ensemble.n_models must be >= 2")
    if list(cfg.eval.epsilons) != sorted(cfg.eval.epsilons):
        raise ConfigError("eval.epsilons must be sorted ascending")
    if any(e < 0 or e > 255 for e in (*cfg.eval.epsilons, cfg.attack.epsilon, cfg.ablate.epsilon,
                                      cfg.ablate.transfer_epsilon)):
        raise ConfigError("epsilons are in 1/255 units and must lie in [0, 255]")
    pool = cfg.probe.pool
    if pool not in ("avg", "flatten") and not pool.isdigit():
        raise ConfigError(f"probe.pool must be avg, flatten or an integer, got {pool!r}")
    cfg.modes()
    for r in cfg.ablate.reducers:
        if r not in cm.REDUCERS:
            raise ConfigError(f"ablate.reducers: unknown reducer {r!r}")
    try:
        cfg.multires_config()
        cfg.attack_spec()
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_config(path: str | Path | None = None, text: str | None = None) -> RunConfig:
    """Defaults overlaid with the file (or ``text``); unknown keys are errors."""
    cfg = RunConfig()
    if path is None and text is None:
        _validate(cfg)
        return cfg
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        if text is None:
            text = Path(path).read_text()
        parser.read_string(text, source=str(path or "<string>"))
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"cannot read config: {e}") from None
    known = {f.name: f for f in fields(RunConfig)}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
        target = getattr(cfg, section)
        defaults = {f.name: getattr(target, f.name) for f in fields(target)}
        updates = {}
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigError(f"unknown key {section}.{key}")
            updates[key] = _convert(raw, defaults[key], f"{section}.{key}")
        setattr(cfg, section, replace(target, **updates))
    _validate(cfg)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Serialize back to the file format (round-trips through load_config)."""
    lines = []
    for sec in fields(cfg):
        lines.append(f"[{sec.name}]")
        obj = getattr(cfg, sec.name)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
