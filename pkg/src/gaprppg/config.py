"""Experiment configuration: a nested key-value schema loaded from YAML/JSON with dotted overrides.

Schema (all keys optional; ``None`` means "preset default")::

    seed: 0
    data:   {root, out, heldout_domain, source_domains, target_domain, window: 256, stride: 10, rows: 64}
    synth:  {n_domains: 4, n_subjects: 6, n_clips: 6, duration_s: 20, n_rois: 25}
    train:  {preset: desk|paper, iterations, batch_size, lr, val_ratio: 0.1, eval_every, val_max_windows: 256,
             supervise_augmented: true, ablation: false}
    adapt:  {checkpoint, lr: 1e-5, subjects}
    loss:   {p1 .. p7, pi, norm, pseudo_weight}
    aug:    {delta_t_max, gamma_min, gamma_max, p_offset, p_perm, p_scale, scaling_mode}
    baseline: {methods: [green, chrom, pos], calibration_clips: 2}
    sweep:  {grid: [0.0, 0.1, 0.3, 0.6, 1.0]}
    gradcheck: {seeds: [0, 1, 2]}
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ._validation import ValidationError
from .augment import AugmentConfig
from .losses import LossWeights

PRESETS = {
    "desk": {"iterations": 1500, "batch_size": 8, "lr": 1e-3, "eval_every": 150},
    "paper": {"iterations": 20000, "batch_size": 100, "lr": 1e-5, "eval_every": 1000},
}


@dataclass
class DataSection:
    root: str | None = None
    out: str | None = None
    heldout_domain: str | None = "dom3"
    source_domains: list | None = None
    target_domain: str | None = None
    window: int = 256
    stride: int = 10
    rows: int = 64


@dataclass
class SynthSection:
    n_domains: int = 4
    n_subjects: int = 6
    n_clips: int = 6
    duration_s: float = 20.0
    n_rois: int = 25


@dataclass
class TrainSection:
    preset: str = "desk"
    iterations: int | None = None
    batch_size: int | None = None
    lr: float | None = None
    val_ratio: float = 0.1
    eval_every: int | None = None
    val_max_windows: int = 256
    supervise_augmented: bool = True
    ablation: bool = False


@dataclass
class AdaptSection:
    checkpoint: str | None = None
    lr: float = 1e-5
    subjects: list | None = None


@dataclass
class LossSection:
    p1: float | None = None
    p2: float | None = None
    p3: float | None = None
    p4: float | None = None
    p5: float | None = None
    p6: float | None = None
    p7: float | None = None
    pi: float | None = None
    norm: str | None = None
    pseudo_weight: float | None = None


@dataclass
class AugSection:
    delta_t_max: int = 30
    gamma_min: float = 0.8
    gamma_max: float = 2.2
    p_offset: float = 1.0
    p_perm: float = 1.0
    p_scale: float = 1.0
    scaling_mode: str = "as_written"


@dataclass
class BaselineSection:
    methods: list = field(default_factory=lambda: ["green", "chrom", "pos"])
    calibration_clips: int = 2


@dataclass
class SweepSection:
    grid: list = field(default_factory=lambda: [0.0, 0.1, 0.3, 0.6, 1.0])


@dataclass
class GradcheckSection:
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    train: TrainSection = field(default_factory=TrainSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    loss: LossSection = field(default_factory=LossSection)
    aug: AugSection = field(default_factory=AugSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    def to_dict(self) -> dict:
        return asdict(self)

    # ---------------------------------------------------------- resolution

    def loss_weights(self) -> LossWeights:
        base = LossWeights.desk() if self.train.preset == "desk" else LossWeights()
        over = {k: v for k, v in asdict(self.loss).items() if v is not None}
        if self.train.ablation:
            base = LossWeights.supervised_only()
        return dataclasses.replace(base, **over)

    def augment_config(self) -> AugmentConfig:
        aug = AugmentConfig(**asdict(self.aug))
        if self.train.ablation:
            aug = dataclasses.replace(aug, p_offset=0.0, p_perm=0.0, p_scale=0.0)
        return aug

    def mssdg_config(self):
        from .protocols import MssdgConfig

        if self.train.preset not in PRESETS:
            raise ValidationError(f"unknown preset {self.train.preset!r}")
        preset = PRESETS[self.train.preset]
        pick = lambda k: getattr(self.train, k) if getattr(self.train, k) is not None else preset[k]  # noqa: E731
        return MssdgConfig(
            heldout_domain=self.data.heldout_domain,
            source_domains=self.data.source_domains,
            val_ratio=self.train.val_ratio,
            batch_size=int(pick("batch_size")),
            iterations=int(pick("iterations")),
            lr=float(pick("lr")),
            seed=int(self.seed),
            eval_every=int(pick("eval_every")),
            val_max_windows=self.train.val_max_windows,
            supervise_augmented=self.train.supervise_augmented,
            preset=self.train.preset,
            window=self.data.window,
            stride=self.data.stride,
            rows=self.data.rows,
            weights=self.loss_weights(),
            aug=self.augment_config(),
        )

    def ttpa_config(self):
        from .protocols import TtpaConfig

        # the ablation switch only concerns training; adaptation always uses the full unsupervised objective
        base = LossWeights.desk() if self.train.preset == "desk" else LossWeights()
        over = {k: v for k, v in asdict(self.loss).items() if v is not None}
        return TtpaConfig(lr=float(self.adapt.lr), seed=int(self.seed), subjects=self.adapt.subjects,
                          weights=dataclasses.replace(base, **over), aug=AugmentConfig(**asdict(self.aug)))

    def dataset_spec(self):
        from .synth import DatasetSpec

        return DatasetSpec(**asdict(self.synth))


def _coerce(value, hint, key: str):
    """Cast a parsed scalar to the field's declared type (YAML reads ``1e-05`` as a string)."""
    if value is None:
        return None
    options = [a for a in typing.get_args(hint) if a is not type(None)] or [hint]
    for kind in (bool, int, float):
        if kind in options:
            if kind is bool:
                if isinstance(value, bool):
                    return value
                raise ValidationError(f"{key} must be true or false, got {value!r}")
            try:
                cast = kind(value) if not isinstance(value, bool) else None
            except (TypeError, ValueError):
                cast = None
            if cast is None or (kind is int and float(value) != cast):
                if kind is int and float in options:
                    continue
                raise ValidationError(f"{key} must be {'an integer' if kind is int else 'a number'}, got {value!r}")
            return cast
    return value


def _build(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ValidationError(f"config section {path or '<root>'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(f'{path}{k}' for k in unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if known[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}{name}.")
        else:
            kwargs[name] = _coerce(value, hints[name], f"{path}{name}")
    return cls(**kwargs)


def parse_override(item: str) -> tuple[list, object]:
    if "=" not in item:
        raise ValidationError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ValidationError(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse value in {item!r}: {exc}") from exc
    return key.split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        keys, value = parse_override(item)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ValidationError(f"override {item!r}: {k} is not a section")
        node[keys[-1]] = value
    return data


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Read YAML/JSON (or start from defaults) and apply ``key=value`` overrides."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file {path} not found")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ValidationError(f"cannot parse {path}: {exc}") from exc
    data = apply_overrides(data, overrides)
    cfg = _build(ExperimentConfig, data)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.train.preset not in PRESETS:
        raise ValidationError(f"train.preset must be one of {sorted(PRESETS)}")
    if not (0.0 <= cfg.train.val_ratio < 1.0):
        raise ValidationError("train.val_ratio must be in [0, 1)")
    for k in ("iterations", "batch_size", "eval_every"):
        v = getattr(cfg.train, k)
        if v is not None and int(v) < 1:
            raise ValidationError(f"train.{k} must be >= 1")
    if cfg.adapt.lr < 0:
        raise ValidationError("adapt.lr must be >= 0")
    try:
        cfg.loss_weights()
        cfg.augment_config()
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
