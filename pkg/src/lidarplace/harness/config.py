"""Run configuration: a sectioned ``key = value`` file mapped onto dataclasses.

Example::

    [dataset]
    source = synth            ; or "manifest" / "kitti"
    n_frames = 600
    database_size = 400

    [model]
    preset = tiny_resnet

    [run]
    precisions = fp32, fp16, int8
    seeds = 0, 1, 2
    out = runs/demo

Every field not given falls back to its default; :func:`write_config` echoes
the fully resolved configuration so a run directory records what produced it.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..bev import BevConfig
from ..errors import InvalidConfig
from ..ingest import SynthConfig
from ..train import TrainConfig

PRECISIONS = ("fp32", "fp16", "int8")


@dataclass
class DatasetConfig:
    source: str = "synth"             # synth | manifest | kitti
    manifest: str = ""
    velodyne_dir: str = ""
    pose_file: str = ""
    database_size: int = 400          # first N frames form the database, the rest are queries
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class ModelConfig:
    preset: str = "tiny_resnet"
    descriptor_dim: int = 256
    checkpoint_dir: str = ""          # reuse <dir>/<preset>_seed<k>.lpck when present


@dataclass
class CalibConfig:
    images: int = 256                 # database BEVs, evenly spaced
    reservoir: int = 4096
    per_channel: bool = False


@dataclass
class EvalConfig:
    tau_gt: float = 5.0
    dt: float = 200.0
    ks: tuple = (1, 5, 10, 20)
    bins: int = 20
    threshold: float = 5.0


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    bev: BevConfig = field(default_factory=BevConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    calibration: CalibConfig = field(default_factory=CalibConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    precisions: tuple = PRECISIONS
    seeds: tuple = (0, 1, 2)
    out: str = "out"

    def validate(self):
        if not self.precisions:
            raise InvalidConfig("precision set is empty")
        bad = set(self.precisions) - set(PRECISIONS)
        if bad:
            raise InvalidConfig(f"unknown precision(s) {sorted(bad)}")
        if not self.seeds:
            raise InvalidConfig("need at least one seed")
        if self.dataset.source not in ("synth", "manifest", "kitti"):
            raise InvalidConfig(f"unknown dataset source {self.dataset.source!r}")
        if self.dataset.database_size < 1:
            raise InvalidConfig("database_size must be >= 1")
        if self.dataset.source == "synth" and self.dataset.database_size >= self.dataset.synth.n_frames:
            raise InvalidConfig("database_size leaves no query frames")
        if not self.eval.ks or min(self.eval.ks) < 1:
            raise InvalidConfig("ks must be positive")
        if self.calibration.images < 1:
            raise InvalidConfig("calibration.images must be >= 1")
        self.dataset.synth.validate()
        self.bev.validate()
        self.train.validate()
        return self


# section name -> (getter, owner getter, attribute on owner); frozen configs are replaced whole
_SECTIONS = {
    "dataset": (lambda c: c.dataset, lambda c: c, "dataset"),
    "synth": (lambda c: c.dataset.synth, lambda c: c.dataset, "synth"),
    "model": (lambda c: c.model, lambda c: c, "model"),
    "bev": (lambda c: c.bev, lambda c: c, "bev"),
    "train": (lambda c: c.train, lambda c: c, "train"),
    "calibration": (lambda c: c.calibration, lambda c: c, "calibration"),
    "eval": (lambda c: c.eval, lambda c: c, "eval"),
}
_RUN_KEYS = ("precisions", "seeds", "out")


def _parse_value(raw: str, current, name):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if current and isinstance(current[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
    except ValueError:
        raise InvalidConfig(f"{name}: cannot parse {raw!r}") from None
    return raw


def _format_value(v):
    if isinstance(v, tuple):
        return ", ".join(map(str, v))
    return str(v)


def _section_values(obj, items, section):
    fields = {f.name for f in dataclasses.fields(obj) if not dataclasses.is_dataclass(getattr(obj, f.name))}
    out = {}
    for key, raw in items:
        if key not in fields:
            raise InvalidConfig(f"[{section}] unknown key {key!r}")
        out[key] = _parse_value(raw, getattr(obj, key), f"[{section}] {key}")
    return out


def parse_config(text: str) -> RunConfig:
    """Parse config text; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise InvalidConfig(str(exc)) from None
    cfg = RunConfig()
    for section in cp.sections():
        items = cp.items(section)
        if section == "run":
            for key, raw in items:
                if key not in _RUN_KEYS:
                    raise InvalidConfig(f"[run] unknown key {key!r}")
                setattr(cfg, key, _parse_value(raw, getattr(cfg, key), f"[run] {key}"))
        elif section in _SECTIONS:
            get, owner, attr = _SECTIONS[section]
            obj = get(cfg)
            setattr(owner(cfg), attr, dataclasses.replace(obj, **_section_values(obj, items, section)))
        else:
            raise InvalidConfig(f"unknown section [{section}]")
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def format_config(cfg: RunConfig) -> str:
    """Fully resolved configuration in the same file format (stable order)."""
    lines = ["[run]"]
    lines += [f"{k} = {_format_value(getattr(cfg, k))}" for k in _RUN_KEYS]
    for section, (get, _, _) in _SECTIONS.items():
        obj = get(cfg)
        lines.append("")
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if not dataclasses.is_dataclass(v):
                lines.append(f"{f.name} = {_format_value(v)}")
    return "\n".join(lines) + "\n"


def write_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_config(cfg))
    return path
