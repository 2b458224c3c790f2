"""Run configuration: one flat ``section.key = value`` text file.

Lines starting with ``#`` are comments.  Values are parsed according to the
type of the field's default.  Command-line ``--set key=value`` overrides are
applied on top of the file before anything is validated or digested.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .datagen import CorpusConfig
from .doll import PipelineConfig
from .errors import ConfigError
from .formats import digest
from .models import SEG_ARCHS, TrainConfig
from .training import FinetuneConfig


@dataclass
class DownstreamConfig:
    # "name:obs[,obs...]" entries separated by spaces
    tasks: str = "lesion:2 anatomy:0,1"
    shots: int = 20
    n_val: int = 40
    n_test: int = 200
    seed: int = 1000
    prevalence: float = 0.8

    def task_map(self) -> dict:
        out = {}
        for item in self.tasks.split():
            name, _, obs = item.partition(":")
            try:
                ids = tuple(int(v) for v in obs.split(","))
            except ValueError:
                raise ConfigError("downstream.tasks", f"bad task entry {item!r}") from None
            if not name or not ids or name in out:
                raise ConfigError("downstream.tasks", f"bad task entry {item!r}")
            out[name] = ids
        if not out:
            raise ConfigError("downstream.tasks", "at least one task required")
        return out

    def validate(self, n_observations: int):
        for name, ids in self.task_map().items():
            if any(not 0 <= i < n_observations for i in ids):
                raise ConfigError("downstream.tasks", f"task {name} refers to a missing observation")
        for key in ("shots", "n_val", "n_test"):
            if getattr(self, key) < 1:
                raise ConfigError(f"downstream.{key}", "must be positive")
        if not 0 < self.prevalence < 1:
            raise ConfigError("downstream.prevalence", "must lie in (0, 1)")
        return self

    def corpus_config(self, base: CorpusConfig) -> CorpusConfig:
        d = base.to_dict()
        d.update(n_train=self.shots, n_val=self.n_val, n_test=self.n_test, seed=self.seed,
                 prevalence=self.prevalence)
        return CorpusConfig(**d)


@dataclass
class SegConfig:
    arch: str = "unet-m"
    pretrain_images: int = 0      # 0 = every train image gets DoLL-labelled

    def validate(self):
        if self.arch not in SEG_ARCHS:
            raise ConfigError("seg.arch", f"unknown segmentation arch {self.arch!r}")
        return self


@dataclass
class RunSection:
    id: str = "default"
    dir: str = ""
    jobs: int = 1


def _default_classifier_cfg():
    return TrainConfig(epochs=10, learning_rate=0.01, batch_size=32)


def _default_pretrain_cfg():
    return TrainConfig(epochs=10, learning_rate=0.01, batch_size=16, flip=True)


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    classifier: TrainConfig = field(default_factory=_default_classifier_cfg)
    pretrain: TrainConfig = field(default_factory=_default_pretrain_cfg)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    seg: SegConfig = field(default_factory=SegConfig)
    run: RunSection = field(default_factory=RunSection)

    SECTIONS = ("corpus", "pipeline", "classifier", "pretrain", "finetune", "downstream", "seg", "run")

    def validate(self) -> "RunConfig":
        self.corpus.validate()
        self.pipeline.validate()
        self.classifier.validate("classifier")
        self.pretrain.validate("pretrain")
        self.finetune.validate()
        self.downstream.validate(self.corpus.n_observations)
        self.seg.validate()
        if self.run.jobs < 1:
            raise ConfigError("run.jobs", "must be >= 1")
        return self

    def to_flat(self) -> dict:
        out = {}
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                val = getattr(obj, f.name)
                if sec == "corpus" and f.name == "shape_palette":
                    val = obj.palette
                if sec == "corpus" and f.name == "observation_names":
                    val = obj.names
                out[f"{sec}.{f.name}"] = list(val) if isinstance(val, tuple) else val
        return out

    def digest(self, exclude=("run.id", "run.dir", "run.jobs")) -> str:
        return digest({k: v for k, v in self.to_flat().items() if k not in exclude})

    def section_digest(self, sections) -> str:
        """Digest over the listed sections only (what one pipeline step depends on)."""
        return digest({k: v for k, v in self.to_flat().items() if k.split(".")[0] in sections})

    def run_dir(self) -> Path:
        root = self.run.dir or os.environ.get("DOLL_RUN_DIR") or "runs"
        return Path(root) / self.run.id

    def dump(self) -> str:
        lines = []
        for key, val in self.to_flat().items():
            if isinstance(val, list):
                val = ",".join(str(v) for v in val)
            elif isinstance(val, bool):
                val = "on" if val else "off"
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"


def _parse_value(key, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "on", "yes"):
                return True
            if low in ("0", "false", "off", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple) or default is None:
            return tuple(v.strip() for v in raw.split(",") if v.strip()) if raw else None
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None


def apply_overrides(cfg: RunConfig, pairs: dict) -> RunConfig:
    for key, raw in pairs.items():
        sec, _, name = key.partition(".")
        if sec not in RunConfig.SECTIONS:
            raise ConfigError(key, "unknown config section")
        obj = getattr(cfg, sec)
        if name not in {f.name for f in fields(obj)}:
            raise ConfigError(key, "unknown config key")
        default = getattr(obj, name)
        if name in ("shape_palette", "observation_names", "archs"):
            default = ()
        setattr(obj, name, _parse_value(key, str(raw), default))
    return cfg


def parse_pairs(lines) -> dict:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}", f"expected key = value, got {line!r}")
        out[key.strip()] = val.strip()
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError("config", f"config file not found: {p}")
        apply_overrides(cfg, parse_pairs(p.read_text(encoding="utf-8").splitlines()))
    if overrides:
        apply_overrides(cfg, overrides)
    cfg.corpus.__post_init__()
    cfg.pipeline.__post_init__()
    return cfg.validate()
