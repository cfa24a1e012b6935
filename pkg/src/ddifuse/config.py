"""Experiment configuration: INI file with sections, every key defaulted and validated.

Example::

    [split]
    regime = node

    [student]
    lr = 0.5

Unknown sections or keys are rejected. Relative paths resolve against the
directory holding the config file.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigError
from .synth import WorldSpec

MODEL_NAMES = ("teacher", "student", "feature_mlp", "kg_distmult", "concat_mlp")
DETECTORS = ("max_logit", "binary_head")


@dataclass(frozen=True)
class DataConfig:
    triples: str = ""          # empty: generate a synthetic world from [world]
    kg_embeddings: str = ""    # optional pretrained entity vectors
    features: str = ""
    alt_features: str = ""     # second per-drug table for the concat baseline
    vocabulary: str = ""


@dataclass(frozen=True)
class WorldConfig:
    num_drugs: int = 500
    num_relations: int = 10
    latent_dim: int = 8
    feature_dim: int = 32
    feature_noise_sigma: float = 0.3
    edge_threshold: float = 10.0
    alt_feature_dim: int = 0
    alt_noise_sigma: float = 1.0
    seed: int = 0

    def spec(self) -> WorldSpec:
        return WorldSpec(**dataclasses.asdict(self))


@dataclass(frozen=True)
class SplitConfig:
    regime: str = "node"
    train_frac: float = 0.8
    test_frac: float = 0.1
    merge_inverse: bool = False  # drop (t, r, h) when (h, r, t) is present, before splitting


@dataclass(frozen=True)
class NegativesConfig:
    k_train: int = 2
    k_valid: int = 10
    k_test: int = 10


@dataclass(frozen=True)
class TeacherConfig:
    dim: int = 64
    gate_hidden: int = 0       # 0: same as dim
    lr: float = 0.001
    epochs: int = 10
    batch_size: int = 1024
    optimizer: str = "adam"
    normalize_features: bool = False
    entity_init: bool = False  # start from [data] kg_embeddings (training drugs only)
    freeze_entities: bool = False


@dataclass(frozen=True)
class StudentConfig:
    alpha: float = 0.5
    tau: float = 1.0
    lr: float = 0.1
    weight_decay: float = 1e-4
    batch_size: int = 1024
    epochs: int = 30
    hidden: int = 128
    optimizer: str = "sgd"
    pair_mode: str = "concat"
    normalize: bool = True
    negative_label: str = "zeros"
    kd_mode: str = "bce"


@dataclass(frozen=True)
class EvalConfig:
    target_tpr: float = 0.90
    detector: str = "max_logit"   # or "binary_head": logistic regression over the model's logits
    bootstrap_iterations: int = 1000
    models: tuple = ("teacher", "student", "feature_mlp", "kg_distmult")


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple = ()          # empty: (0, 1, 2) for node hold-out, (0,) for edge hold-out
    output_dir: str = "runs"


_SECTIONS = {"data": DataConfig, "world": WorldConfig, "split": SplitConfig,
             "negatives": NegativesConfig, "teacher": TeacherConfig, "student": StudentConfig,
             "eval": EvalConfig, "run": RunConfig}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    negatives: NegativesConfig = field(default_factory=NegativesConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)

    @property
    def synthetic(self) -> bool:
        return not self.data.triples

    @property
    def seed_list(self) -> tuple:
        if self.run.seeds:
            return tuple(self.run.seeds)
        return (0, 1, 2) if self.split.regime == "node" else (0,)

    def validate(self) -> "ExperimentConfig":
        """Check every field; raises :class:`ConfigError` on the first problem."""
        s = self.split
        if s.regime not in ("node", "edge"):
            raise ConfigError(f"split.regime must be 'node' or 'edge', got {s.regime!r}")
        for name in ("train_frac", "test_frac"):
            v = getattr(s, name)
            if not (0.0 < v <= 1.0):
                raise ConfigError(f"split.{name} must lie in (0, 1], got {v}")
        if s.train_frac + s.test_frac > 1.0 + 1e-12:
            raise ConfigError("split.train_frac + split.test_frac exceeds 1")
        for name in ("k_train", "k_valid", "k_test"):
            if getattr(self.negatives, name) < 1:
                raise ConfigError(f"negatives.{name} must be >= 1")
        t, st = self.teacher, self.student
        for sec, name in (("teacher", "dim"), ("teacher", "epochs"), ("teacher", "batch_size"),
                          ("student", "hidden"), ("student", "epochs"), ("student", "batch_size")):
            if getattr(getattr(self, sec), name) < 1:
                raise ConfigError(f"{sec}.{name} must be >= 1")
        if t.gate_hidden < 0:
            raise ConfigError("teacher.gate_hidden must be >= 0")
        for sec, obj in (("teacher", t), ("student", st)):
            if obj.lr <= 0:
                raise ConfigError(f"{sec}.lr must be > 0")
            if obj.optimizer not in ("sgd", "adam"):
                raise ConfigError(f"{sec}.optimizer must be 'sgd' or 'adam'")
        if not (0.0 <= st.alpha <= 1.0):
            raise ConfigError(f"student.alpha must lie in [0, 1], got {st.alpha}")
        if st.tau <= 0:
            raise ConfigError(f"student.tau must be > 0, got {st.tau}")
        if st.weight_decay < 0:
            raise ConfigError("student.weight_decay must be >= 0")
        if st.pair_mode not in ("concat", "extended"):
            raise ConfigError(f"student.pair_mode must be 'concat' or 'extended', got {st.pair_mode!r}")
        if st.negative_label not in ("zeros", "none"):
            raise ConfigError("student.negative_label must be 'zeros' or 'none'")
        if st.kd_mode not in ("bce", "kl"):
            raise ConfigError("student.kd_mode must be 'bce' or 'kl'")
        e = self.eval
        if not (0.0 < e.target_tpr <= 1.0):
            raise ConfigError(f"eval.target_tpr must lie in (0, 1], got {e.target_tpr}")
        if e.detector not in DETECTORS:
            raise ConfigError(f"eval.detector must be one of {', '.join(DETECTORS)}, got {e.detector!r}")
        if e.bootstrap_iterations < 100:
            raise ConfigError("eval.bootstrap_iterations must be >= 100")
        if not e.models:
            raise ConfigError("eval.models is empty")
        for m in e.models:
            if m not in MODEL_NAMES:
                raise ConfigError(f"unknown model {m!r}; choose from {', '.join(MODEL_NAMES)}")
        if "student" in e.models and "teacher" not in e.models:
            raise ConfigError("the student needs the teacher in eval.models")
        if "concat_mlp" in e.models and not (self.data.alt_features or
                                              (self.synthetic and self.world.alt_feature_dim > 0)):
            raise ConfigError("concat_mlp needs data.alt_features or world.alt_feature_dim > 0")
        if self.synthetic:
            try:
                self.world.spec().validate()
            except ConfigError as exc:
                raise ConfigError(f"world: {exc}") from None
        else:
            if not self.data.features:
                raise ConfigError("data.features is required with data.triples")
            for name in ("triples", "kg_embeddings", "features", "alt_features", "vocabulary"):
                p = getattr(self.data, name)
                if p and not Path(p).exists():
                    raise ConfigError(f"data.{name}: file not found: {p}")
        if t.entity_init and not self.data.kg_embeddings:
            raise ConfigError("teacher.entity_init needs data.kg_embeddings")
        if t.freeze_entities and not t.entity_init:
            raise ConfigError("teacher.freeze_entities needs teacher.entity_init")
        if len(set(self.seed_list)) != len(self.seed_list):
            raise ConfigError("run.seeds has duplicates")
        return self

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def config_hash(self) -> str:
        """sha256 of the canonical JSON form; output paths are excluded."""
        d = self.to_dict()
        d["run"] = {k: v for k, v in d["run"].items() if k != "output_dir"}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=list)
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """``cfg.with_overrides(student={"lr": 0.5})`` returns a modified copy."""
        changes = {}
        for sec, kv in sections.items():
            if sec not in _SECTIONS:
                raise ConfigError(f"unknown section {sec!r}")
            current = getattr(self, sec)
            try:
                changes[sec] = dataclasses.replace(current, **kv)
            except TypeError as exc:
                raise ConfigError(f"[{sec}] {exc}") from None
        return dataclasses.replace(self, **changes)

    def to_ini(self) -> str:
        lines = []
        for sec, values in self.to_dict().items():
            lines.append(f"[{sec}]")
            for k, v in values.items():
                if isinstance(v, (list, tuple)):
                    v = ", ".join(str(x) for x in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def _convert(section: str, f: dataclasses.Field, raw: str):
    default = f.default
    where = f"[{section}] {f.name}"
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(int(x) for x in items) if f.name == "seeds" else tuple(items)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})") from None
    return raw.strip()


def load_config(path=None, text: str | None = None) -> ExperimentConfig:
    """Parse an INI config (from ``path`` or ``text``) and validate it."""
    parser = configparser.ConfigParser(interpolation=None)
    base = Path(".")
    try:
        if text is not None:
            parser.read_string(text)
        elif path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            parser.read(p, encoding="utf-8")
            base = p.parent
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = {}
    for sec in parser.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        cls = _SECTIONS[sec]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kv = {}
        for key, raw in parser.items(sec):
            if key not in fields:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            kv[key] = _convert(sec, fields[key], raw)
        if cls is DataConfig:
            kv = {k: (os.path.normpath(base / v) if v and not Path(v).is_absolute() else v) for k, v in kv.items()}
        if cls is RunConfig and kv.get("output_dir") and not Path(kv["output_dir"]).is_absolute():
            kv["output_dir"] = os.path.normpath(base / kv["output_dir"])
        sections[sec] = cls(**kv)
    return ExperimentConfig(**sections).validate()
