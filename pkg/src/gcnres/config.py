"""Experiment configuration files.

Flat ``key = value`` text grouped under ``[section]`` headers.  Booleans are
``true``/``false`` and lists are comma separated.  Unknown sections or keys
are rejected; :func:`dumps` writes every key so that a parse/serialize cycle
is a fixed point.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParseError, ValidationError


@dataclass
class DatasetSection:
    source: str = "sbm"  # sbm | file | edge_list
    path: str = ""
    block_sizes: list[int] = field(default_factory=lambda: [200, 200])
    p_in: float = 0.1
    p_out: float = 0.01
    feature_dim: int = 16
    feature_signal: float = 0.5
    seed: int = 0
    edge_list: str = ""
    num_nodes: int = 0
    features: str = ""
    labels: str = ""
    num_classes: int = 0
    train_split: str = ""
    valid_split: str = ""
    test_split: str = ""
    metric: str = "accuracy"


@dataclass
class ModelSection:
    type: str = "gcn_res"  # gcn_res | gcn
    layers: int = 3
    hidden_dim: int = 64
    alpha: float = 0.2
    beta: float = 0.7
    dropout: float = 0.5
    norm: str = "batch"
    pre_activated: bool = False
    aggregation: str = "softmax_layer"
    aggregation_weights: str = "scalar"
    learnable_residual: bool = False


@dataclass
class TrainingSection:
    epochs: int = 200
    lr: float = 0.01
    weight_decay: float = 0.0
    sampler: str = "full_batch"  # full_batch | random_subgraph | neighbor | saint
    batch_nodes: int = 0
    fanouts: list[int] = field(default_factory=list)
    saint_walk_length: int = 2
    early_stop_patience: int = 0


@dataclass
class TricksSection:
    embedding: bool = False
    embedding_file: str = ""
    merge: str = "concat"
    cs: str = "none"  # none | v2 | v3
    cs_alpha1: float = 0.8
    cs_iters1: int = 50
    cs_scale: str = "autoscale"  # autoscale or a fixed number
    cs_alpha2: float = 0.8
    cs_iters2: int = 50
    flag: bool = False
    flag_steps: int = 3
    flag_step_size: float = 1e-3
    flag_raw_only: bool = False
    label_usage: bool = False
    label_usage_recycle: int = 0


@dataclass
class EmbeddingSection:
    p: float = 1.0
    q: float = 1.0
    walk_length: int = 40
    walks_per_node: int = 10
    dim: int = 16
    window: int = 5
    negatives: int = 5
    epochs: int = 1
    lr: float = 0.025
    seed: int = 0


@dataclass
class ExperimentSection:
    name: str = "experiment"
    seeds: list[int] = field(default_factory=lambda: list(range(10)))


@dataclass
class AblationSection:
    rows: list[str] = field(default_factory=list)


SECTIONS = {
    "experiment": ExperimentSection,
    "dataset": DatasetSection,
    "model": ModelSection,
    "training": TrainingSection,
    "tricks": TricksSection,
    "embedding": EmbeddingSection,
    "ablation": AblationSection,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    tricks: TricksSection = field(default_factory=TricksSection)
    embedding: EmbeddingSection = field(default_factory=EmbeddingSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    base_dir: str = field(default=".", compare=False, repr=False)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def validate(self):
        d, m, t, k = self.dataset, self.model, self.training, self.tricks
        _choice("dataset.source", d.source, ("sbm", "file", "edge_list"))
        _choice("dataset.metric", d.metric, ("accuracy", "rocauc"))
        _choice("model.type", m.type, ("gcn_res", "gcn"))
        _choice("model.norm", m.norm, ("batch", "layer", "none"))
        _choice("model.aggregation", m.aggregation, ("softmax_layer", "last_layer"))
        _choice("model.aggregation_weights", m.aggregation_weights, ("scalar", "vector"))
        _choice("training.sampler", t.sampler, ("full_batch", "random_subgraph", "neighbor", "saint"))
        _choice("tricks.merge", k.merge, ("concat", "sum"))
        _choice("tricks.cs", k.cs, ("none", "v2", "v3"))
        if k.cs_scale != "autoscale":
            try:
                float(k.cs_scale)
            except ValueError:
                raise ValidationError("tricks.cs_scale must be 'autoscale' or a number") from None
        if m.layers < 1:
            raise ValidationError("model.layers must be >= 1")
        if t.epochs < 1:
            raise ValidationError("training.epochs must be >= 1")
        if t.lr <= 0:
            raise ValidationError("training.lr must be positive")
        if t.sampler == "neighbor" and len(t.fanouts) != m.layers:
            raise ValidationError("training.fanouts needs one entry per model layer")
        if not self.experiment.seeds:
            raise ValidationError("experiment.seeds must not be empty")

    def check_files(self):
        d = self.dataset
        paths = []
        if d.source == "file":
            paths.append(d.path)
        elif d.source == "edge_list":
            paths += [d.edge_list, d.features, d.labels, d.train_split, d.valid_split, d.test_split]
        if self.tricks.embedding_file:
            paths.append(self.tricks.embedding_file)
        for p in paths:
            if not p or not self.resolve(p).exists():
                raise ValidationError(f"referenced file does not exist: {p!r}")


def _choice(name, value, options):
    if value not in options:
        raise ValidationError(f"{name} must be one of {options}, got {value!r}")


def _parse_value(raw: str, tp, where: str):
    raw = raw.strip()
    try:
        if tp is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true/false, got {raw!r}")
            return low == "true"
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is list:
            (inner,) = typing.get_args(tp)
            if not raw:
                return []
            return [_parse_value(x, inner, where) for x in raw.split(",")]
    except ValueError as exc:
        raise ParseError(f"{where}: {exc}") from None
    raise TypeError(f"unsupported config type {tp}")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def loads(text: str, base_dir=".", check_files: bool = False) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True,
                                       comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.DuplicateSectionError as exc:
        raise ValidationError(f"section [{exc.section}] appears more than once") from None
    except configparser.Error as exc:
        raise ParseError(str(exc).splitlines()[0]) from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")
    if "model" not in parser.sections():
        raise ValidationError("config needs exactly one [model] section")
    parts = {}
    for name, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in hints:
                    raise ValidationError(f"unknown key [{name}] {key}")
                values[key] = _parse_value(raw, hints[key], f"[{name}] {key}")
        parts[name] = cls(**values)
    cfg = ExperimentConfig(**parts, base_dir=str(base_dir))
    cfg.validate()
    if check_files:
        cfg.check_files()
    return cfg


def load(path, check_files: bool = True) -> ExperimentConfig:
    path = Path(path)
    return loads(path.read_text(), base_dir=path.parent, check_files=check_files)


def dumps(cfg: ExperimentConfig) -> str:
    lines = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}".rstrip())
        lines.append("")
    return "\n".join(lines)
