"""Declarative experiment description with field-level validation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .codec import Algorithm, QuantMode
from .data import PartitionSpec
from .distill import DistillConfig
from .errors import ConfigError, ProfeError

ALGORITHMS = {"profe": Algorithm.PROFE, "fedavg": Algorithm.FEDAVG, "fedproto": Algorithm.FEDPROTO}
QUANT_MODES = {"f16": QuantMode.FLOAT16, "i16": QuantMode.INT16_AFFINE, "none": QuantMode.FLOAT32}
DATASETS = ("mnist", "blobs")


@dataclass
class ExperimentConfig:
    algorithm: str = "profe"
    dataset: str = "mnist"
    data_dir: str | None = None
    subset: int | None = 6000
    nodes: int = 5
    topology: str = "full"
    rounds: int = 10
    epochs: int = 1
    partition: str = "iid"
    test_fraction: float = 0.10
    local_train_fraction: float = 0.80
    # architectures: input -> hidden... -> repr_width -> classes
    teacher_hidden: list[int] = field(default_factory=lambda: [256])
    student_hidden: list[int] = field(default_factory=lambda: [128])
    repr_width: int = 64
    temperature: float = 2.0
    alpha_s: float = 1.0
    beta_s: float = 1.0  # also FedProto's prototype weight
    beta_t: float = 1.0
    beta_limit: float = 0.1
    divide_protos_by_nodes: bool = False
    quant: str = "f16"
    lr: float = 0.05
    batch_size: int = 8
    seed: int = 0
    sequential: bool = False
    workers: int = 4
    timing: bool = True
    out: str | None = None
    # synthetic data shape (dataset == "blobs")
    blob_classes: int = 10
    blob_per_class: int = 200
    blob_dim: int = 32
    blob_spread: float = 0.15

    def __post_init__(self):
        self.validate()

    # -- derived views ---------------------------------------------------
    @property
    def algo(self) -> Algorithm:
        return ALGORITHMS[self.algorithm]

    @property
    def quant_mode(self) -> QuantMode:
        return QUANT_MODES[self.quant]

    @property
    def distill(self) -> DistillConfig:
        return DistillConfig(self.temperature, self.alpha_s, self.beta_s, self.beta_t, self.beta_limit)

    @property
    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec.parse(self.partition, self.nodes, self.seed)

    # -- validation ------------------------------------------------------
    def validate(self) -> None:
        def bad(name, msg):
            raise ConfigError(f"{name}: {msg} (got {getattr(self, name)!r})")

        if self.algorithm not in ALGORITHMS:
            bad("algorithm", f"must be one of {sorted(ALGORITHMS)}")
        if self.dataset not in DATASETS:
            bad("dataset", f"must be one of {list(DATASETS)}")
        if self.quant not in QUANT_MODES:
            bad("quant", f"must be one of {sorted(QUANT_MODES)}")
        if self.topology != "full":
            bad("topology", "only the full mesh ('full') is supported")
        for name in ("nodes", "rounds", "epochs", "repr_width", "batch_size", "workers",
                     "blob_classes", "blob_per_class", "blob_dim"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                bad(name, "must be a positive integer")
        if self.nodes > 0xFFFF:
            bad("nodes", "at most 65535 nodes fit the wire format")
        if self.subset is not None and (not isinstance(self.subset, int) or self.subset < 2):
            bad("subset", "must be an integer >= 2 or null")
        if not 0 < self.test_fraction < 1:
            bad("test_fraction", "must lie in (0, 1)")
        if not 0 < self.local_train_fraction <= 1:
            bad("local_train_fraction", "must lie in (0, 1]")
        if self.lr < 0:
            bad("lr", "must be non-negative")
        if self.blob_spread < 0:
            bad("blob_spread", "must be non-negative")
        for name in ("teacher_hidden", "student_hidden"):
            v = getattr(self, name)
            if not isinstance(v, (list, tuple)) or not all(isinstance(w, int) and w > 0 for w in v):
                bad(name, "must be a list of positive integers")
        try:
            self.distill
            self.partition_spec
        except ProfeError as exc:
            raise ConfigError(str(exc)) from None

    # -- (de)serialization -----------------------------------------------
    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**values)

    @classmethod
    def from_json(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        values.update(overrides or {})
        return cls.from_dict(values)

    def to_dict(self) -> dict:
        return asdict(self)
