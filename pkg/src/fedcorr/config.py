"""Experiment configuration: schema, defaults, validation and JSON loading.

A config file is a single JSON object whose keys are the field names of
:class:`ExperimentConfig`. Omitted keys take their defaults; unknown keys are
rejected. An empty (or whitespace-only) file means "all defaults". The
optional key ``"_meta"`` is ignored on load; the CLI uses it to stamp emitted
configs with their seed and hash.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

ABLATION_FLAGS = (
    "no_correction",
    "no_fraction_scheduling",
    "no_proximal",
    "no_finetuning",
    "no_usual_training",
    "no_mixup",
)


@dataclass
class ExperimentConfig:
    # dataset
    dataset: str = "blobs"  # "blobs" | "csv"
    csv_path: str | None = None
    csv_test_fraction: float = 0.2
    n_classes: int = 5
    dim: int = 20
    cluster_std: float = 1.0
    class_center_scale: float = 10.0
    samples_per_client: int = 200
    n_test: int = 1000
    standardize: bool = True
    # federation
    n_clients: int = 20
    fraction: float = 0.1
    partition: str = "iid"  # "iid" | "noniid"
    p: float = 0.7
    alpha_dir: float = 10.0
    rho: float = 0.6
    tau: float = 0.5
    # model and local optimiser
    model: str = "mlp"  # "mlp" | "softmax"
    hidden: int = 64
    learning_rate: float = 0.03
    local_epochs: int = 5
    batch_size: int = 10
    momentum: float = 0.5
    # stages
    t1: int = 5
    t2: int = 50
    t3: int = 50
    lid_k: int = 20
    mixup_alpha: float = 1.0
    prox_beta: float = 5.0
    theta: float = 0.5
    pi: float = 0.5
    kappa: float = 0.1
    no_correction: bool = False
    no_fraction_scheduling: bool = False
    no_proximal: bool = False
    no_finetuning: bool = False
    no_usual_training: bool = False
    no_mixup: bool = False
    stage1_parallel: bool = False
    fedavg_rounds: int | None = None
    # run
    mode: str = "fedcorr"  # "fedcorr" | "fedavg"
    seed: int = 0
    output_dir: str = "results"

    def validate(self) -> "ExperimentConfig":
        def fail(key, msg):
            raise ConfigError(f"{key}: {msg}", key=key)

        for name in ("rho", "p", "theta", "pi", "kappa"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                fail(name, f"must lie in [0, 1], got {v}")
        if not 0.0 <= self.tau < 1.0:
            fail("tau", f"must lie in [0, 1), got {self.tau}")
        if not 0.0 < self.fraction <= 1.0:
            fail("fraction", f"must lie in (0, 1], got {self.fraction}")
        if self.partition == "noniid" and self.p <= 0:
            fail("p", "must be positive for a non-IID partition")
        if not 0.0 < self.csv_test_fraction < 1.0:
            fail("csv_test_fraction", "must lie in (0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            fail("momentum", f"must lie in [0, 1), got {self.momentum}")
        for name in ("n_classes", "dim", "samples_per_client", "n_test", "n_clients", "hidden",
                     "batch_size", "lid_k"):
            if getattr(self, name) < 1:
                fail(name, "must be a positive integer")
        for name in ("t1", "t2", "t3", "local_epochs"):
            if getattr(self, name) < 0:
                fail(name, "must be non-negative")
        if self.fedavg_rounds is not None and self.fedavg_rounds < 0:
            fail("fedavg_rounds", "must be non-negative")
        for name in ("learning_rate", "class_center_scale", "alpha_dir"):
            if not getattr(self, name) > 0:
                fail(name, "must be positive")
        for name in ("cluster_std", "mixup_alpha", "prox_beta"):
            if getattr(self, name) < 0:
                fail(name, "must be non-negative")
        if self.dataset not in ("blobs", "csv"):
            fail("dataset", f"must be 'blobs' or 'csv', got {self.dataset!r}")
        if self.dataset == "csv" and not self.csv_path:
            fail("csv_path", "required when dataset is 'csv'")
        if self.partition not in ("iid", "noniid"):
            fail("partition", f"must be 'iid' or 'noniid', got {self.partition!r}")
        if self.model not in ("mlp", "softmax"):
            fail("model", f"must be 'mlp' or 'softmax', got {self.model!r}")
        if self.mode not in ("fedcorr", "fedavg"):
            fail("mode", f"must be 'fedcorr' or 'fedavg', got {self.mode!r}")
        if self.fraction * self.n_clients < 1 - 1e-12:
            fail("fraction", "fraction * n_clients must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """First 16 hex digits of SHA-256 over the sorted-key JSON of every field but ``output_dir``."""
        data = self.to_dict()
        del data["output_dir"]  # where results go does not change what they are
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key, value):
    default = _FIELDS[key].default
    kind = _FIELDS[key].type
    if value is None:
        if "None" in str(kind):
            return None
        raise ConfigError(f"{key}: null is not allowed", key=key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}", key=key)
        return value
    if isinstance(default, int) or "int" in str(kind):
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigError(f"{key}: expected an integer, got {value!r}", key=key)
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{key}: expected a finite number, got {value!r}", key=key)
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}", key=key)
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    kwargs = {}
    for key, value in data.items():
        if key == "_meta":
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        kwargs[key] = _coerce(key, value)
    return ExperimentConfig(**kwargs).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return ExperimentConfig().validate()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data)


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    data = cfg.to_dict()
    data.update(overrides)
    return config_from_dict(data)
