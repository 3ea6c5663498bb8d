"""Experiment directory lifecycle.

Layout under ``<root>/<experiment_name>/``::

    config.json        last configuration used (schema_version 1)
    data/client-<i>/   train.npz, test.npz (indices, features, labels)
    .temp/             logs/ and results/ of the run in progress
    runs/run-<id>/     finalized runs: logs/, results/, config.json

Log files are JSON Lines, one record per line, flushed and fsynced on
every append.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import partition as part
from .data import Dataset, load_dataset
from .model import ModelSpec, TrainConfig
from .params import ParamVector, deserialize, serialize
from .strategies import StrategyConfig

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CONFIG_NAME = "config.json"
TEMP_DIR = ".temp"
DATA_DIR = "data"
RUNS_DIR = "runs"


class StorageError(Exception):
    pass


class CorruptConfigError(StorageError):
    pass


@dataclass
class DatasetConfig:
    name: str = "synthetic"
    # synthetic only
    num_classes: int = 4
    samples_per_class: int = 500
    feature_dim: int = 32
    seed: int = 0

    def to_dict(self) -> dict:
        if self.name != "synthetic":
            return {"name": self.name}
        return {"name": self.name, "num_classes": self.num_classes,
                "samples_per_class": self.samples_per_class,
                "feature_dim": self.feature_dim, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> DatasetConfig:
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def load(self, data_dir: Optional[str] = None) -> Dataset:
        return load_dataset(self.name, data_dir, num_classes=self.num_classes,
                            samples_per_class=self.samples_per_class,
                            feature_dim=self.feature_dim, seed=self.seed)


@dataclass
class ServerSettings:
    address: str = "127.0.0.1:8080"
    min_available_clients: int = 1
    fraction_fit: float = 1.0
    round_timeout: float = 300.0

    def __post_init__(self) -> None:
        if self.min_available_clients < 1:
            raise ValueError("min_available_clients must be >= 1")
        if not 0 < self.fraction_fit <= 1:
            raise ValueError("fraction_fit must lie in (0, 1]")
        if not self.round_timeout > 0:
            raise ValueError("round_timeout must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> ServerSettings:
        return cls(**d)


@dataclass
class ExperimentConfig:
    experiment_name: str
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: part.PartitionSpec = field(default_factory=lambda: part.PartitionSpec(10))
    model: dict = field(default_factory=lambda: {"kind": "logreg", "hidden_dim": 0, "init_seed": 0})
    fl_strategy: StrategyConfig = field(default_factory=StrategyConfig)
    rounds: int = 1
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.01
    seed: int = 0
    server: ServerSettings = field(default_factory=ServerSettings)
    distribution: Optional[dict] = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        if self.rounds < 1 or self.local_epochs < 1:
            raise ValueError("rounds and local_epochs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "experiment_name": self.experiment_name,
            "dataset": self.dataset.to_dict(),
            "partition": self.partition.to_dict(),
            "distribution": self.distribution,
            "model": dict(self.model),
            "fl_strategy": self.fl_strategy.to_dict(),
            "rounds": self.rounds,
            "local_epochs": self.local_epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "server": self.server.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise CorruptConfigError(f"unsupported schema_version {version}")
        return cls(
            experiment_name=d["experiment_name"],
            dataset=DatasetConfig.from_dict(d.get("dataset", {})),
            partition=part.PartitionSpec.from_dict(d["partition"]),
            model=dict(d.get("model", {"kind": "logreg"})),
            fl_strategy=StrategyConfig.from_dict(d.get("fl_strategy", {})),
            rounds=int(d.get("rounds", 1)),
            local_epochs=int(d.get("local_epochs", 1)),
            batch_size=int(d.get("batch_size", 32)),
            learning_rate=float(d.get("learning_rate", 0.01)),
            seed=int(d.get("seed", 0)),
            server=ServerSettings.from_dict(d.get("server", {})),
            distribution=d.get("distribution"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: str | os.PathLike) -> ExperimentConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorruptConfigError(f"{path}: {exc}") from exc

    def data_section(self) -> dict:
        """The part of the config that determines the client data batches."""
        return {"dataset": self.dataset.to_dict(), "partition": self.partition.to_dict()}

    def model_spec(self) -> ModelSpec:
        return ModelSpec.from_dict(self.model)

    def train_config(self, shuffle_seed: int = 0) -> TrainConfig:
        return TrainConfig(self.local_epochs, self.batch_size, self.learning_rate, shuffle_seed)


def write_json_line(path: Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def read_json_lines(path: str | os.PathLike) -> tuple[list[dict], int]:
    """Read a JSONL log; return (records, number of unreadable lines skipped)."""
    records, skipped = [], 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                skipped += 1
    if skipped:
        log.warning("%s: skipped %d malformed line(s)", path, skipped)
    return records, skipped


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class Experiment:
    """Handle on an initialized experiment directory."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._lock = threading.Lock()

    @property
    def config_path(self) -> Path:
        return self.path / CONFIG_NAME

    @property
    def temp(self) -> Path:
        return self.path / TEMP_DIR

    @property
    def data(self) -> Path:
        return self.path / DATA_DIR

    @property
    def runs(self) -> Path:
        return self.path / RUNS_DIR

    @property
    def config(self) -> ExperimentConfig:
        return ExperimentConfig.load(self.config_path)

    def is_initialized(self) -> bool:
        return self.config_path.exists() and self.data.is_dir() and self.temp.is_dir()

    def save_config(self, cfg: ExperimentConfig) -> None:
        _write_atomic(self.config_path, cfg.dumps())

    # data batches

    def client_dir(self, client_id: int) -> Path:
        return self.data / f"client-{client_id}"

    def write_client_data(self, dataset: Dataset, result: part.PartitionResult) -> None:
        if self.data.exists():
            shutil.rmtree(self.data)
        self.data.mkdir()
        for i, split in enumerate(result.clients):
            d = self.client_dir(i)
            d.mkdir()
            for name, idx in (("train", split.train), ("test", split.test)):
                np.savez(d / f"{name}.npz", indices=idx, features=dataset.features[idx],
                         labels=dataset.labels[idx])

    def load_client_data(self, client_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        d = self.client_dir(client_id)
        out = []
        for name in ("train", "test"):
            with np.load(d / f"{name}.npz") as z:
                out += [z["features"], z["labels"]]
        return tuple(out)

    def num_data_clients(self) -> int:
        if not self.data.is_dir():
            return 0
        return sum(1 for p in self.data.iterdir() if p.name.startswith("client-"))

    # logs

    def _log_file(self, *parts: str) -> Path:
        path = self.temp.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def epoch_log(self, client_id: int) -> Path:
        return self._log_file("results", f"client-{client_id}.jsonl")

    def round_log(self) -> Path:
        return self._log_file("logs", "server.jsonl")

    def metrics_log(self, role: str, ident: str) -> Path:
        return self._log_file("logs", f"metrics-{role}-{ident}.jsonl")

    def append_epoch_record(self, client_id: int, record: dict) -> None:
        write_json_line(self.epoch_log(client_id), record)

    def append_round_record(self, record: dict) -> None:
        write_json_line(self.round_log(), record)

    def save_params(self, name: str, params: ParamVector) -> None:
        path = self._log_file("results", "params", f"{name}.bin")
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(serialize(params))
        os.replace(tmp, path)

    # runs

    def run_ids(self) -> list[int]:
        ids = []
        if self.runs.is_dir():
            for p in self.runs.iterdir():
                if p.name.startswith("run-") and p.name[4:].isdigit():
                    ids.append(int(p.name[4:]))
        return sorted(ids)

    def next_run_id(self) -> int:
        ids = self.run_ids()
        return ids[-1] + 1 if ids else 0

    def begin_run(self) -> None:
        """Make sure ``.temp`` is empty, salvaging leftovers of a crashed run."""
        with self._lock:
            if self.temp.is_dir() and any(p.is_file() for p in self.temp.rglob("*")):
                (self.temp / "INCOMPLETE").write_text("salvaged from an interrupted run\n")
                run_id = self._promote_temp()
                log.warning("salvaged leftover .temp into runs/run-%d", run_id)
            self.temp.mkdir(exist_ok=True)

    def _promote_temp(self) -> int:
        run_id = self.next_run_id()
        for sub in ("logs", "results"):
            (self.temp / sub).mkdir(exist_ok=True)
        if self.config_path.exists():
            shutil.copyfile(self.config_path, self.temp / CONFIG_NAME)
        os.rename(self.temp, self.runs / f"run-{run_id}")
        self.temp.mkdir()
        return run_id

    def finalize_run(self) -> int:
        """Move ``.temp`` into ``runs/run-<id>`` with a config snapshot; return the id."""
        with self._lock:
            return self._promote_temp()

    def run_path(self, run_id: int) -> Path:
        return self.runs / f"run-{run_id}"


def init_experiment(root: str | os.PathLike, cfg: ExperimentConfig, data_dir: Optional[str] = None,
                    loader: Optional[Callable[[DatasetConfig], Dataset]] = None) -> Experiment:
    """Create or reuse ``<root>/<name>``; re-partition only when the data section changed.

    Returns a handle whose ``config.json`` has model dimensions and the
    distribution record filled in.
    """
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create experiment root {root}: {exc}") from exc
    if not os.access(root, os.W_OK):
        raise StorageError(f"experiment root {root} is not writable")
    exp = Experiment(root / cfg.experiment_name)
    for d in (exp.path, exp.temp, exp.runs):
        d.mkdir(exist_ok=True)

    previous = ExperimentConfig.load(exp.config_path) if exp.config_path.exists() else None
    # leftovers belong to the previous config; clients only start once the new one is written
    exp.begin_run()
    reuse = (
        previous is not None
        and previous.data_section() == cfg.data_section()
        and previous.distribution is not None
        and exp.num_data_clients() == cfg.partition.num_clients
    )
    model = dict(cfg.model)
    if reuse:
        cfg.distribution = previous.distribution
        model.setdefault("input_dim", previous.model.get("input_dim"))
        model.setdefault("num_classes", previous.model.get("num_classes"))
        log.info("reusing data batches of %s", exp.path)
    else:
        dataset = loader(cfg.dataset) if loader else cfg.dataset.load(data_dir)
        result = part.partition(dataset, cfg.partition)
        exp.write_client_data(dataset, result)
        cfg.distribution = part.describe(result)
        model["input_dim"] = dataset.feature_dim
        model["num_classes"] = dataset.num_classes
        log.info("partitioned %s (%d samples) into %d clients", dataset.name, len(dataset),
                 cfg.partition.num_clients)
    cfg.model = ModelSpec.from_dict(model).to_dict()
    exp.save_config(cfg)
    return exp


def load_params(path: str | os.PathLike) -> ParamVector:
    return deserialize(Path(path).read_bytes())


EPOCH_COLUMNS = ["round", "epoch", "accuracy", "micro_f1", "macro_f1", "weighted_f1", "loss"]
SERVER_COLUMNS = ["round", "accuracy_distributed", "loss_distributed"]


def render_report(run_path: str | os.PathLike, out_dir: str | os.PathLike) -> list[Path]:
    """Write per-client epoch series and the server round series as CSV files."""
    run_path, out_dir = Path(run_path), Path(out_dir)
    if not (run_path / "logs" / "server.jsonl").exists():
        raise StorageError(f"{run_path} is not a finished run (no logs/server.jsonl)")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for log_file in sorted((run_path / "results").glob("client-*.jsonl"),
                           key=lambda p: int(p.stem.split("-")[1])):
        records, _ = read_json_lines(log_file)
        records.sort(key=lambda r: (r["round"], r["epoch"]))
        target = out_dir / f"{log_file.stem}.csv"
        with open(target, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EPOCH_COLUMNS)
            for r in records:
                w.writerow([r[c] for c in EPOCH_COLUMNS])
        written.append(target)
    records, _ = read_json_lines(run_path / "logs" / "server.jsonl")
    target = out_dir / "server.csv"
    with open(target, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SERVER_COLUMNS)
        for r in records:
            w.writerow(["" if r.get(c) is None else r[c] for c in SERVER_COLUMNS])
    written.append(target)
    return written
