"""Training loop with plug-in filter scheduling, telemetry, and checkpoints.

The filter is inert (identity, parameters untouched) before plugin_epoch and
trains jointly from then on. All randomness is derived from (seed, purpose,
epoch), so a run resumed from a checkpoint continues bit-identically to an
uninterrupted one.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from . import evaluation
from .data import Dataset, Vocabulary
from .errors import ChecksumMismatch, DivergedLoss, VersionMismatch
from .models import ModelSpec
from .objectives import (
    LossConfig,
    build_store,
    optimizer_step,
    sample_negatives,
    total_objective,
)
from .tensor import ParameterStore, Rng, fnv1a
from .transforms import FilterSpec

CHECKPOINT_MAGIC = b"RSCFCKP1"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    model: ModelSpec
    filter: FilterSpec
    loss: LossConfig
    epochs: int
    lr: float = 0.1
    batch_size: int = 512
    seed: int = 0
    plugin_epoch: int = 0
    optimizer: str = "adagrad"
    validate: bool = False
    validate_every: int = 5
    scale_telemetry: bool = True
    telemetry_sample: int = 512
    init_scheme: str = "gaussian"
    init_scale: float = 1e-3
    precision: str = "f64"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.plugin_epoch:
            raise ValueError("plugin_epoch must be >= 0")
        if self.plugin_epoch > self.epochs:
            raise ValueError("plugin_epoch must be <= epochs")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.validate_every < 1 or self.telemetry_sample < 1:
            raise ValueError("counts must be >= 1")
        if self.precision not in ("f64", "f32"):
            raise ValueError("precision must be f64 or f32")
        if self.model.is_tdm:
            if self.loss.task != "cross_entropy":
                raise ValueError("tensor models train with cross_entropy")
            if self.filter.apply_to != "head_only":
                raise ValueError("tensor models apply the filter to the head only")
        else:
            if self.loss.task != "self_adversarial":
                raise ValueError("distance models train with self_adversarial")
            if self.loss.dura_weight > 0:
                raise ValueError("the duality regularizer is tensor-model only")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def to_dict(self) -> dict:
        return {
            "model": {
                "kind": self.model.kind,
                "dim": self.model.dim,
                "distance_p": self.model.distance_p,
                "gamma": self.model.gamma,
            },
            "filter": {
                "kind": self.filter.kind,
                "p": self.filter.p,
                "apply_to": self.filter.apply_to,
                "rt_enabled": self.filter.rt_enabled,
                "zero_change_epsilon": self.filter.zero_change_epsilon,
                "linear2_add_one": self.filter.linear2_add_one,
            },
            "loss": {
                "task": self.loss.task,
                "rp_weight": self.loss.rp_weight,
                "dura_weight": self.loss.dura_weight,
                "negatives": self.loss.negatives,
                "adv_temperature": self.loss.adv_temperature,
                "margin": self.loss.margin,
            },
            "epochs": self.epochs,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "plugin_epoch": self.plugin_epoch,
            "optimizer": self.optimizer,
            "validate": self.validate,
            "validate_every": self.validate_every,
            "scale_telemetry": self.scale_telemetry,
            "telemetry_sample": self.telemetry_sample,
            "init_scheme": self.init_scheme,
            "init_scale": self.init_scale,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            model=ModelSpec(**d["model"]),
            filter=FilterSpec(**d["filter"]),
            loss=LossConfig(**d["loss"]),
            **{k: v for k, v in d.items() if k not in ("model", "filter", "loss")},
        )


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    valid_mrr: float | None = None
    transformation_scale: float | None = None
    rt_scale: float | None = None
    embedding_scale: float | None = None


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)

    _FIELDS = ("epoch", "loss", "valid_mrr", "transformation_scale",
               "rt_scale", "embedding_scale")

    def to_json_dict(self) -> dict:
        return {"epochs": [
            {k: getattr(r, k) for k in self._FIELDS} for r in self.records
        ]}

    def to_csv(self) -> str:
        def _fmt(v):
            if v is None:
                return ""
            return repr(v) if isinstance(v, float) else v

        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(self._FIELDS)
        for r in self.records:
            writer.writerow([_fmt(getattr(r, k)) for k in self._FIELDS])
        return out.getvalue()


@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    vocabulary: Vocabulary
    store: ParameterStore
    epoch: int

    @property
    def model(self) -> ModelSpec:
        return self.config.model

    @property
    def filter(self) -> FilterSpec:
        return self.config.filter


@dataclass
class TrainState:
    store: ParameterStore
    dataset: Dataset
    config: TrainConfig
    epoch: int
    train_arr: np.ndarray

    @property
    def filter_active(self) -> bool:
        return self.epoch >= self.config.plugin_epoch


def train_epoch(state: TrainState) -> EpochRecord:
    """One pass over a seeded shuffle of the train split; the recorded loss is
    the objective at pre-step parameters, summed over batches."""
    cfg = state.config
    n = state.train_arr.shape[0]
    ep_rng = Rng(cfg.seed).derive("epoch").derive(state.epoch)
    perm = ep_rng.derive("shuffle").generator().permutation(n)
    active = state.filter_active
    num_entities = state.store.meta["num_entities"]
    total = 0.0
    for batch_index, lo in enumerate(range(0, n, cfg.batch_size)):
        rows = state.train_arr[perm[lo : lo + cfg.batch_size]]
        negatives = None
        if cfg.model.is_dbm:
            negatives = sample_negatives(
                rows, num_entities, cfg.loss.negatives,
                ep_rng.derive("negatives").derive(batch_index))
        value, buf = total_objective(rows, state.store, cfg.model, cfg.filter,
                                     cfg.loss, negatives=negatives,
                                     filter_active=active)
        if not np.isfinite(value):
            raise DivergedLoss(state.epoch)
        optimizer_step(state.store, buf, cfg.optimizer, cfg.lr)
        total += value
    record = EpochRecord(epoch=state.epoch, loss=total)
    state.epoch += 1
    return record


def _telemetry_sample(cfg: TrainConfig, train_arr: np.ndarray) -> np.ndarray:
    n = train_arr.shape[0]
    size = min(cfg.telemetry_sample, n)
    idx = Rng(cfg.seed).derive("telemetry").generator().choice(n, size=size, replace=False)
    return train_arr[idx]


def train(dataset: Dataset, config: TrainConfig,
          initial: Checkpoint | None = None) -> tuple[Checkpoint, TrainReport]:
    """Run epochs [start, config.epochs); start is 0 or the checkpoint's epoch.

    Chained runs (pretrain, then plug in) use the same config with a larger
    epoch target; everything else must match the checkpoint.
    """
    if initial is not None:
        base = initial.config.to_dict()
        mine = config.to_dict()
        for key in ("model", "filter", "loss", "seed", "batch_size", "lr",
                    "optimizer", "init_scheme", "init_scale", "precision"):
            if base[key] != mine[key]:
                raise ValueError(f"resume config differs from checkpoint in {key!r}")
        store = initial.store.clone()
        start = initial.epoch
    else:
        store = build_store(config.model, config.filter,
                            dataset.vocabulary.num_entities,
                            dataset.vocabulary.num_relations,
                            Rng(config.seed), config.init_scheme,
                            config.init_scale, config.dtype)
        start = 0
    train_arr = dataset.split_array("train")
    state = TrainState(store, dataset, config, start, train_arr)
    sample = _telemetry_sample(config, train_arr) if train_arr.size else train_arr
    report = TrainReport()
    for _ in range(start, config.epochs):
        try:
            record = train_epoch(state)
        except DivergedLoss as err:
            err.partial_report = report
            raise
        if config.scale_telemetry and not config.filter.inert and sample.size:
            if state.epoch <= config.plugin_epoch:
                if config.filter.kind != "none":
                    record.transformation_scale = 1.0
                if config.filter.rt_enabled:
                    record.rt_scale = 1.0
                record.embedding_scale = analysis.embedding_scale(
                    state.store, config.model, config.filter.p, sample[:, 0])
            else:
                trace = analysis.scale_trace(state.store, config.model,
                                             config.filter, sample)
                record.transformation_scale = trace.transformation_scale
                record.rt_scale = trace.rt_scale
                record.embedding_scale = trace.embedding_scale
        if (config.validate and dataset.valid
                and state.epoch % config.validate_every == 0):
            ckpt = Checkpoint(CHECKPOINT_VERSION, config, dataset.vocabulary,
                              state.store, state.epoch)
            record.valid_mrr = evaluation.evaluate_split(
                ckpt, dataset, "valid").mrr
        report.records.append(record)
    checkpoint = Checkpoint(CHECKPOINT_VERSION, config, dataset.vocabulary,
                            state.store, state.epoch)
    return checkpoint, report


# ---------------------------------------------------------------------------
# checkpoint serialization
#
# layout: 8-byte magic, 8-byte little-endian metadata length, UTF-8 JSON
# metadata (version, config, vocab, epoch, rng, table manifest), raw
# little-endian arrays in manifest order, 8-byte FNV-1a checksum of all
# preceding bytes.


def _dtype_tag(dtype) -> str:
    return {"float64": "<f8", "float32": "<f4"}[np.dtype(dtype).name]


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    store = checkpoint.store
    manifest = []
    blobs = []

    def _push(name: str, arr: np.ndarray, trainable: bool):
        tag = _dtype_tag(arr.dtype)
        manifest.append({
            "name": name,
            "rows": int(arr.shape[0]),
            "cols": int(arr.shape[1]),
            "dtype": tag,
            "trainable": trainable,
        })
        blobs.append(np.ascontiguousarray(arr, dtype=np.dtype(tag)).tobytes())

    for name in sorted(store.tables):
        _push(name, store.tables[name], store.trainable[name])
    for name in sorted(store.acc):
        _push("acc:" + name, store.acc[name], False)

    meta = {
        "version": checkpoint.version,
        "config": checkpoint.config.to_dict(),
        "vocab": checkpoint.vocabulary.to_dict(),
        "epoch": checkpoint.epoch,
        "rng": {"seed": checkpoint.config.seed, "next_epoch": checkpoint.epoch},
        "store_meta": store.meta,
        "tables": manifest,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = b"".join([CHECKPOINT_MAGIC, struct.pack("<Q", len(meta_bytes)),
                        meta_bytes, *blobs])
    checksum = fnv1a(payload)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<Q", checksum))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 16:
        raise ChecksumMismatch("file too short to be a checkpoint")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise VersionMismatch("bad magic; not a checkpoint file")
    payload, trailer = raw[:-8], raw[-8:]
    if fnv1a(payload) != struct.unpack("<Q", trailer)[0]:
        raise ChecksumMismatch("checksum mismatch (corrupt or truncated file)")
    offset = len(CHECKPOINT_MAGIC)
    (meta_len,) = struct.unpack_from("<Q", payload, offset)
    offset += 8
    meta = json.loads(payload[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    if meta.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"unsupported checkpoint version {meta.get('version')}")
    config = TrainConfig.from_dict(meta["config"])
    vocab = Vocabulary.from_dict(meta["vocab"])
    store = ParameterStore(config.dtype)
    store.meta = dict(meta["store_meta"])
    arrays: dict[str, np.ndarray] = {}
    for entry in meta["tables"]:
        dtype = np.dtype(entry["dtype"])
        count = entry["rows"] * entry["cols"]
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(payload):
            raise ChecksumMismatch("array data truncated")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        arrays[entry["name"]] = arr.reshape(entry["rows"], entry["cols"]).copy()
        offset += nbytes
    if offset != len(payload):
        raise ChecksumMismatch("trailing bytes after arrays")
    for entry in meta["tables"]:
        name = entry["name"]
        if name.startswith("acc:"):
            continue
        store.create(name, arrays[name], entry["trainable"])
    for entry in meta["tables"]:
        name = entry["name"]
        if name.startswith("acc:"):
            base = name[4:]
            store.acc[base] = np.ascontiguousarray(arrays[name], dtype=store.dtype)
    return Checkpoint(meta["version"], config, vocab, store, meta["epoch"])
