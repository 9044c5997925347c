"""Alternating two-player training, ablation baselines and checkpoints.

One schedule cycle is a single update of (enc, pred, dec) followed by ``k``
updates of the disentanglers, each on its own minibatch. While one group is
updated the other group's parameters are frozen and stay bit-identical.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import AdamConfig, AdamSlot, Tensor
from .data import Dataset
from .errors import (
    CheckpointError,
    ConfigError,
    CorruptCheckpointError,
    TrainingDivergenceError,
    UnsupportedVersionError,
)
from .losses import LossBreakdown, LossWeights, composite_objectives, l_dec, l_dis, l_pred, objective_tensors
from .model import M1, M2, ArchitectureSpec, ModelGraph, SplitEmbedding, decode, disentangle_forward, encode
from .model import forward, init_model, noisy_transform, predict

FORMAT_VERSION = 1
MAGIC = b"INVFCKPT"
METRICS_HEADER = ("epoch", "step", "player", "l_pred", "l_dec", "l_dis1", "l_dis2", "j_m1", "j_m2", "ms")


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    k: int = 5
    epochs: int = 50
    batch_size: int = 128
    lr_m1: float = 1e-3
    lr_m2: float = 1e-3
    psi_rate: Optional[float] = None
    seed: int = 0
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.psi_rate is not None and not 0 <= self.psi_rate < 1:
            raise ConfigError(f"psi_rate must be in [0, 1), got {self.psi_rate}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        return cls(**d)


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    step: int
    player: str
    losses: LossBreakdown
    ms: float

    def row(self) -> list:
        b = self.losses
        return [self.epoch, self.step, self.player, b.l_pred, b.l_dec, b.l_dis1, b.l_dis2, b.j_m1, b.j_m2, round(self.ms, 3)]


class CsvMetricsSink:
    """Streams :class:`MetricsRecord` rows to a CSV file."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(METRICS_HEADER)

    def __call__(self, record: MetricsRecord) -> None:
        self._writer.writerow(record.row())

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


Batch = tuple[np.ndarray, np.ndarray]


def _psi(model: ModelGraph, config: TrainConfig) -> float:
    return model.arch.psi_rate if config.psi_rate is None else config.psi_rate


def _check(b: LossBreakdown, player: str) -> LossBreakdown:
    if not b.is_finite():
        raise TrainingDivergenceError(f"non-finite loss during {player} step: {b}", b)
    return b


def train_step_m1(model: ModelGraph, batch: Batch, config: TrainConfig, rng=None) -> LossBreakdown:
    """Update enc/pred/dec on one batch with the disentanglers frozen.

    Gradients reach the encoder through the frozen disentanglers and through
    the embedding targets they are compared against.
    """
    x, y = batch
    rng = ad.rng_stream(config.seed, "dropout") if rng is None else rng
    store = model.params
    fp = forward(model, x, rng, training=True, psi_rate=_psi(model, config))
    lp = l_pred(fp.probs, y)
    ld = l_dec(fp.x_hat, x) if fp.x_hat is not None else None
    d1 = d2 = None
    if fp.e2_hat is not None:
        d1, d2 = l_dis(fp.e2_hat, fp.emb.e2, fp.e1_hat, fp.emb.e1)
    weights = config.weights
    if model.variant == "b0":
        weights = LossWeights(weights.alpha, 0.0, 0.0)
    elif model.variant == "b1":
        weights = LossWeights(weights.alpha, weights.beta, 0.0)
    j_m1, _ = objective_tensors(lp, ld, d1, d2, weights)
    breakdown = _check(composite_objectives(lp, ld, d1, d2, weights), "M1")
    with store.freezing(M2):
        store.zero_grad()
        ad.backward(j_m1)
        ad.clip_grad_norm(store, config.clip_norm, store.trainable())
        ad.optimizer_step(store, AdamConfig(lr=config.lr_m1))
    return breakdown


def train_step_m2(model: ModelGraph, batch: Batch, config: TrainConfig, rng=None) -> LossBreakdown:
    """Update dis1/dis2 on one batch with enc/pred/dec frozen."""
    if model.variant != "full":
        raise ConfigError(f"{model.variant} model has no disentanglers")
    x, y = batch
    rng = ad.rng_stream(config.seed, "dropout") if rng is None else rng
    store = model.params
    with ad.no_grad():
        emb = encode(model, x)
        lp = l_pred(predict(model, emb.e1), y)
        ld = l_dec(decode(model, noisy_transform(emb.e1, _psi(model, config), rng, True), emb.e2), x)
    e2_hat, e1_hat = disentangle_forward(model, emb)
    d1, d2 = l_dis(e2_hat, emb.e2, e1_hat, emb.e1)
    breakdown = _check(composite_objectives(lp, ld, d1, d2, config.weights), "M2")
    with store.freezing(M1):
        store.zero_grad()
        ad.backward(d1 + d2)
        ad.optimizer_step(store, AdamConfig(lr=config.lr_m2))
    return breakdown


class Trainer:
    """Owns the schedule position and random streams of one training run."""

    def __init__(self, model: ModelGraph, config: TrainConfig, sink: Optional[Callable[[MetricsRecord], None]] = None):
        self.model = model
        self.config = config
        self.sink = sink
        self.step = 0
        self.epoch = 0
        self.rng_dropout = ad.rng_stream(config.seed, "dropout")
        self.rng_shuffle = ad.rng_stream(config.seed, "shuffle")

    def player_for(self, step: int) -> str:
        if self.model.variant != "full":
            return "m1"
        return "m1" if step % (self.config.k + 1) == 0 else "m2"

    def batches(self, dataset: Dataset) -> Iterable[Batch]:
        order = self.rng_shuffle.permutation(len(dataset))
        bs = self.config.batch_size
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            yield dataset.x[idx], dataset.y[idx]

    def run_epoch(self, dataset: Dataset) -> None:
        for batch in self.batches(dataset):
            t0 = time.perf_counter()
            player = self.player_for(self.step)
            step_fn = train_step_m1 if player == "m1" else train_step_m2
            losses = step_fn(self.model, batch, self.config, self.rng_dropout)
            if self.sink is not None:
                self.sink(MetricsRecord(self.epoch, self.step, player, losses, (time.perf_counter() - t0) * 1e3))
            self.step += 1
        self.epoch += 1

    def fit(self, dataset: Dataset, checkpoint_path=None) -> ModelGraph:
        if len(dataset) == 0:
            raise ConfigError("dataset is empty")
        if dataset.dim != self.model.arch.input_dim:
            raise ConfigError(f"dataset width {dataset.dim} != model input {self.model.arch.input_dim}")
        while self.epoch < self.config.epochs:
            self.run_epoch(dataset)
            if checkpoint_path is not None:
                save_checkpoint(self.model, checkpoint_path, self.config, self)
        return self.model

    def rng_states(self) -> dict:
        return {"dropout": ad.rng_state(self.rng_dropout), "shuffle": ad.rng_state(self.rng_shuffle)}

    @classmethod
    def resume(cls, ckpt: "Checkpoint", sink=None) -> "Trainer":
        if ckpt.config is None:
            raise CheckpointError("checkpoint carries no training config")
        t = cls(ckpt.to_model(), ckpt.config, sink)
        t.step, t.epoch = ckpt.step, ckpt.epoch
        if ckpt.rng:
            t.rng_dropout = ad.restore_rng(ckpt.rng["dropout"])
            t.rng_shuffle = ad.restore_rng(ckpt.rng["shuffle"])
        return t


def train(model: ModelGraph, dataset: Dataset, config: TrainConfig, sink=None, checkpoint_path=None) -> ModelGraph:
    """Run ``config.epochs`` passes over ``dataset`` on the 1:k schedule."""
    return Trainer(model, config, sink).fit(dataset, checkpoint_path)


def train_baseline(
    variant: str, dataset: Dataset, config: TrainConfig, arch: ArchitectureSpec, sink=None, checkpoint_path=None
) -> ModelGraph:
    """B0 (plain classifier on the unsplit code) or B1 (no disentanglers)."""
    if variant not in ("b0", "b1"):
        raise ConfigError(f"unknown baseline {variant!r}")
    model = init_model(arch.with_variant(variant), config.seed)
    return train(model, dataset, config, sink, checkpoint_path)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC | u32 LE header length | UTF-8 JSON header | float32 LE arrays


@dataclass
class Checkpoint:
    version: int
    arch: ArchitectureSpec
    config: Optional[TrainConfig]
    params: dict[str, np.ndarray]
    slots: dict[str, AdamSlot] = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0

    def to_model(self) -> ModelGraph:
        model = init_model(self.arch, 0)
        model.params.load_state_dict(self.params)
        for name, slot in self.slots.items():
            model.params.slots[name] = AdamSlot(slot.m.copy(), slot.v.copy(), slot.t)
        return model


def _expected_shapes(arch: ArchitectureSpec) -> dict[str, tuple[int, ...]]:
    out = {}
    for comp, layers in arch.stacks().items():
        for i, layer in enumerate(layers):
            out[f"{comp}.layer{i}.weight"] = (layer.input_dim, layer.output_dim)
            out[f"{comp}.layer{i}.bias"] = (layer.output_dim,)
    return out


def save_checkpoint(model: ModelGraph, path, config: Optional[TrainConfig] = None, trainer: Optional[Trainer] = None):
    arrays: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in model.params.items()]
    slot_t = {}
    for name, slot in model.params.slots.items():
        arrays.append((f"adam.m/{name}", slot.m))
        arrays.append((f"adam.v/{name}", slot.v))
        slot_t[name] = slot.t
    index, offset = [], 0
    for name, arr in arrays:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": model.arch.to_dict(),
        "train_config": None if config is None else config.to_dict(),
        "epoch": trainer.epoch if trainer else 0,
        "step": trainer.step if trainer else 0,
        "rng": trainer.rng_states() if trainer else {},
        "adam_steps": slot_t,
        "tensors": index,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    for _, arr in arrays:
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not an invforge checkpoint")
    (hlen,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(raw) < start + hlen:
        raise CorruptCheckpointError(f"{path}: header truncated")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: format version {version} (supported: {FORMAT_VERSION})")
    payload = raw[start + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise CorruptCheckpointError(f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    arch = ArchitectureSpec.from_dict(header["architecture"])
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.astype(np.float32).reshape(entry["shape"])
    expected = _expected_shapes(arch)
    params = {n: a for n, a in tensors.items() if not n.startswith("adam.")}
    if set(params) != set(expected):
        raise CheckpointError(f"{path}: parameter names do not match the architecture")
    for n, shape in expected.items():
        if params[n].shape != shape:
            raise CheckpointError(f"{path}: {n} has shape {params[n].shape}, architecture needs {shape}")
    slots = {
        n: AdamSlot(tensors[f"adam.m/{n}"], tensors[f"adam.v/{n}"], int(t)) for n, t in header["adam_steps"].items()
    }
    cfg = header.get("train_config")
    return Checkpoint(
        version=version,
        arch=arch,
        config=None if cfg is None else TrainConfig.from_dict(cfg),
        params=params,
        slots=slots,
        rng=header.get("rng", {}),
        epoch=header.get("epoch", 0),
        step=header.get("step", 0),
    )


def load_model(path) -> ModelGraph:
    return load_checkpoint(path).to_model()
