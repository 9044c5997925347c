"""Probe-based invariance metrics, embedding export and the alpha/beta sweep.

A probe is a fresh two-layer classifier fit on frozen embeddings; its
held-out accuracy measures how much label information the embedding holds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamConfig, ParamStore, Tensor
from .data import Dataset
from .errors import DegenerateDataError, DimensionError
from .losses import LossWeights, l_pred
from .model import ArchitectureSpec, ModelGraph, decode, encode, init_model, predict, run_stack
from .model import dense_stack
from .trainer import TrainConfig, train


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 64
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 128
    seed: int = 0
    test_fraction: float = 0.2
    standardize: bool = True


def embed_dataset(model: ModelGraph, dataset: Dataset, batch_size: int = 2048):
    """Noise-free embeddings of every sample: (E1, E2 or None, y, z)."""
    if dataset.dim != model.arch.input_dim:
        raise DimensionError(f"dataset width {dataset.dim} != model input {model.arch.input_dim}")
    e1s, e2s = [], []
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            emb = encode(model, dataset.x[start : start + batch_size])
            e1s.append(emb.e1.data)
            if emb.e2 is not None:
                e2s.append(emb.e2.data)
    E1 = np.concatenate(e1s)
    E2 = np.concatenate(e2s) if e2s else None
    return E1, E2, dataset.y, dataset.z


def predictor_accuracy(model: ModelGraph, dataset: Dataset, batch_size: int = 2048) -> float:
    correct = 0
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            probs = predict(model, encode(model, dataset.x[start : start + batch_size]).e1)
            correct += int((probs.data.argmax(axis=1) == dataset.y[start : start + batch_size]).sum())
    return correct / len(dataset)


def train_probe(embeddings: np.ndarray, labels: np.ndarray, config: ProbeConfig = ProbeConfig()) -> float:
    """Held-out accuracy of a probe fit on a seeded 80/20 split."""
    X = np.asarray(embeddings, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    if len(classes) < 2:
        raise DegenerateDataError("probe needs at least two classes")
    rng = ad.rng_stream(config.seed, "probe")
    perm = rng.permutation(len(X))
    n_test = max(1, int(round(len(X) * config.test_fraction)))
    test, fit = perm[:n_test], perm[n_test:]
    if config.standardize:
        mu = X[fit].mean(axis=0)
        sd = X[fit].std(axis=0)
        X = (X - mu) / np.where(sd > 1e-6, sd, 1.0).astype(np.float32)
    n_classes = int(y.max()) + 1
    layers = dense_stack([X.shape[1], config.hidden, n_classes], output="softmax")
    store = ParamStore()
    init = ad.rng_stream(config.seed, "probe-init")
    for i, layer in enumerate(layers):
        store.add(f"probe.layer{i}.weight", ad.glorot_uniform(init, layer.input_dim, layer.output_dim))
        store.add(f"probe.layer{i}.bias", np.zeros(layer.output_dim, np.float32))
    opt = AdamConfig(lr=config.lr)
    for _ in range(config.epochs):
        order = fit[rng.permutation(len(fit))]
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss = l_pred(run_stack(store, "probe", layers, Tensor(X[idx])), y[idx])
            ad.backward(loss)
            ad.optimizer_step(store, opt)
    with ad.no_grad():
        probs = run_stack(store, "probe", layers, Tensor(X[test]))
    return float((probs.data.argmax(axis=1) == y[test]).mean())


@dataclass
class EvalReport:
    a_y: dict[str, float] = field(default_factory=dict)
    a_y_probe: Optional[float] = None
    a_z_e1: Optional[float] = None
    a_z_e2: Optional[float] = None
    chance_z: Optional[float] = None

    def flat(self) -> dict[str, float]:
        out = {f"a_y_{name}": v for name, v in self.a_y.items()}
        for key in ("a_y_probe", "a_z_e1", "a_z_e2", "chance_z"):
            v = getattr(self, key)
            if v is not None:
                out[key] = v
        return out

    def write(self, path) -> None:
        text = "".join(f"{k}={v:.6f}\n" for k, v in self.flat().items())
        tmp = Path(str(path) + ".tmp")
        tmp.write_text(text)
        tmp.replace(path)

    @staticmethod
    def read_flat(path) -> dict[str, float]:
        out = {}
        for line in Path(path).read_text().splitlines():
            if line.strip():
                k, v = line.split("=", 1)
                out[k] = float(v)
        return out


def eval_invariance(
    model: ModelGraph,
    test_sets: dict[str, Dataset],
    probe: ProbeConfig = ProbeConfig(),
    nuisance_set: str = "theta",
) -> EvalReport:
    """Predictor accuracy on every set; probe accuracies on ``nuisance_set``.

    The z probes are skipped (fields left None) when that set has no z labels.
    """
    report = EvalReport()
    for name, ds in test_sets.items():
        report.a_y[name] = predictor_accuracy(model, ds)
    ds = test_sets.get(nuisance_set)
    if ds is not None:
        E1, E2, y, z = embed_dataset(model, ds)
        report.a_y_probe = train_probe(E1, y, probe)
        if z is not None and len(np.unique(z)) > 1:
            report.a_z_e1 = train_probe(E1, z, probe)
            if E2 is not None:
                report.a_z_e2 = train_probe(E2, z, probe)
            report.chance_z = 1.0 / (ds.num_nuisance or len(np.unique(z)))
    return report


def e2_only_reconstruction_mse(model: ModelGraph, dataset: Dataset, batch_size: int = 2048) -> float:
    """MSE of decoding [0, e2], i.e. with the e1 slot zeroed."""
    total = 0.0
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = dataset.x[start : start + batch_size]
            emb = encode(model, x)
            x_hat = decode(model, Tensor(np.zeros_like(emb.e1.data)), emb.e2)
            total += float(np.square(x_hat.data - x, dtype=np.float64).sum())
    return total / dataset.x.size


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    beta: float
    eta: float
    a_y: float
    a_y_probe: float
    a_z_e1: float
    a_z_e2: float
    recon_mse_e2: float


SWEEP_HEADER = tuple(SweepRow.__dataclass_fields__)


def eta_sweep(
    train_set: Dataset,
    test_set: Dataset,
    grid: Sequence[tuple[float, float]],
    config: TrainConfig,
    arch: ArchitectureSpec,
    probe: ProbeConfig = ProbeConfig(),
) -> list[SweepRow]:
    """Train one full model per (alpha, beta) with gamma held at ``config``'s."""
    if not grid:
        raise ValueError("empty (alpha, beta) grid")
    rows = []
    for alpha, beta in grid:
        weights = LossWeights(alpha, beta, config.weights.gamma)
        cfg = TrainConfig(**{**_fields(config), "weights": weights})
        model = train(init_model(arch, cfg.seed), train_set, cfg)
        E1, E2, y, z = embed_dataset(model, test_set)
        rows.append(
            SweepRow(
                alpha=alpha,
                beta=beta,
                eta=weights.eta,
                a_y=predictor_accuracy(model, test_set),
                a_y_probe=train_probe(E1, y, probe),
                a_z_e1=train_probe(E1, z, probe),
                a_z_e2=train_probe(E2, z, probe),
                recon_mse_e2=e2_only_reconstruction_mse(model, test_set),
            )
        )
    return rows


def _fields(cfg: TrainConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([getattr(r, k) for k in SWEEP_HEADER])
    tmp.replace(path)


def export_embeddings(E1: np.ndarray, E2: Optional[np.ndarray], y, z, path) -> None:
    """CSV with columns e1_*, e2_*, y, z (z empty when unlabeled)."""
    E1 = np.asarray(E1)
    d1 = E1.shape[1]
    d2 = 0 if E2 is None else np.asarray(E2).shape[1]
    header = [f"e1_{i}" for i in range(d1)] + [f"e2_{i}" for i in range(d2)] + ["y", "z"]
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(E1)):
            row = [repr(float(v)) for v in E1[i]]
            if d2:
                row += [repr(float(v)) for v in E2[i]]
            row += [int(y[i]), "" if z is None else int(z[i])]
            w.writerow(row)
    tmp.replace(path)


def read_embeddings(path):
    """Inverse of :func:`export_embeddings`: (E1, E2 or None, y, z or None)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d1 = sum(h.startswith("e1_") for h in header)
    d2 = sum(h.startswith("e2_") for h in header)
    arr = np.array([[float(v) for v in r[: d1 + d2]] for r in body], dtype=np.float64).reshape(len(body), d1 + d2)
    y = np.array([int(r[d1 + d2]) for r in body], dtype=np.int64)
    zs = [r[d1 + d2 + 1] for r in body]
    z = None if any(v == "" for v in zs) else np.array([int(v) for v in zs], dtype=np.int64)
    return arr[:, :d1], (arr[:, d1:] if d2 else None), y, z
