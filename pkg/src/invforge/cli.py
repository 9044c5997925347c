"""``invforge`` command line: dataset construction, training, evaluation, sweeps.

Exit status is 0 on success, 1 on any runtime error and 2 on usage errors.
Files are written under a temporary name and renamed once complete.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as D
from .config import RunConfig, describe, parse_text
from .errors import DimensionError, InvForgeError
from .evaluate import embed_dataset, eta_sweep, eval_invariance, export_embeddings, write_sweep_csv
from .model import init_model
from .trainer import CsvMetricsSink, load_model, save_checkpoint, Trainer

EVAL_SETS = {"theta": D.TRAIN_ANGLES, **D.EVAL_ANGLE_SETS}


class UsageError(Exception):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _set_entries(name: str, ds: D.Dataset, files: dict[str, str]) -> dict[str, object]:
    entries: dict[str, object] = {f"set.{name}.{k}": v for k, v in files.items()}
    entries[f"set.{name}.num_classes"] = ds.num_classes
    if ds.z is not None:
        entries[f"set.{name}.num_nuisance"] = ds.num_nuisance
    entries[f"set.{name}.split"] = ds.split
    return entries


def _mnist_dir(arg: Optional[str]) -> str:
    return arg or os.environ.get("INVFORGE_MNIST_DIR", "data/mnist")


# ---------------------------------------------------------------------------
# data


def cmd_data_rot(args) -> None:
    out = Path(args.out)
    spec = D.RotSpec(args.angles, args.foreshorten)
    entries: dict[str, object] = {"kind": "mnist-rot", "angles": spec.angles, "seed": args.seed}
    train = D.build_mnist_rot(D.load_mnist(_mnist_dir(args.mnist_dir), "train"), spec, args.seed, stream="mnist-rot/train")
    entries.update(_set_entries("train", train, D.save_dataset(train, out, "train")))
    test = D.load_mnist(_mnist_dir(args.mnist_dir), "test")
    # held-out sets: the training angles plus the two unseen pairs
    sets = {"theta": spec.angles, **D.EVAL_ANGLE_SETS}
    for name, angles in sets.items():
        ds = D.build_mnist_rot(test, D.RotSpec(angles, args.foreshorten), args.seed, stream=f"mnist-rot/{name}")
        entries.update(_set_entries(name, ds, D.save_dataset(ds, out, name)))
        entries[f"set.{name}.angles"] = angles
    D.write_manifest(out / "manifest.txt", entries)
    print(f"wrote {out / 'manifest.txt'}")


def _dil_name(k: int) -> str:
    return f"erode{-k}" if k < 0 else f"dilate{k}"


def cmd_data_dil(args) -> None:
    out = Path(args.out)
    test = D.load_mnist(_mnist_dir(args.mnist_dir), "test")
    entries: dict[str, object] = {"kind": "mnist-dil", "kernels": args.kernels}
    for k, ds in D.build_mnist_dil(test, args.kernels).items():
        name = _dil_name(k)
        entries.update(_set_entries(name, ds, D.save_dataset(ds, out, name)))
        entries[f"set.{name}.kernel"] = k
    D.write_manifest(out / "manifest.txt", entries)
    print(f"wrote {out / 'manifest.txt'}")


def cmd_data_synth(args) -> None:
    out = Path(args.out)
    spec = D.SyntheticSpec(args.y_classes, args.z_classes, args.n, args.noise, args.seed)
    train, test = D.split_dataset(D.gen_synthetic(spec), args.test_fraction, args.seed)
    entries: dict[str, object] = {
        "kind": "synthetic",
        "y_classes": spec.y_classes,
        "z_classes": spec.z_classes,
        "n": spec.n,
        "noise": spec.noise,
        "seed": spec.seed,
    }
    for name, ds in (("train", train), ("test", test)):
        entries.update(_set_entries(name, ds, D.save_dataset(ds, out, name)))
    D.write_manifest(out / "manifest.txt", entries)
    print(f"wrote {out / 'manifest.txt'}")


# ---------------------------------------------------------------------------
# train / eval / sweep


def load_config(path: Optional[str], overrides: Sequence[str]) -> RunConfig:
    pairs = parse_text(Path(path).read_text(), path) if path else {}
    pairs.update(parse_text("\n".join(overrides), "--set"))
    return RunConfig.from_pairs(pairs)


def _load_set(cfg: RunConfig, name: str) -> D.Dataset:
    sets = D.manifest_datasets(cfg["data.manifest"])
    if name not in sets:
        raise D.DataError(f"set {name!r} not in {cfg['data.manifest']} (have {', '.join(sets)})")
    return sets[name]


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def cmd_train(args) -> None:
    cfg = load_config(args.config, args.set)
    train_set = _load_set(cfg, cfg["data.train_set"])
    cfg.resolve_decoder(bool(train_set.x.min() >= 0 and train_set.x.max() <= 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.model == "b0":
        print("warning: b0 ignores train.beta, train.gamma and train.k", file=sys.stderr)
    elif args.model == "b1":
        print("warning: b1 ignores train.gamma and train.k", file=sys.stderr)
    arch = cfg.architecture(train_set.dim, train_set.num_classes, args.model)
    tcfg = cfg.train_config()
    _write_text(out / "config.txt", cfg.echo())
    metrics = out / "metrics.csv"
    tmp = metrics.with_name(metrics.name + ".tmp")
    with CsvMetricsSink(tmp) as sink:
        trainer = Trainer(init_model(arch, tcfg.seed), tcfg, sink)
        trainer.fit(train_set)
    tmp.replace(metrics)
    save_checkpoint(trainer.model, out / "model.ckpt", tcfg, trainer)
    print(f"wrote {out / 'model.ckpt'}")


def cmd_eval(args) -> None:
    model = load_model(args.checkpoint)
    probe = load_config(args.config, args.set).probe_config()
    sets = {n: ds for n, ds in D.manifest_datasets(args.test_sets).items() if ds.split != "train"}
    if not sets:
        raise D.DataError(f"no evaluation sets in {args.test_sets}")
    for name, ds in sets.items():
        if ds.dim != model.arch.input_dim:
            raise DimensionError(f"set {name}: width {ds.dim} != checkpoint input {model.arch.input_dim}")
    probe_set = args.probe_set or next((n for n in ("theta", "test") if n in sets), next(iter(sets)))
    report = eval_invariance(model, sets, probe, nuisance_set=probe_set)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.txt")
    report.write(out)
    for k, v in report.flat().items():
        print(f"{k}={v:.6f}")
    if args.export_embeddings:
        E1, E2, y, z = embed_dataset(model, sets[probe_set])
        export_embeddings(E1, E2, y, z, args.export_embeddings)


def cmd_sweep(args) -> None:
    cfg = load_config(args.config, args.set)
    grid = cfg["sweep.grid"]
    if not grid:
        raise UsageError("sweep.grid is empty")
    train_set = _load_set(cfg, cfg["data.train_set"])
    test_set = _load_set(cfg, cfg["data.test_set"])
    if test_set.z is None:
        raise D.DataError(f"sweep needs nuisance labels in set {cfg['data.test_set']!r}")
    cfg.resolve_decoder(bool(train_set.x.min() >= 0 and train_set.x.max() <= 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "config.txt", cfg.echo())
    arch = cfg.architecture(train_set.dim, train_set.num_classes)
    rows = eta_sweep(train_set, test_set, grid, cfg.train_config(), arch, cfg.probe_config())
    write_sweep_csv(rows, out / "sweep.csv")
    print(f"wrote {out / 'sweep.csv'}")


def cmd_config(args) -> None:
    sys.stdout.write(describe())


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invforge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="build datasets").add_subparsers(dest="kind", required=True)
    rot = data.add_parser("mnist-rot", help="rotated MNIST train set plus held-out angle sets")
    rot.add_argument("--angles", type=_floats, default=D.TRAIN_ANGLES)
    rot.add_argument("--seed", type=int, default=0)
    rot.add_argument("--foreshorten", action="store_true", help="rotate about the vertical axis instead of in-plane")
    dil = data.add_parser("mnist-dil", help="eroded and dilated MNIST test sets")
    dil.add_argument("--kernels", type=_ints, default=D.DIL_KERNELS)
    syn = data.add_parser("synth", help="synthetic two-factor dataset")
    syn.add_argument("--y-classes", type=int, default=10)
    syn.add_argument("--z-classes", type=int, default=5)
    syn.add_argument("--n", type=int, default=50_000)
    syn.add_argument("--noise", type=float, default=D.SyntheticSpec.noise)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--test-fraction", type=float, default=0.2)
    for q, fn in ((rot, cmd_data_rot), (dil, cmd_data_dil), (syn, cmd_data_synth)):
        q.add_argument("--out", required=True, help="output directory")
        if fn is not cmd_data_synth:
            q.add_argument("--mnist-dir", help="raw MNIST IDX files (default $INVFORGE_MNIST_DIR or data/mnist)")
        q.set_defaults(func=fn)

    def with_config(q):
        q.add_argument("--config", help="key=value config file; see `invforge config`")
        q.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--model", choices=("full", "b0", "b1"), default="full")
    tr.add_argument("--out", required=True, help="run directory")
    with_config(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--test-sets", required=True, help="dataset manifest")
    ev.add_argument("--probe-set", help="set used for the probes (default theta, else test, else the first)")
    ev.add_argument("--out", help="report path (default eval.txt next to the checkpoint)")
    ev.add_argument("--export-embeddings", metavar="CSV")
    with_config(ev)
    ev.set_defaults(func=cmd_eval)

    sw = sub.add_parser("sweep", help="train one model per (alpha, beta) grid cell")
    sw.add_argument("--out", required=True, help="run directory")
    with_config(sw)
    sw.set_defaults(func=cmd_sweep)

    cf = sub.add_parser("config", help="print every config key with its default")
    cf.set_defaults(func=cmd_config)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = int(os.environ.get("INVFORGE_THREADS", "1"))
        with threadpool_limits(limits=threads):
            args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"invforge: error: {exc}", file=sys.stderr)
        return 2
    except (InvForgeError, OSError, ValueError) as exc:
        print(f"invforge: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
