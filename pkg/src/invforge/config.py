"""Flat ``section.key=value`` run configuration.

Every key has a default and a one-line description in :data:`KEYS`; unknown
keys and malformed values are collected and reported together so a bad file
fails before any work starts.  ``RunConfig.echo()`` renders every resolved
key, and parsing that text reproduces the same configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

from .errors import ConfigError
from .evaluate import ProbeConfig
from .losses import LossWeights
from .model import ArchitectureSpec, build_architecture
from .trainer import TrainConfig


class Key(NamedTuple):
    parse: Callable[[str], object]
    default: str
    doc: str


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _grid(text: str) -> tuple[tuple[float, float], ...]:
    """``alpha:beta`` pairs separated by commas; an empty string is an empty grid."""
    pairs = []
    for item in text.split(","):
        if not item.strip():
            continue
        a, b = item.split(":")
        pairs.append((float(a), float(b)))
    return tuple(pairs)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


KEYS: dict[str, Key] = {
    "seed": Key(int, "0", "single source of randomness; every stream is derived from it by name"),
    "data.manifest": Key(str, "data/manifest.txt", "dataset manifest written by the data command"),
    "data.train_set": Key(str, "train", "manifest set used for training"),
    "data.test_set": Key(str, "theta", "manifest set used by the sweep for evaluation"),
    "arch.dim_e1": Key(int, "128", "width of the predictive embedding"),
    "arch.dim_e2": Key(int, "128", "width of the nuisance embedding"),
    "arch.enc_hidden": Key(_int_list, "512", "encoder hidden widths, comma separated"),
    "arch.pred_hidden": Key(_int_list, "256", "predictor hidden widths"),
    "arch.dec_hidden": Key(_int_list, "512", "decoder hidden widths"),
    "arch.psi_rate": Key(float, "0.5", "dropout rate applied to e1 on the decoder path"),
    "arch.embedding_activation": Key(_choice("tanh", "sigmoid", "linear"), "tanh", "encoder output activation"),
    "arch.decoder_output": Key(
        _choice("auto", "sigmoid", "linear"), "auto", "decoder output; auto picks sigmoid for data in [0, 1]"
    ),
    "train.alpha": Key(float, "100", "prediction loss weight"),
    "train.beta": Key(float, "0.1", "reconstruction loss weight"),
    "train.gamma": Key(float, "1", "disentanglement loss weight"),
    "train.k": Key(int, "5", "disentangler steps per encoder-side step"),
    "train.epochs": Key(int, "50", "passes over the training set"),
    "train.batch_size": Key(int, "128", "minibatch size"),
    "train.lr_m1": Key(float, "0.001", "Adam learning rate for encoder, predictor and decoder"),
    "train.lr_m2": Key(float, "0.001", "Adam learning rate for the disentanglers"),
    "train.clip_norm": Key(float, "5.0", "global gradient-norm clip on encoder-side updates"),
    "probe.hidden": Key(int, "64", "probe hidden width"),
    "probe.epochs": Key(int, "30", "probe training epochs"),
    "probe.lr": Key(float, "0.001", "probe Adam learning rate"),
    "probe.test_fraction": Key(float, "0.2", "held-out share of the probed set"),
    "sweep.grid": Key(_grid, "100:0,100:0.1,0:0.1", "alpha:beta pairs for the sweep, comma separated"),
}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw key/value pairs; comments (#) and blank lines are skipped."""
    raw, errors = {}, []
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{source}:{ln}: expected key=value, got {line!r}")
            continue
        k, v = (s.strip() for s in line.split("=", 1))
        if k in raw:
            errors.append(f"{source}:{ln}: duplicate key {k}")
        raw[k] = v
    if errors:
        raise ConfigError("\n".join(errors))
    return raw


@dataclass
class RunConfig:
    raw: dict[str, str] = field(default_factory=dict)
    values: dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "RunConfig":
        errors = [f"unknown key {k}" for k in pairs if k not in KEYS]
        raw = {k: KEYS[k].default for k in KEYS}
        raw.update({k: v for k, v in pairs.items() if k in KEYS})
        values = {}
        for k, v in raw.items():
            try:
                values[k] = KEYS[k].parse(v)
            except (ValueError, TypeError) as exc:
                errors.append(f"{k}={v!r}: {exc}")
        cfg = cls(raw, values)
        if len(values) == len(KEYS):
            errors.extend(cfg._semantic_errors())
        if errors:
            raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_pairs(parse_text(text, str(path)))

    def __getitem__(self, key: str):
        return self.values[key]

    def _semantic_errors(self) -> list[str]:
        errors = []
        for build in (self.train_config, self.probe_config):
            try:
                build()
            except ConfigError as exc:
                errors.append(str(exc))
        if not 0 <= self["arch.psi_rate"] < 1:
            errors.append("arch.psi_rate must be in [0, 1)")
        for key in ("arch.dim_e1", "arch.dim_e2"):
            if self[key] < 1:
                errors.append(f"{key} must be positive")
        if not 0 < self["probe.test_fraction"] < 1:
            errors.append("probe.test_fraction must be in (0, 1)")
        return errors

    def train_config(self, alpha=None, beta=None) -> TrainConfig:
        weights = LossWeights(
            self["train.alpha"] if alpha is None else alpha,
            self["train.beta"] if beta is None else beta,
            self["train.gamma"],
        )
        return TrainConfig(
            weights=weights,
            k=self["train.k"],
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            lr_m1=self["train.lr_m1"],
            lr_m2=self["train.lr_m2"],
            psi_rate=self["arch.psi_rate"],
            seed=self["seed"],
            clip_norm=self["train.clip_norm"],
        )

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(
            hidden=self["probe.hidden"],
            epochs=self["probe.epochs"],
            lr=self["probe.lr"],
            seed=self["seed"],
            test_fraction=self["probe.test_fraction"],
        )

    def resolve_decoder(self, unit_range: bool) -> None:
        """Replace ``auto`` with the concrete choice so the echo is self-contained."""
        if self["arch.decoder_output"] == "auto":
            choice = "sigmoid" if unit_range else "linear"
            self.raw["arch.decoder_output"] = choice
            self.values["arch.decoder_output"] = choice

    def architecture(self, input_dim: int, num_classes: int, variant: str = "full") -> ArchitectureSpec:
        output = self["arch.decoder_output"]
        if output == "auto":
            raise ConfigError("arch.decoder_output must be resolved before building the model")
        return build_architecture(
            input_dim,
            num_classes,
            self["arch.dim_e1"],
            self["arch.dim_e2"],
            list(self["arch.enc_hidden"]),
            list(self["arch.pred_hidden"]),
            list(self["arch.dec_hidden"]),
            self["arch.psi_rate"],
            embedding_activation=self["arch.embedding_activation"],
            decoder_output=output,
            variant=variant,
        )

    def echo(self) -> str:
        return "".join(f"{k}={self.raw[k]}\n" for k in KEYS)


def describe() -> str:
    """Every key with its default and meaning, for ``--help`` style output."""
    return "".join(f"{k}={key.default}    # {key.doc}\n" for k, key in KEYS.items())

