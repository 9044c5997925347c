"""The five networks and their wiring.

``Enc`` maps x to a split code [e1 e2]; ``Pred`` reads e1; the decoder reads
a dropout-corrupted copy of e1 next to e2; two single-layer disentanglers
try to predict each half of the code from the other.

Parameters live in one :class:`~invforge.autodiff.ParamStore` whose names
are prefixed by component (``enc``, ``pred``, ``dec``, ``dis1``, ``dis2``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, DimensionError

M1 = ("enc", "pred", "dec")
M2 = ("dis1", "dis2")
VARIANTS = ("full", "b0", "b1")


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError(f"layer dims must be positive: {self}")
        if self.activation not in ad.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


def dense_stack(widths: list[int], hidden: str = "relu", output: str = "linear") -> tuple[LayerSpec, ...]:
    """Layers for widths ``[in, h1, ..., out]``."""
    n = len(widths) - 1
    return tuple(
        LayerSpec(widths[i], widths[i + 1], output if i == n - 1 else hidden) for i in range(n)
    )


@dataclass(frozen=True)
class ArchitectureSpec:
    encoder_layers: tuple[LayerSpec, ...]
    dim_e1: int
    dim_e2: int
    predictor_layers: tuple[LayerSpec, ...]
    decoder_layers: tuple[LayerSpec, ...] = ()
    dis1_layers: tuple[LayerSpec, ...] = ()
    dis2_layers: tuple[LayerSpec, ...] = ()
    psi_rate: float = 0.5
    variant: str = "full"

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ConfigError("; ".join(errors))

    def problems(self) -> list[str]:
        out = []
        if self.variant not in VARIANTS:
            return [f"unknown variant {self.variant!r}"]
        if not 0.0 <= self.psi_rate < 1.0:
            out.append(f"psi_rate must be in [0, 1), got {self.psi_rate}")
        width = self.dim_e1 + self.dim_e2
        if not self.encoder_layers or self.encoder_layers[-1].output_dim != width:
            out.append(f"encoder must end at dim_e1 + dim_e2 = {width}")
        _chain_ok(self.encoder_layers, "encoder", out)
        pred_in = width if self.variant == "b0" else self.dim_e1
        if not self.predictor_layers or self.predictor_layers[0].input_dim != pred_in:
            out.append(f"predictor must start at width {pred_in}")
        _chain_ok(self.predictor_layers, "predictor", out)
        if self.variant != "b0":
            if not self.decoder_layers:
                out.append("decoder layers missing")
            else:
                if self.decoder_layers[0].input_dim != width:
                    out.append(f"decoder must start at dim_e1 + dim_e2 = {width}")
                if self.decoder_layers[-1].output_dim != self.input_dim:
                    out.append(f"decoder must end at input width {self.input_dim}")
                _chain_ok(self.decoder_layers, "decoder", out)
        if self.variant == "full":
            if not self.dis1_layers or (self.dis1_layers[0].input_dim, self.dis1_layers[-1].output_dim) != (
                self.dim_e1,
                self.dim_e2,
            ):
                out.append("dis1 must map dim_e1 -> dim_e2")
            if not self.dis2_layers or (self.dis2_layers[0].input_dim, self.dis2_layers[-1].output_dim) != (
                self.dim_e2,
                self.dim_e1,
            ):
                out.append("dis2 must map dim_e2 -> dim_e1")
            _chain_ok(self.dis1_layers, "dis1", out)
            _chain_ok(self.dis2_layers, "dis2", out)
        return out

    @property
    def input_dim(self) -> int:
        return self.encoder_layers[0].input_dim

    @property
    def num_outputs(self) -> int:
        return self.predictor_layers[-1].output_dim

    def components(self) -> tuple[str, ...]:
        return {"full": M1 + M2, "b1": M1, "b0": ("enc", "pred")}[self.variant]

    def stacks(self) -> dict[str, tuple[LayerSpec, ...]]:
        all_ = {
            "enc": self.encoder_layers,
            "pred": self.predictor_layers,
            "dec": self.decoder_layers,
            "dis1": self.dis1_layers,
            "dis2": self.dis2_layers,
        }
        return {c: all_[c] for c in self.components()}

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("encoder_layers", "predictor_layers", "decoder_layers", "dis1_layers", "dis2_layers"):
            d[key] = [[l["input_dim"], l["output_dim"], l["activation"]] for l in d[key]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        for key in ("encoder_layers", "predictor_layers", "decoder_layers", "dis1_layers", "dis2_layers"):
            d[key] = tuple(LayerSpec(int(a), int(b), str(c)) for a, b, c in d.get(key, ()))
        return cls(**d)

    def with_variant(self, variant: str) -> "ArchitectureSpec":
        """Ablation counterpart sharing this spec's widths.

        ``b0`` widens the predictor input to the whole unsplit code so its
        capacity matches; ``b1`` drops the disentanglers.
        """
        if variant == self.variant:
            return self
        pred = list(self.predictor_layers)
        width = self.dim_e1 + self.dim_e2
        first = pred[0]
        pred[0] = LayerSpec(width if variant == "b0" else self.dim_e1, first.output_dim, first.activation)
        return ArchitectureSpec(
            encoder_layers=self.encoder_layers,
            dim_e1=self.dim_e1,
            dim_e2=self.dim_e2,
            predictor_layers=tuple(pred),
            decoder_layers=() if variant == "b0" else self.decoder_layers,
            dis1_layers=self.dis1_layers if variant == "full" else (),
            dis2_layers=self.dis2_layers if variant == "full" else (),
            psi_rate=self.psi_rate,
            variant=variant,
        )


def _chain_ok(layers, name, out):
    for a, b in zip(layers, layers[1:]):
        if a.output_dim != b.input_dim:
            out.append(f"{name}: layer widths do not chain ({a.output_dim} -> {b.input_dim})")


def build_architecture(
    input_dim: int,
    num_classes: int,
    dim_e1: int,
    dim_e2: int,
    enc_hidden: list[int],
    pred_hidden: list[int],
    dec_hidden: list[int],
    psi_rate: float = 0.5,
    embedding_activation: str = "tanh",
    decoder_output: str = "sigmoid",
    variant: str = "full",
) -> ArchitectureSpec:
    """Assemble a spec from layer widths.

    Disentanglers are single dense layers whose output activation matches the
    embedding activation, so they predict targets in the right range.
    """
    width = dim_e1 + dim_e2
    spec = ArchitectureSpec(
        encoder_layers=dense_stack([input_dim, *enc_hidden, width], output=embedding_activation),
        dim_e1=dim_e1,
        dim_e2=dim_e2,
        predictor_layers=dense_stack([dim_e1, *pred_hidden, num_classes], output="softmax"),
        decoder_layers=dense_stack([width, *dec_hidden, input_dim], output=decoder_output),
        dis1_layers=(LayerSpec(dim_e1, dim_e2, embedding_activation),),
        dis2_layers=(LayerSpec(dim_e2, dim_e1, embedding_activation),),
        psi_rate=psi_rate,
    )
    return spec.with_variant(variant)


def mnist_architecture(dim_e1: int = 128, dim_e2: int = 128, psi_rate: float = 0.5, variant: str = "full"):
    """Encoder 784-512-(e1+e2), predictor e1-256-10, decoder (e1+e2)-512-784."""
    return build_architecture(784, 10, dim_e1, dim_e2, [512], [256], [512], psi_rate, variant=variant)


def synthetic_architecture(
    input_dim: int,
    num_classes: int,
    dim_e1: int = 32,
    dim_e2: int = 32,
    hidden: int = 128,
    psi_rate: float = 0.5,
    variant: str = "full",
) -> ArchitectureSpec:
    return build_architecture(
        input_dim,
        num_classes,
        dim_e1,
        dim_e2,
        [hidden],
        [hidden],
        [hidden],
        psi_rate,
        decoder_output="linear",
        variant=variant,
    )


class SplitEmbedding(NamedTuple):
    e1: Tensor
    e2: Optional[Tensor]


@dataclass
class ModelGraph:
    arch: ArchitectureSpec
    params: ParamStore = field(default_factory=ParamStore)

    @property
    def variant(self) -> str:
        return self.arch.variant

    def m1_names(self) -> list[str]:
        return [n for n in self.params if ParamStore.component(n) in M1]

    def m2_names(self) -> list[str]:
        return [n for n in self.params if ParamStore.component(n) in M2]


def init_model(arch: ArchitectureSpec, seed: int) -> ModelGraph:
    """Glorot-uniform weights and zero biases, drawn from the ``init`` stream."""
    rng = ad.rng_stream(seed, "init")
    store = ParamStore()
    for comp, layers in arch.stacks().items():
        for i, layer in enumerate(layers):
            store.add(f"{comp}.layer{i}.weight", ad.glorot_uniform(rng, layer.input_dim, layer.output_dim))
            store.add(f"{comp}.layer{i}.bias", np.zeros(layer.output_dim, dtype=np.float32))
    return ModelGraph(arch, store)


def run_stack(params: ParamStore, prefix: str, layers, x: Tensor) -> Tensor:
    h = x
    for i, layer in enumerate(layers):
        if h.shape[-1] != layer.input_dim:
            raise DimensionError(f"{prefix}.layer{i}: expected width {layer.input_dim}, got {h.shape}")
        h = ad.add(ad.matmul(h, params[f"{prefix}.layer{i}.weight"]), params[f"{prefix}.layer{i}.bias"])
        h = ad.ACTIVATIONS[layer.activation](h)
    return h


def _tensor(x, params: ParamStore) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = next(iter(params.items()))[1].dtype if len(params) else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def encode_full(model: ModelGraph, x) -> Tensor:
    """Encoder output before the split."""
    x = _tensor(x, model.params)
    if x.data.ndim != 2 or x.shape[1] != model.arch.input_dim:
        raise DimensionError(f"encode: expected (batch, {model.arch.input_dim}) input, got {x.shape}")
    return run_stack(model.params, "enc", model.arch.encoder_layers, x)


def encode(model: ModelGraph, x) -> SplitEmbedding:
    """Encode and split into (e1, e2); for ``b0`` e1 is the whole code."""
    h = encode_full(model, x)
    if model.variant == "b0":
        return SplitEmbedding(h, None)
    d1 = model.arch.dim_e1
    return SplitEmbedding(ad.slice_cols(h, 0, d1), ad.slice_cols(h, d1, h.shape[1]))


def predict(model: ModelGraph, e1: Tensor) -> Tensor:
    return run_stack(model.params, "pred", model.arch.predictor_layers, e1)


def noisy_transform(e1: Tensor, psi_rate: float, rng=None, training: bool = True) -> Tensor:
    """The noisy channel on the decoder path: inverted dropout."""
    return ad.dropout(e1, psi_rate, rng, training)


def decode(model: ModelGraph, e1_noisy: Tensor, e2: Tensor) -> Tensor:
    if e1_noisy.shape[1] != model.arch.dim_e1 or e2.shape[1] != model.arch.dim_e2:
        raise DimensionError(
            f"decode: expected widths ({model.arch.dim_e1}, {model.arch.dim_e2}), "
            f"got {e1_noisy.shape} and {e2.shape}"
        )
    return run_stack(model.params, "dec", model.arch.decoder_layers, ad.concat_cols(e1_noisy, e2))


def disentangle_forward(model: ModelGraph, emb: SplitEmbedding) -> tuple[Tensor, Tensor]:
    """Returns (Dis1(e1) ~ e2, Dis2(e2) ~ e1)."""
    e2_hat = run_stack(model.params, "dis1", model.arch.dis1_layers, emb.e1)
    e1_hat = run_stack(model.params, "dis2", model.arch.dis2_layers, emb.e2)
    return e2_hat, e1_hat


class ForwardPass(NamedTuple):
    emb: SplitEmbedding
    probs: Tensor
    x_hat: Optional[Tensor]
    e2_hat: Optional[Tensor]
    e1_hat: Optional[Tensor]


def forward(model: ModelGraph, x, rng=None, training: bool = True, psi_rate: Optional[float] = None) -> ForwardPass:
    """Run every network the variant has. Noise touches only the decoder input."""
    psi_rate = model.arch.psi_rate if psi_rate is None else psi_rate
    emb = encode(model, x)
    probs = predict(model, emb.e1)
    x_hat = e2_hat = e1_hat = None
    if model.variant != "b0":
        x_hat = decode(model, noisy_transform(emb.e1, psi_rate, rng, training), emb.e2)
    if model.variant == "full":
        e2_hat, e1_hat = disentangle_forward(model, emb)
    return ForwardPass(emb, probs, x_hat, e2_hat, e1_hat)
