"""The DED encoder-decoder: embeddings, per-channel recurrent encoders,
attention fusion and a residual fully-connected decoder.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tape, Tensor
from .errors import ConfigurationError, DegenerateInputError, DimensionError
from .recurrent import gru_sequence, lstm_sequence
from .trajectory import DAYS_PER_WEEK, HOURS_PER_DAY, MetaTrajectory, Scaler

CELLS = ("lstm", "gru", "bilstm")
VARIANTS = ("full", "wt", "wa")
_GATES = {"lstm": 4, "gru": 3, "bilstm": 4}


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    rnn_units: int = 64
    cell: str = "lstm"
    decoder_widths: tuple[int, ...] = (1024, 512, 256, 64)
    use_temporal_embeddings: bool = True
    use_attention: bool = True

    def __post_init__(self):
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        if self.cell not in CELLS:
            raise ConfigurationError(f"cell must be one of {CELLS}, got {self.cell!r}")
        if self.embed_dim < 1 or self.rnn_units < 1:
            raise ConfigurationError("embed_dim and rnn_units must be positive")
        if self.rnn_units != self.embed_dim:
            raise ConfigurationError(
                f"rnn_units ({self.rnn_units}) must equal embed_dim ({self.embed_dim}) "
                "so channel features can be fused and added back in the decoder"
            )
        if not self.decoder_widths or self.decoder_widths[-1] != self.embed_dim:
            raise ConfigurationError(
                f"last decoder width must equal embed_dim {self.embed_dim}, got {self.decoder_widths}"
            )
        if any(w < 1 for w in self.decoder_widths):
            raise ConfigurationError(f"decoder widths must be positive, got {self.decoder_widths}")

    @classmethod
    def for_variant(cls, variant: str = "full", cell: str = "lstm", embed_dim: int = 64,
                    decoder_widths: Sequence[int] | None = None) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {variant!r}")
        if decoder_widths is None:
            decoder_widths = scaled_widths(embed_dim)
        return cls(
            embed_dim=embed_dim,
            rnn_units=embed_dim,
            cell=cell,
            decoder_widths=tuple(decoder_widths),
            use_temporal_embeddings=variant != "wt",
            use_attention=variant != "wa",
        )

    @property
    def variant(self) -> str:
        if not self.use_temporal_embeddings:
            return "wt"
        return "full" if self.use_attention else "wa"

    @property
    def channels(self) -> tuple[str, ...]:
        return ("spatial", "weekday", "hour") if self.use_temporal_embeddings else ("spatial",)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_widths"] = list(self.decoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


def scaled_widths(embed_dim: int) -> tuple[int, ...]:
    """Decoder chain with the 1024/512/256/64 proportions, ending at ``embed_dim``."""
    return (16 * embed_dim, 8 * embed_dim, 4 * embed_dim, embed_dim)


# ---------------------------------------------------------------------------
# parameters


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, H = config.embed_dim, config.rnn_units
    G = _GATES[config.cell]
    shapes: dict[str, tuple[int, ...]] = {"spatial.w": (2, D), "spatial.b": (D,)}
    if config.use_temporal_embeddings:
        shapes["embed.weekday"] = (DAYS_PER_WEEK, D)
        shapes["embed.hour"] = (HOURS_PER_DAY, D)
    for channel in config.channels:
        directions = ("fwd", "bwd") if config.cell == "bilstm" else ("",)
        for direction in directions:
            p = f"encoder.{channel}." + (f"{direction}." if direction else "")
            shapes[p + "w_x"] = (D, G * H)
            shapes[p + "w_h"] = (H, G * H)
            shapes[p + "b"] = (G * H,)
        if config.cell == "bilstm":
            shapes[f"encoder.{channel}.proj.w"] = (2 * H, H)
            shapes[f"encoder.{channel}.proj.b"] = (H,)
    F = len(config.channels)
    if config.use_attention and F > 1:
        shapes["attention.w"] = (F, F)
        shapes["attention.b"] = (F,)
    width_in = H
    for i, width in enumerate(config.decoder_widths):
        shapes[f"decoder.fc{i}.w"] = (width_in, width)
        shapes[f"decoder.fc{i}.b"] = (width,)
        width_in = width
    shapes["decoder.out.w"] = (width_in, 1)
    shapes["decoder.out.b"] = (1,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> ParameterStore:
    """Xavier-uniform weight matrices; zero biases and zero embedding tables."""
    store = ParameterStore()
    shapes = parameter_shapes(config)
    seeds = np.random.SeedSequence(seed).spawn(len(shapes))
    for (name, shape), ss in zip(shapes.items(), seeds):
        if name.startswith("embed.") or len(shape) == 1:
            store.add(name, np.zeros(shape))
        else:
            store.add(name, ad.xavier_init(shape, np.random.default_rng(ss)))
    return store


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """Padded features ``[B, L, 4]`` = (dlat, dlon, weekday, hour), already scaled."""

    features: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray  # seconds
    targets: np.ndarray  # labels in the task's normalized space
    task_id: str

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.features.shape[1])[None, :] < self.lengths[:, None]

    def __len__(self) -> int:
        return self.features.shape[0]


def make_batch(trajs: Sequence[MetaTrajectory], scaler: Scaler, task_id: str | None = None) -> Batch:
    if not trajs:
        raise DegenerateInputError("cannot build an empty batch")
    lengths = np.array([len(t) for t in trajs])
    if (lengths < 1).any():
        raise DegenerateInputError("trajectory with no rows in batch")
    features = np.zeros((len(trajs), int(lengths.max()), 4))
    for i, traj in enumerate(trajs):
        features[i, : len(traj)] = scaler.apply(traj).rows[:, :4]
    labels = np.array([t.label for t in trajs], dtype=np.float64)
    return Batch(features, lengths, labels, scaler.normalize_label(labels), task_id or trajs[0].task_id)


# ---------------------------------------------------------------------------
# layers


def embed_categorical(index, table: Tensor) -> Tensor:
    return ad.embed(table, np.asarray(index, dtype=np.int64))


def _run_cell(x: Tensor, mask: np.ndarray, weight, cell: str) -> Tensor:
    if cell == "gru":
        return gru_sequence(x, mask, weight("w_x"), weight("w_h"), weight("b"))
    if cell == "lstm":
        return lstm_sequence(x, mask, weight("w_x"), weight("w_h"), weight("b"))
    fwd = lstm_sequence(x, mask, weight("fwd.w_x"), weight("fwd.w_h"), weight("fwd.b"))
    bwd = lstm_sequence(x, mask, weight("bwd.w_x"), weight("bwd.w_h"), weight("bwd.b"), reverse=True)
    return ad.concat([fwd, bwd], axis=-1)


def encode_channel(x: Tensor, mask: np.ndarray, params: Mapping[str, Tensor], prefix: str, cell: str) -> Tensor:
    """Final recurrent state ``[B, n_r]`` of one channel ``x[B, L, D]``.

    LSTM channels yield the cell state; BiLSTM concatenates the forward final
    and backward initial cell states and projects them back to ``n_r``.
    """
    out = _run_cell(x, mask, lambda suffix: params[prefix + suffix], cell)
    if cell == "bilstm":
        out = ad.matmul(out, params[prefix + "proj.w"]) + params[prefix + "proj.b"]
    return out


def encode_channels(
    inputs: Sequence[Tensor], mask: np.ndarray, params: Mapping[str, Tensor], channels: Sequence[str], cell: str
) -> list[Tensor]:
    """Same as :func:`encode_channel` per channel, with all channels run in lockstep."""
    x = ad.stack(inputs, axis=0)

    def weight(suffix):
        return ad.stack([params[f"encoder.{c}.{suffix}"] for c in channels], axis=0)

    out = _run_cell(x, mask, weight, cell)
    encoded = [out[i] for i in range(len(channels))]
    if cell == "bilstm":
        encoded = [
            ad.matmul(e, params[f"encoder.{c}.proj.w"]) + params[f"encoder.{c}.proj.b"]
            for e, c in zip(encoded, channels)
        ]
    return encoded


def attention_fuse(features: Sequence[Tensor], weight: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """Per-dimension softmax weighting of F channel features ``[B, D]``.

    Returns the fused ``[B, D]`` representation and the weights ``[B, D, F]``.
    """
    if len({f.shape for f in features}) != 1:
        raise DimensionError(f"fusion inputs differ in shape: {[f.shape for f in features]}")
    stacked = ad.stack(features, axis=-1)
    scores = ad.relu(ad.matmul(stacked, weight) + bias)
    weights = ad.softmax(scores, axis=-1)
    return ad.reduce_sum(weights * stacked, axis=-1), weights


def mean_fuse(features: Sequence[Tensor]) -> Tensor:
    return ad.reduce_mean(ad.stack(features, axis=-1), axis=-1)


def residual_decode(fused: Tensor, params: Mapping[str, Tensor], n_layers: int) -> Tensor:
    h = fused
    for i in range(n_layers):
        if h.shape[-1] != params[f"decoder.fc{i}.w"].shape[0]:
            raise ConfigurationError(f"decoder layer {i} expects width {params[f'decoder.fc{i}.w'].shape[0]}")
        h = ad.matmul(h, params[f"decoder.fc{i}.w"]) + params[f"decoder.fc{i}.b"]
        if i < n_layers - 1:
            h = ad.relu(h)
    if h.shape != fused.shape:
        raise ConfigurationError(f"decoder chain ends at width {h.shape[-1]}, fused width is {fused.shape[-1]}")
    return ad.matmul(h + fused, params["decoder.out.w"]) + params["decoder.out.b"]


def forward(batch: Batch, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Normalized travel-time predictions ``[B]``."""
    mask = batch.mask
    feats = batch.features
    inputs = {"spatial": ad.matmul(Tensor(feats[:, :, 0:2]), params["spatial.w"]) + params["spatial.b"]}
    if config.use_temporal_embeddings:
        inputs["weekday"] = embed_categorical(feats[:, :, 2], params["embed.weekday"])
        inputs["hour"] = embed_categorical(feats[:, :, 3], params["embed.hour"])
    encoded = encode_channels([inputs[c] for c in config.channels], mask, params, config.channels, config.cell)
    if len(encoded) == 1:
        fused = encoded[0]
    elif config.use_attention:
        fused, _ = attention_fuse(encoded, params["attention.w"], params["attention.b"])
    else:
        fused = mean_fuse(encoded)
    out = residual_decode(fused, params, len(config.decoder_widths))
    return ad.reshape(out, (len(batch),))


def loss(predictions: Tensor, targets) -> Tensor:
    """Mean absolute error."""
    targets = targets if isinstance(targets, Tensor) else Tensor(targets)
    if predictions.shape != targets.shape:
        raise DimensionError(f"loss: shapes {predictions.shape} and {targets.shape} differ")
    if predictions.data.size == 0:
        raise DegenerateInputError("loss of an empty batch")
    return ad.reduce_mean(ad.abs_(predictions - targets))


def train_step(store: ParameterStore, batch: Batch, config: ModelConfig, lr: float = 1e-3) -> float:
    """One forward/backward pass and Adam update; returns the pre-update loss."""
    leaves = store.leaves()
    with Tape() as tape:
        value = loss(forward(batch, leaves, config), batch.targets)
        grads = tape.gradients(value, leaves)
    ad.adam_step(store, grads, lr=lr)
    return float(value.data)


def predict(store: ParameterStore, batch: Batch, config: ModelConfig) -> np.ndarray:
    """Normalized predictions without recording a tape."""
    leaves = {name: Tensor(value) for name, value in store.params.items()}
    return forward(batch, leaves, config).data.copy()
