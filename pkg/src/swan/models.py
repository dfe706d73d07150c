"""Complete sequence classifiers assembled from the attention blocks.

Five variants share one interface (forward a sample, get a probability and an
optional attention trace):

* ``swan`` — positional encoding, limited-range multi-head self-attention with
  residual + layer norm + feed-forward, windowing cross-attention from
  max-pooled window prompts, post-window layer norm, learned window weighing,
  metadata-concatenated sigmoid head.
* ``swan_no_selfatt`` — windowing attends directly to the encoded input, which
  makes attention weights map one-to-one onto input steps.
* ``swan_no_winatt`` — windowing and weighing replaced by mean pooling.
* ``transformer`` — encoder-only stack with unmasked self-attention.
* ``windowed_linear`` — fixed-window pooled statistics into a logistic head;
  the classic fixed-window segmentation approach, kept as the window-size
  sensitivity reference.

Raw series values are used directly as the model stream (hidden dimension ==
input dimension), so no input embedding exists.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attention import (
    ConfigError,
    WindowSpec,
    build_self_mask,
    build_window_mask,
    init_multihead,
    positional_encoding,
    self_attention,
    self_attention_banded,
    window_prompts,
    window_weighing,
    windowing_attention,
)
from .tensor import Tensor

VARIANTS = ("swan", "swan_no_selfatt", "swan_no_winatt", "transformer", "windowed_linear")

CHECKPOINT_FORMAT = "swan-checkpoint/1"

# keeps the head strictly inside (0, 1) even when the logit saturates float64
PROB_SQUEEZE = 1e-9


class InputError(ValueError):
    """Sample violates the model's input contract."""


@dataclass(frozen=True)
class ModelConfig:
    """Architectural and training hyperparameters for every variant."""

    variant: str = "swan"
    d_model: int = 10
    heads: int = 2
    r: int = 30
    s: int = 15
    r_self: int = 10
    max_len: int = 1500
    metadata_dim: int = 4
    depth: int = 2
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    use_pos_enc: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.heads < 1 or self.d_model % self.heads != 0:
            raise ConfigError(f"heads={self.heads} must divide d_model={self.d_model}")
        if self.use_pos_enc and self.d_model % 2 != 0:
            raise ConfigError(f"positional encoding needs even d_model, got {self.d_model}")
        for name in ("r", "s", "max_len", "depth", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.r_self < 0 or self.metadata_dim < 0:
            raise ConfigError("r_self and metadata_dim must be non-negative")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


@dataclass
class AttentionTrace:
    """Interpretability payload from one forward pass of a windowing variant."""

    attention: np.ndarray      # (L_w, L) head-averaged window attention rows
    window_weights: np.ndarray  # (L_w,) learned saliency per window
    alive: np.ndarray           # (L_w,) windows containing at least one real step
    n_real: int


class SequenceClassifier:
    """Shared parameter registry and prediction plumbing."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._params: list[tuple[str, Tensor]] = []

    # -- parameters -----------------------------------------------------

    def _param(self, name: str, data) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params.append((name, t))
        return t

    def _register(self, multihead) -> None:
        for name, t in multihead.named():
            self._params.append((name, t))

    def _linear(self, rng, name, n_in, n_out, scale=None):
        if scale is None:
            scale = 1.0 / np.sqrt(n_in)
        w = self._param(f"{name}.w", rng.normal(0.0, scale, (n_in, n_out)))
        b = self._param(f"{name}.b", np.zeros(n_out))
        return w, b

    def _layer_norm_params(self, name, dim):
        g = self._param(f"{name}.gain", np.ones(dim))
        b = self._param(f"{name}.bias", np.zeros(dim))
        return g, b

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params)

    def param_count(self) -> int:
        return sum(p.size for _, p in self._params)

    def get_state(self) -> list[np.ndarray]:
        return [p.data.copy() for _, p in self._params]

    def set_state(self, arrays) -> None:
        if len(arrays) != len(self._params):
            raise ConfigError(f"state has {len(arrays)} arrays, model has {len(self._params)}")
        for (name, p), a in zip(self._params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != p.shape:
                raise ConfigError(f"state for {name!r} has shape {a.shape}, expected {p.shape}")
            p.data = a.copy()

    # -- inference ------------------------------------------------------

    def _prepare(self, sample):
        series = np.asarray(sample.series, dtype=np.float64)
        if series.ndim != 2 or series.shape[1] != self.config.d_model:
            raise InputError(
                f"series must be (L, {self.config.d_model}), got {series.shape}"
            )
        if series.shape[0] > self.config.max_len:
            raise InputError(
                f"sequence length {series.shape[0]} exceeds max_len {self.config.max_len}"
            )
        meta = np.asarray(sample.metadata, dtype=np.float64).reshape(-1)
        if meta.size != self.config.metadata_dim:
            raise InputError(
                f"metadata must have {self.config.metadata_dim} values, got {meta.size}"
            )
        n_real = int(getattr(sample, "real_len", series.shape[0]) or series.shape[0])
        if not (1 <= n_real <= series.shape[0]):
            raise InputError(f"real_len {n_real} out of range for {series.shape[0]} rows")
        return series, meta, n_real

    def _head(self, emb: Tensor, meta: np.ndarray) -> Tensor:
        z = T.concat([emb, Tensor(meta[None, :])], axis=1)
        p = T.sigmoid(T.matmul(z, self.head_w) + self.head_b)
        return p * (1.0 - 2.0 * PROB_SQUEEZE) + PROB_SQUEEZE

    def forward(self, sample):
        raise NotImplementedError

    def predict_proba(self, sample) -> tuple[float, AttentionTrace | None]:
        """Probability of class 1 for one sample, without gradient recording."""
        p, trace = self.forward(sample)
        return p.item(), trace


def _mean_pool_real(h: Tensor, n_real: int) -> Tensor:
    pool = np.zeros((1, h.shape[0]))
    pool[0, :n_real] = 1.0 / n_real
    return T.matmul(Tensor(pool), h)


class SwanModel(SequenceClassifier):
    """The windowing attention classifier and its two ablations."""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        self.spec = WindowSpec(config.r, config.s, config.r_self)
        self.with_self_att = config.variant in ("swan", "swan_no_winatt")
        self.with_win_att = config.variant in ("swan", "swan_no_selfatt")
        if self.with_self_att:
            self.sa = init_multihead(d, config.heads, rng, "selfatt")
            self._register(self.sa)
            self.ln1_g, self.ln1_b = self._layer_norm_params("selfatt.norm", d)
            self.ff1_w, self.ff1_b = self._linear(rng, "selfatt.ff1", d, d)
            self.ff2_w, self.ff2_b = self._linear(rng, "selfatt.ff2", d, d)
        if self.with_win_att:
            self.wa = init_multihead(d, config.heads, rng, "winatt")
            self._register(self.wa)
            self.ln2_g, self.ln2_b = self._layer_norm_params("winatt.norm", d)
            # bare weighing matrix, deliberately bias-free; small init keeps the
            # unnormalized weighted window sum away from head saturation
            self.w_w = self._param("weighing.w", rng.normal(0.0, 1.0 / d, (d, 1)))
        n_head_in = d + config.metadata_dim
        self.head_w, self.head_b = self._linear(rng, "head", n_head_in, 1, scale=1.0 / n_head_in)

    def forward(self, sample):
        series, meta, n_real = self._prepare(sample)
        length = series.shape[0]
        d = self.config.d_model
        x_data = series
        if self.config.use_pos_enc:
            x_data = series + positional_encoding(length, d)
        real = np.zeros(length, dtype=bool)
        real[:n_real] = True

        h = Tensor(x_data)
        if self.with_self_att:
            r_self = self.config.r_self
            if 2 * r_self + 1 < length:
                att = self_attention_banded(h, self.sa, r_self, real)
            else:
                att = self_attention(h, self.sa, build_self_mask(length, r_self), real)
            a = T.layer_norm(h + att, self.ln1_g, self.ln1_b)
            f = T.matmul(T.relu(T.matmul(a, self.ff1_w) + self.ff1_b), self.ff2_w) + self.ff2_b
            h = a + f

        trace = None
        if self.with_win_att:
            prompts, alive = window_prompts(h, self.spec, real)
            wout, att_matrix = windowing_attention(
                h, prompts, self.wa, build_window_mask(length, self.spec), real
            )
            wnorm = T.layer_norm(wout, self.ln2_g, self.ln2_b)
            emb, weights = window_weighing(wnorm, self.w_w, alive)
            trace = AttentionTrace(att_matrix, weights, alive, n_real)
        else:
            emb = _mean_pool_real(h, n_real)
        return self._head(emb, meta), trace


class TransformerBaseline(SequenceClassifier):
    """Encoder-only stack with unmasked self-attention and mean pooling."""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        self.layers = []
        for i in range(config.depth):
            mha = init_multihead(d, config.heads, rng, f"enc{i}.att")
            self._register(mha)
            ln1 = self._layer_norm_params(f"enc{i}.norm1", d)
            ff1 = self._linear(rng, f"enc{i}.ff1", d, d)
            ff2 = self._linear(rng, f"enc{i}.ff2", d, d)
            ln2 = self._layer_norm_params(f"enc{i}.norm2", d)
            self.layers.append((mha, ln1, ff1, ff2, ln2))
        self.head_w, self.head_b = self._linear(rng, "head", d + config.metadata_dim, 1)

    def forward(self, sample):
        series, meta, n_real = self._prepare(sample)
        length = series.shape[0]
        x_data = series
        if self.config.use_pos_enc:
            x_data = series + positional_encoding(length, self.config.d_model)
        real = np.zeros(length, dtype=bool)
        real[:n_real] = True
        full = build_self_mask(length, length)

        h = Tensor(x_data)
        for mha, (g1, b1), (w1, bb1), (w2, bb2), (g2, b2) in self.layers:
            att = self_attention(h, mha, full, real)
            a = T.layer_norm(h + att, g1, b1)
            f = T.matmul(T.relu(T.matmul(a, w1) + bb1), w2) + bb2
            h = T.layer_norm(a + f, g2, b2)
        return self._head(_mean_pool_real(h, n_real), meta), None


class WindowedLinearBaseline(SequenceClassifier):
    """Fixed-window pooled statistics (mean/std/min/max per dim) into a logistic head.

    Window size and stride come from the ``r`` / ``s`` config fields; stats are
    mean-pooled across windows, so the prediction depends on the input only
    through the pooled statistics.
    """

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        n_features = 4 * config.d_model + config.metadata_dim
        self.head_w, self.head_b = self._linear(rng, "head", n_features, 1)

    def pooled_features(self, series: np.ndarray, n_real: int) -> np.ndarray:
        x = series[:n_real]
        size, step = self.config.r, self.config.s
        stats = []
        for start in range(0, n_real, step):
            w = x[start:start + size]
            stats.append(
                np.concatenate([w.mean(axis=0), w.std(axis=0), w.min(axis=0), w.max(axis=0)])
            )
        return np.mean(stats, axis=0)

    def forward(self, sample):
        series, meta, n_real = self._prepare(sample)
        feats = self.pooled_features(series, n_real)
        return self._head(Tensor(feats[None, :]), meta), None


def build_variant(config: ModelConfig) -> SequenceClassifier:
    """Construct the classifier named by ``config.variant``."""
    if config.variant in ("swan", "swan_no_selfatt", "swan_no_winatt"):
        return SwanModel(config)
    if config.variant == "transformer":
        return TransformerBaseline(config)
    if config.variant == "windowed_linear":
        return WindowedLinearBaseline(config)
    raise ConfigError(f"unknown variant {config.variant!r}")  # unreachable after validation


def count_params(model: SequenceClassifier) -> int:
    return model.param_count()


def save_checkpoint(model: SequenceClassifier, path) -> None:
    """Serialize config plus a flat list of named parameter arrays as JSON."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "params": [
            {"name": name, "shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
            for name, p in model.parameters()
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> SequenceClassifier:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unrecognized checkpoint format {payload.get('format')!r}")
    model = build_variant(ModelConfig(**payload["config"]))
    by_name = dict(payload_params_iter(payload))
    arrays = []
    for name, p in model.parameters():
        if name not in by_name:
            raise ConfigError(f"checkpoint is missing parameter {name!r}")
        shape, values = by_name[name]
        arrays.append(np.asarray(values, dtype=np.float64).reshape(shape))
    model.set_state(arrays)
    return model


def payload_params_iter(payload):
    for entry in payload["params"]:
        yield entry["name"], (tuple(entry["shape"]), entry["values"])
