"""Self-attention next-event predictor with functional time embeddings.

Each prediction is made from a prefix of at most ``max_seq_len`` events.
Input times are re-referenced to the candidate time of the event being
predicted (``lag_i = target_time - t_i``), embedded, concatenated to the event
embeddings, passed through an interaction layer and then through causal
self-attention blocks.  The last position's representation is scored against
the event-embedding table (shared input/output embeddings).

Prefixes are left-padded, so the most recent event always sits in the last
row and padded rows are excluded as attention keys.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import EventSequence
from .embeddings import EMBEDDER_NAMES, PositionalEncoding, make_embedder
from .streams import rng_stream
from .validation import CheckpointError, ConfigError, InputError, check_times

__all__ = [
    "ModelConfig",
    "Examples",
    "TimeAttentionModel",
    "lag_transform",
    "make_examples",
    "attention_block",
    "export_attention",
]

_MASKED = -1e30


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``embedder_params`` are forwarded to the embedder constructor (e.g.
    ``{"k": 5, "jmax": 8}`` for ``mercer``, ``{"d": 16}`` for Bochner
    families).  ``n_neg`` negatives are sampled only when ``vocab_size``
    exceeds ``full_softmax_max_vocab``.
    """

    vocab_size: int
    event_dim: int = 32
    embedder: str = "mercer"
    embedder_params: dict = field(default_factory=dict)
    num_blocks: int = 1
    num_heads: int = 1
    interaction: str = "mlp_relu"
    hidden_dim: int = 64
    max_seq_len: int = 8
    n_neg: int = 100
    full_softmax_max_vocab: int = 1000
    residual: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.embedder not in EMBEDDER_NAMES:
            raise ConfigError(f"unknown embedder {self.embedder!r}")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.num_heads < 1 or self.event_dim % self.num_heads:
            raise ConfigError(f"num_heads={self.num_heads} must divide event_dim={self.event_dim}")
        if self.interaction not in ("linear", "mlp_relu"):
            raise ConfigError(f"interaction must be 'linear' or 'mlp_relu', got {self.interaction!r}")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.n_neg < 1:
            raise ConfigError("n_neg must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_kv(self) -> str:
        """Flat ``key = json-value`` text; embedder params use ``embedder.<name>`` keys."""
        lines = []
        for key, value in self.to_dict().items():
            if key == "embedder_params":
                lines += [f"embedder.{k} = {json.dumps(v)}" for k, v in sorted(value.items())]
            else:
                lines.append(f"{key} = {json.dumps(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "ModelConfig":
        values: dict = {"embedder_params": {}}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                parsed = json.loads(value)
            except json.JSONDecodeError:
                parsed = value
            if key.startswith("embedder."):
                values["embedder_params"][key.split(".", 1)[1]] = parsed
            else:
                values[key] = parsed
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def lag_transform(times, target_time: float) -> np.ndarray:
    """``target_time - t_i`` for each input time."""
    times = check_times(times, name="times").reshape(-1)
    target_time = float(check_times(target_time, name="target_time"))
    if times.size and target_time < times.max():
        raise InputError(f"target time {target_time} precedes the last event time {times.max()}")
    return target_time - times


class Examples(NamedTuple):
    """Padded prediction problems: one row per (prefix, target) pair."""

    ids: np.ndarray  # (N, L) int, 0 where padded
    lags: np.ndarray  # (N, L) float, 0 where padded
    valid: np.ndarray  # (N, L) bool
    targets: np.ndarray  # (N,) int, -1 when unknown

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def take(self, idx) -> "Examples":
        return Examples(self.ids[idx], self.lags[idx], self.valid[idx], self.targets[idx])


def _prefix_rows(seq: EventSequence, L: int, positions: np.ndarray, target_times: np.ndarray) -> Examples:
    cols = positions[:, None] - L + np.arange(L)[None, :]
    valid = cols >= 0
    safe = np.where(valid, cols, 0)
    ids = np.where(valid, seq.events[safe], 0)
    lags = np.where(valid, target_times[:, None] - seq.times[safe], 0.0)
    targets = np.where(positions < len(seq), seq.events[np.minimum(positions, len(seq) - 1)], -1)
    return Examples(ids.astype(np.int64), lags, valid, targets.astype(np.int64))


def make_examples(sequences, max_seq_len: int, vocab_size: int | None = None) -> Examples:
    """Every position ``i >= 1`` of every sequence, predicted from the events before it
    with lags measured from ``t_i``."""
    parts = []
    for seq in sequences:
        if vocab_size is not None and len(seq) and seq.events.max() >= vocab_size:
            raise InputError(f"event id {seq.events.max()} outside vocabulary of size {vocab_size}")
        if len(seq) < 2:
            continue
        pos = np.arange(1, len(seq))
        parts.append(_prefix_rows(seq, max_seq_len, pos, seq.times[pos]))
    if not parts:
        L = max_seq_len
        return Examples(np.zeros((0, L), np.int64), np.zeros((0, L)), np.zeros((0, L), bool), np.zeros(0, np.int64))
    return Examples(*(np.concatenate(cols) for cols in zip(*parts)))


def query_examples(seq: EventSequence, target_times, max_seq_len: int) -> Examples:
    """Predict the event following all of ``seq`` at each candidate time."""
    if len(seq) == 0:
        raise InputError("sequence must contain at least one event")
    target_times = check_times(target_times, name="target_times").reshape(-1)
    for t in target_times:
        lag_transform(seq.times, t)
    pos = np.full(target_times.size, len(seq))
    return _prefix_rows(seq, max_seq_len, pos, target_times)


def _attention_mask(valid: np.ndarray) -> np.ndarray:
    L = valid.shape[1]
    causal = np.tril(np.ones((L, L), dtype=bool))
    allowed = causal[None] & (valid[:, None, :] | np.eye(L, dtype=bool)[None])
    return np.where(allowed, 0.0, _MASKED)


def attention_block(H: Tensor, mask: np.ndarray, params: dict, prefix: str, num_heads: int, residual: bool = True):
    """Multi-head scaled dot-product attention with an additive mask.

    Returns the block output and the attention weights, shape
    ``(batch, heads, L, L)``.
    """
    q = ad.add(ad.matmul(H, params[f"{prefix}.Wq"]), params[f"{prefix}.bq"])
    k = ad.add(ad.matmul(H, params[f"{prefix}.Wk"]), params[f"{prefix}.bk"])
    v = ad.add(ad.matmul(H, params[f"{prefix}.Wv"]), params[f"{prefix}.bv"])
    width = H.shape[-1]
    dh = width // num_heads
    mask_t = Tensor(mask)
    heads, weights = [], []
    for h in range(num_heads):
        cols = (Ellipsis, slice(h * dh, (h + 1) * dh))
        qh, kh, vh = ad.index(q, cols), ad.index(k, cols), ad.index(v, cols)
        scores = ad.add(ad.scale(ad.matmul(qh, ad.transpose_last(kh)), 1.0 / math.sqrt(dh)), mask_t)
        a = ad.softmax_rows(scores)
        weights.append(a.data)
        heads.append(ad.matmul(a, vh))
    out = heads[0] if num_heads == 1 else ad.concat(heads, axis=-1)
    if residual:
        out = ad.add(H, out)
    return out, np.stack(weights, axis=1)


class Forward(NamedTuple):
    logits: Tensor  # (N, V)
    hidden: Tensor  # (N, event_dim), last-position representation
    attention: list  # per block, (N, heads, L, L)


class TimeAttentionModel:
    """Parameters and forward pass for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, seed: int = 0, time_spans=None):
        config.validate()
        self.config = config
        self.seed = int(seed)
        L = config.max_seq_len
        if config.embedder == "posenc":
            kw = {"d": 16, **config.embedder_params}
            self.embedder = make_embedder("posenc", max_len=L, random_state=self.seed, **kw)
        else:
            kw = dict(config.embedder_params)
            if config.embedder != "mercer" and config.embedder != "bochner-nonparam":
                kw.setdefault("random_state", self.seed)
            self.embedder = make_embedder(config.embedder, **kw)
        self.embedder.fit(time_spans)
        self.params: dict[str, Tensor] = {}
        rng = rng_stream(self.seed, "model.init")
        dE, dT, V = config.event_dim, self.embedder.dim, config.vocab_size

        def glorot(fan_in, fan_out):
            a = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-a, a, (fan_in, fan_out))

        self._add("Z", rng.normal(0.0, 1.0 / math.sqrt(dE), (V, dE)))
        if config.interaction == "linear":
            self._add("W0", glorot(dE + dT, dE))
            self._add("b0", np.zeros(dE))
        else:
            self._add("W0", glorot(dE + dT, config.hidden_dim))
            self._add("b0", np.zeros(config.hidden_dim))
            self._add("W1", glorot(config.hidden_dim, dE))
            self._add("b1", np.zeros(dE))
        for b in range(config.num_blocks):
            for m in ("q", "k", "v"):
                self._add(f"blk{b}.W{m}", glorot(dE, dE))
                self._add(f"blk{b}.b{m}", np.zeros(dE))
        for name, p in self.embedder.params_.items():
            self.params[f"time.{name}"] = p
            p.name = f"time.{name}"

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    # ------------------------------------------------------------ parameters

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: p.data.copy() for k, p in self.params.items()}
        for aux in ("eps_", "u_"):
            if hasattr(self.embedder, aux):
                out[f"aux.{aux.rstrip('_')}"] = np.array(getattr(self.embedder, aux))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise CheckpointError(f"parameter names do not match the config (missing={missing}, unexpected={extra})")
        for name, arr in state.items():
            if np.shape(arr) != expected[name].shape:
                raise CheckpointError(f"{name}: checkpoint shape {np.shape(arr)} != config shape {expected[name].shape}")
        for name, arr in state.items():
            if name.startswith("aux."):
                frozen = np.array(arr, dtype=np.float64)
                frozen.setflags(write=False)
                setattr(self.embedder, name[4:] + "_", frozen)
            else:
                self.params[name].data = np.array(arr, dtype=np.float64)

    # ------------------------------------------------------------ forward

    def time_features(self, ex: Examples) -> Tensor:
        if isinstance(self.embedder, PositionalEncoding):
            L = ex.ids.shape[1]
            return self.embedder.embed_positions(np.broadcast_to(np.arange(L), ex.ids.shape))
        return self.embedder.embed(ex.lags)

    def forward(self, ex: Examples, dropout_rng: np.random.Generator | None = None) -> Forward:
        cfg, p = self.config, self.params
        if ex.ids.size and ex.ids.max() >= cfg.vocab_size:
            raise InputError(f"event id {ex.ids.max()} outside vocabulary of size {cfg.vocab_size}")
        if ex.ids.shape[1] > cfg.max_seq_len:
            raise InputError(f"prefix length {ex.ids.shape[1]} exceeds max_seq_len={cfg.max_seq_len}")
        z = ad.gather_rows(p["Z"], ex.ids)
        x = ad.concat([z, self.time_features(ex)], axis=-1)
        if cfg.interaction == "linear":
            h = ad.add(ad.matmul(x, p["W0"]), p["b0"])
        else:
            h = ad.relu(ad.add(ad.matmul(x, p["W0"]), p["b0"]))
            h = ad.add(ad.matmul(h, p["W1"]), p["b1"])
        h = self._dropout(h, dropout_rng)
        if cfg.residual:
            h = ad.add(h, z)
        mask = _attention_mask(ex.valid)
        weights = []
        for b in range(cfg.num_blocks):
            h, w = attention_block(h, mask, p, f"blk{b}", cfg.num_heads, cfg.residual)
            h = self._dropout(h, dropout_rng)
            weights.append(w)
        last = ad.index(h, (slice(None), -1, slice(None)))
        logits = ad.matmul(last, ad.transpose_last(p["Z"]))
        return Forward(logits, last, weights)

    def _dropout(self, h: Tensor, rng) -> Tensor:
        rate = self.config.dropout
        if rng is None or rate <= 0:
            return h
        keep = (rng.random(h.shape) >= rate) / (1.0 - rate)
        return ad.mul(h, Tensor(keep))

    def predict_logits(self, seq: EventSequence, target_time: float) -> np.ndarray:
        """Scores for the event following ``seq`` at ``target_time``."""
        ex = query_examples(seq, [target_time], self.config.max_seq_len)
        return self.forward(ex).logits.data[0]


def export_attention(model: TimeAttentionModel, seq: EventSequence, target_times) -> np.ndarray:
    """Final-block, head-averaged attention of the last position over the input events.

    Row ``r`` holds the weights for ``target_times[r]``; columns are the
    (left-truncated) events of ``seq`` in order.
    """
    target_times = check_times(target_times, name="target_times").reshape(-1)
    if np.any(np.diff(target_times) < 0):
        raise InputError("target_times must be ascending")
    ex = query_examples(seq, target_times, model.config.max_seq_len)
    fwd = model.forward(ex)
    w = fwd.attention[-1].mean(axis=1)[:, -1, :]
    n = min(len(seq), model.config.max_seq_len)
    return w[:, -n:]
