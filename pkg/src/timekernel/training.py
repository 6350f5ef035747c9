"""Adam, next-event losses, ranking metrics, checkpoints and the training loop."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .model import Examples, ModelConfig, TimeAttentionModel, make_examples
from .streams import rng_stream
from .validation import CheckpointError, ConfigError, InputError, NumericalError

log = logging.getLogger(__name__)

__all__ = [
    "OptimConfig",
    "AdamState",
    "adam_step",
    "cross_entropy",
    "sampled_cross_entropy",
    "masked_next_event_loss",
    "ranks_from_logits",
    "ranking_metrics",
    "MetricReport",
    "evaluate",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "Trainer",
    "TrainResult",
    "TrainingDiverged",
    "build_model",
    "train",
]


@dataclass
class OptimConfig:
    """Optimiser and loop settings.

    ``beta1`` and ``epsilon`` are conventional Adam defaults; only the learning
    rate, ``beta2`` and the early-stopping patience have published values.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 30
    patience: int = 10
    monitor: str = "accuracy"

    def __post_init__(self):
        for name in ("learning_rate", "beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("patience, max_epochs and batch_size must be >= 1")
        if self.monitor not in MetricReport.__dataclass_fields__:
            raise ConfigError(f"unknown monitoring metric {self.monitor!r}")


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, cfg: OptimConfig) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update on numpy arrays; returns new params and state."""
    for name, g in grads.items():
        if name not in params:
            raise InputError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise InputError(f"{name}: gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_params, m, v = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        m[name] = b1 * m.get(name, 0.0) + (1.0 - b1) * g
        v[name] = b2 * v.get(name, 0.0) + (1.0 - b2) * g * g
        m_hat = m[name] / c1
        v_hat = v[name] / c2
        new_params[name] = params[name] - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return new_params, AdamState(t, m, v)


# ------------------------------------------------------------------ losses


def cross_entropy(logits: Tensor, targets) -> Tensor:
    targets = np.asarray(targets, dtype=np.int64)
    lp = ad.log_softmax_rows(logits)
    picked = ad.index(lp, (np.arange(targets.size), targets))
    return ad.neg(ad.mean(picked))


def sample_negatives(rng: np.random.Generator, targets, vocab_size: int, n_neg: int) -> np.ndarray:
    """Uniform negatives without replacement, never equal to the row's target."""
    targets = np.asarray(targets, dtype=np.int64)
    if not 1 <= n_neg <= vocab_size - 1:
        raise ConfigError(f"n_neg must lie in [1, {vocab_size - 1}]")
    keys = rng.random((targets.size, vocab_size - 1))
    draw = np.argpartition(keys, n_neg - 1, axis=1)[:, :n_neg] if n_neg < vocab_size - 1 else np.argsort(keys, axis=1)
    return draw + (draw >= targets[:, None])


def sampled_cross_entropy(hidden: Tensor, table: Tensor, targets, negatives) -> Tensor:
    """Softmax cross-entropy restricted to ``[target, negatives...]`` per row."""
    targets = np.asarray(targets, dtype=np.int64)
    cand = np.concatenate([targets[:, None], np.asarray(negatives, dtype=np.int64)], axis=1)
    n, d = hidden.shape
    emb = ad.gather_rows(table, cand)
    scores = ad.sum_(ad.mul(ad.reshape(hidden, (n, 1, d)), emb), axis=-1)
    lp = ad.log_softmax_rows(scores)
    return ad.neg(ad.mean(ad.index(lp, (slice(None), 0))))


def masked_next_event_loss(model: TimeAttentionModel, batch: Examples, rng=None, dropout_rng=None) -> Tensor:
    """Mean next-event cross-entropy over the batch's (prefix, target) rows.

    Full softmax for vocabularies up to ``full_softmax_max_vocab``, sampled
    softmax with ``n_neg`` uniform negatives above that.
    """
    if len(batch) == 0:
        raise InputError("empty batch")
    cfg = model.config
    fwd = model.forward(batch, dropout_rng=dropout_rng)
    if cfg.vocab_size <= cfg.full_softmax_max_vocab:
        return cross_entropy(fwd.logits, batch.targets)
    if rng is None:
        raise InputError("negative sampling needs a random generator")
    neg = sample_negatives(rng, batch.targets, cfg.vocab_size, min(cfg.n_neg, cfg.vocab_size - 1))
    return sampled_cross_entropy(fwd.hidden, model.params["Z"], batch.targets, neg)


# ------------------------------------------------------------------ metrics


@dataclass
class MetricReport:
    accuracy: float = 0.0
    hit_at_5: float = 0.0
    hit_at_10: float = 0.0
    ndcg_at_5: float = 0.0
    ndcg_at_10: float = 0.0
    loss: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def ranks_from_logits(logits: np.ndarray, targets) -> np.ndarray:
    """1-based rank of each target; ties are broken by lower event id first."""
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    true = logits[np.arange(targets.size), targets][:, None]
    ahead = (logits > true) | ((logits == true) & (np.arange(logits.shape[1])[None, :] < targets[:, None]))
    return 1 + ahead.sum(axis=1)


def ranking_metrics(ranks, k: int) -> tuple[float, float]:
    """Hit@k and NDCG@k for single-relevant-item ranks."""
    ranks = np.asarray(ranks, dtype=np.float64)
    inside = ranks <= k
    hit = float(np.mean(inside))
    ndcg = float(np.mean(np.where(inside, 1.0 / np.log2(ranks + 1.0), 0.0)))
    return hit, ndcg


def report_from_ranks(ranks, loss: float = 0.0) -> MetricReport:
    ranks = np.asarray(ranks)
    h5, n5 = ranking_metrics(ranks, 5)
    h10, n10 = ranking_metrics(ranks, 10)
    return MetricReport(float(np.mean(ranks == 1)), h5, h10, n5, n10, float(loss))


def evaluate(model: TimeAttentionModel, data, batch_size: int = 4096) -> MetricReport:
    """Metrics over every (prefix, next event) pair in ``data``.

    ``data`` is either :class:`Examples` or a list of event sequences.
    """
    ex = data if isinstance(data, Examples) else make_examples(data, model.config.max_seq_len, model.config.vocab_size)
    if len(ex) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    ranks, loss_sum = [], 0.0
    for start in range(0, len(ex), batch_size):
        part = ex.take(slice(start, start + batch_size))
        logits = model.forward(part).logits.data
        z = logits - logits.max(axis=1, keepdims=True)
        lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss_sum += float(-lp[np.arange(len(part)), part.targets].sum())
        ranks.append(ranks_from_logits(logits, part.targets))
    return report_from_ranks(np.concatenate(ranks), loss_sum / len(ex))


# ------------------------------------------------------------------ checkpoints

_MAGIC = b"TKCKPT01"


@dataclass
class Checkpoint:
    """Everything needed to resume training bitwise."""

    config: dict
    seed: int
    params: dict
    adam: AdamState
    epoch: int = 0
    metric: float = float("nan")
    rng_states: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write a self-describing container: magic, header length, JSON header, raw ``<f8`` arrays."""
    arrays = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    arrays += [(f"adam.m/{k}", np.asarray(v)) for k, v in ckpt.adam.m.items()]
    arrays += [(f"adam.v/{k}", np.asarray(v)) for k, v in ckpt.adam.v.items()]
    index, offset = [], 0
    for name, arr in arrays:
        nbytes = int(np.asarray(arr).size) * 8
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in arrays)
    header = {
        "format": 1,
        "dtype": "<f8",
        "meta": {
            "config": ckpt.config,
            "config_hash": ModelConfig.from_dict(ckpt.config).hash(),
            "seed": ckpt.seed,
            "epoch": ckpt.epoch,
            "metric": ckpt.metric,
            "adam_step": ckpt.adam.step,
            "rng_states": ckpt.rng_states,
            "extra": ckpt.extra,
        },
        "arrays": index,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        (n,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16 : 16 + n].decode("utf-8"))
        body = raw[16 + n :]
        meta = header["meta"]
        if hashlib.sha256(body).hexdigest() != header["payload_sha256"]:
            raise CheckpointError(f"{path}: payload checksum mismatch (file truncated or altered)")
        params, m, v = {}, {}, {}
        for entry in header["arrays"]:
            chunk = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
            arr = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(entry["shape"])
            kind, name = entry["name"].split("/", 1)
            {"param": params, "adam.m": m, "adam.v": v}[kind][name] = arr
    except (KeyError, ValueError, struct.error) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if ModelConfig.from_dict(meta["config"]).hash() != meta["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    return Checkpoint(
        config=meta["config"],
        seed=meta["seed"],
        params=params,
        adam=AdamState(meta["adam_step"], m, v),
        epoch=meta["epoch"],
        metric=meta["metric"],
        rng_states=meta["rng_states"],
        extra=meta.get("extra", {}),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> TimeAttentionModel:
    model = TimeAttentionModel(ModelConfig.from_dict(copy.deepcopy(ckpt.config)), seed=ckpt.seed)
    model.load_state_dict(ckpt.params)
    return model


# ------------------------------------------------------------------ loop


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, checkpoint: Checkpoint | None):
        super().__init__(message)
        self.checkpoint = checkpoint


_TAU_EMBEDDERS = ("mercer", "bochner-nonparam", "bochner-invcdf")


def build_model(config: ModelConfig, seed: int, train_sequences=None) -> TimeAttentionModel:
    """Fix the period range from training gaps into the config, then build the model.

    Recording ``tau_min``/``tau_max`` in the config makes the model
    reconstructible from the config alone.
    """
    config = copy.deepcopy(config)
    if config.embedder in _TAU_EMBEDDERS and train_sequences is not None:
        gaps = np.concatenate([s.gaps() for s in train_sequences if len(s) > 1] or [np.zeros(0)])
        gaps = gaps[gaps > 0]
        if gaps.size:
            config.embedder_params.setdefault("tau_min", float(gaps.min()))
            config.embedder_params.setdefault("tau_max", float(gaps.max()))
    return TimeAttentionModel(config, seed=seed)


class Trainer:
    """Owns a model, its Adam state and the loop's random streams."""

    def __init__(self, model: TimeAttentionModel, optim: OptimConfig, seed: int):
        self.model = model
        self.optim = optim
        self.seed = int(seed)
        self.adam = AdamState()
        self.rngs = {
            name: rng_stream(seed, f"train.{name}") for name in ("shuffle", "negatives", "dropout")
        }
        self.epoch = 0

    def step(self, batch: Examples) -> float:
        tape = Tape()
        with tape:
            loss = masked_next_event_loss(
                self.model, batch, rng=self.rngs["negatives"], dropout_rng=self.rngs["dropout"]
            )
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss {value}")
        tape.backward(loss)
        params = self.model.trainable()
        grads = {k: p.grad for k, p in params.items()}
        new, self.adam = adam_step({k: p.data for k, p in params.items()}, grads, self.adam, self.optim)
        for k, p in params.items():
            p.data = new[k]
        return value

    def run_epoch(self, ex: Examples) -> float:
        order = self.rngs["shuffle"].permutation(len(ex))
        bs = self.optim.batch_size
        total, count = 0.0, 0
        for start in range(0, len(ex), bs):
            idx = order[start : start + bs]
            total += self.step(ex.take(idx)) * idx.size
            count += idx.size
        self.epoch += 1
        return total / max(count, 1)

    def checkpoint(self, metric: float = float("nan")) -> Checkpoint:
        return Checkpoint(
            config=self.model.config.to_dict(),
            seed=self.model.seed,
            params=self.model.state_dict(),
            adam=copy.deepcopy(self.adam),
            epoch=self.epoch,
            metric=metric,
            rng_states={k: r.bit_generator.state for k, r in self.rngs.items()},
            extra={"optim": asdict(self.optim), "train_seed": self.seed},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, optim: OptimConfig | None = None) -> "Trainer":
        optim = optim or OptimConfig(**ckpt.extra.get("optim", {}))
        trainer = cls(model_from_checkpoint(ckpt), optim, ckpt.extra.get("train_seed", ckpt.seed))
        trainer.adam = copy.deepcopy(ckpt.adam)
        trainer.epoch = ckpt.epoch
        for k, state in ckpt.rng_states.items():
            trainer.rngs[k].bit_generator.state = state
        return trainer


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    test_report: MetricReport | None
    valid_report: MetricReport
    history: list
    model: TimeAttentionModel


def train(
    model_cfg: ModelConfig,
    optim_cfg: OptimConfig,
    train_seqs,
    valid_seqs,
    test_seqs=None,
    seed: int = 0,
) -> TrainResult:
    """Early-stopped training; returns the best-validation checkpoint and its test metrics."""
    if not train_seqs or not valid_seqs:
        raise InputError("training and validation sets must be non-empty")
    model = build_model(model_cfg, seed, train_seqs)
    cfg = model.config
    train_ex = make_examples(train_seqs, cfg.max_seq_len, cfg.vocab_size)
    valid_ex = make_examples(valid_seqs, cfg.max_seq_len, cfg.vocab_size)
    trainer = Trainer(model, optim_cfg, seed)
    best: Checkpoint | None = None
    best_metric, stale, history = -math.inf, 0, []
    for _ in range(optim_cfg.max_epochs):
        started = time.perf_counter()
        try:
            train_loss = trainer.run_epoch(train_ex)
        except NumericalError as exc:
            raise TrainingDiverged(f"training diverged in epoch {trainer.epoch + 1}: {exc}", best) from exc
        report = evaluate(model, valid_ex)
        metric = getattr(report, optim_cfg.monitor)
        seconds = time.perf_counter() - started
        history.append({"epoch": trainer.epoch, "train_loss": train_loss, "valid_metric": metric, "seconds": seconds})
        log.info("epoch %d loss %.5f valid %s %.4f (%.1fs)", trainer.epoch, train_loss, optim_cfg.monitor, metric, seconds)
        if metric > best_metric:
            best_metric, stale = metric, 0
            best = trainer.checkpoint(metric)
        else:
            stale += 1
            if stale >= optim_cfg.patience:
                break
    best_model = model_from_checkpoint(best)
    valid_report = evaluate(best_model, valid_ex)
    test_report = evaluate(best_model, test_seqs) if test_seqs else None
    return TrainResult(best, test_report, valid_report, history, best_model)
