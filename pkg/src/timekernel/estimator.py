"""scikit-learn style wrapper around the next-event model and its training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .data import EventSequence
from .model import Examples, ModelConfig, _prefix_rows
from .training import OptimConfig, evaluate, train
from .validation import InputError, check_is_fitted

__all__ = ["TimeAwareSelfAttention"]


def _check_sequences(X, min_len: int) -> list[EventSequence]:
    if isinstance(X, EventSequence):
        X = [X]
    seqs = list(X)
    if not seqs:
        raise InputError("expected at least one sequence")
    for i, s in enumerate(seqs):
        if not isinstance(s, EventSequence):
            raise InputError(f"item {i} is {type(s).__name__}, expected EventSequence")
        if len(s) < min_len:
            raise InputError(f"sequence {i} has {len(s)} events, need at least {min_len}")
    return seqs


class TimeAwareSelfAttention(ClassifierMixin, BaseEstimator):
    """Next-event classifier over continuous-time event sequences.

    ``fit`` trains on every (prefix, next event) pair of the given sequences,
    holding out the trailing ``validation_fraction`` of sequences for early
    stopping.  At prediction time each input sequence is read as
    "history + query": the last event's time is the time being asked about,
    and its id is the label that ``score`` compares against.

    Examples
    --------
    >>> from timekernel import GapRuleTask, generate
    >>> ds = generate(GapRuleTask(n_train=40, n_valid=5, n_test=5, seq_len=16), seed=0)
    >>> clf = TimeAwareSelfAttention(max_epochs=1).fit(ds.train)
    >>> clf.predict(ds.test).shape
    (5,)
    """

    def __init__(
        self,
        embedder: str = "mercer",
        embedder_params: dict | None = None,
        vocab_size: int | None = None,
        event_dim: int = 32,
        hidden_dim: int = 64,
        num_blocks: int = 1,
        num_heads: int = 1,
        interaction: str = "mlp_relu",
        max_seq_len: int = 8,
        lr: float = 1e-3,
        batch_size: int = 256,
        max_epochs: int = 30,
        patience: int = 10,
        validation_fraction: float = 0.1,
        random_state: int = 0,
    ):
        self.embedder = embedder
        self.embedder_params = embedder_params
        self.vocab_size = vocab_size
        self.event_dim = event_dim
        self.hidden_dim = hidden_dim
        self.num_blocks = num_blocks
        self.num_heads = num_heads
        self.interaction = interaction
        self.max_seq_len = max_seq_len
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y=None):
        seqs = _check_sequences(X, min_len=2)
        if len(seqs) < 2:
            raise InputError("need at least two sequences (one is held out for validation)")
        n_valid = min(len(seqs) - 1, max(1, int(round(self.validation_fraction * len(seqs)))))
        vocab = self.vocab_size or 1 + max(int(s.events.max()) for s in seqs)
        config = ModelConfig(
            vocab_size=vocab,
            event_dim=self.event_dim,
            embedder=self.embedder,
            embedder_params=dict(self.embedder_params or {}),
            num_blocks=self.num_blocks,
            num_heads=self.num_heads,
            interaction=self.interaction,
            hidden_dim=self.hidden_dim,
            max_seq_len=self.max_seq_len,
        )
        optim = OptimConfig(
            learning_rate=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience
        )
        result = train(config, optim, seqs[:-n_valid], seqs[-n_valid:], seed=self.random_state)
        self.model_ = result.model
        self.checkpoint_ = result.checkpoint
        self.history_ = result.history
        self.classes_ = np.arange(vocab)
        return self

    def _query(self, X) -> tuple[Examples, np.ndarray]:
        check_is_fitted(self, "model_")
        seqs = _check_sequences(X, min_len=2)
        L, V = self.model_.config.max_seq_len, self.model_.config.vocab_size
        if any(s.events.max() >= V for s in seqs):
            raise InputError(f"event ids must be < {V}, the vocabulary seen at fit time")
        rows = [_prefix_rows(s, L, np.array([len(s) - 1]), s.times[-1:]) for s in seqs]
        ex = Examples(*(np.concatenate(parts) for parts in zip(*rows)))
        return ex, ex.targets

    def decision_function(self, X) -> np.ndarray:
        ex, _ = self._query(X)
        return self.model_.forward(ex).logits.data

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def score(self, X, y=None, sample_weight=None) -> float:
        """Accuracy on the last event of each sequence (``y`` defaults to those ids)."""
        ex, targets = self._query(X)
        y = targets if y is None else np.asarray(y)
        pred = np.argmax(self.model_.forward(ex).logits.data, axis=1)
        return float(np.average(pred == y, weights=sample_weight))

    def evaluate(self, X):
        """Ranking report over every position of every sequence."""
        check_is_fitted(self, "model_")
        return evaluate(self.model_, _check_sequences(X, min_len=1))
