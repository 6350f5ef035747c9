"""Event sequences: synthetic generators with known Bayes rates, JSONL I/O."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .streams import rng_stream
from .validation import ConfigError, InputError

__all__ = [
    "EventSequence",
    "Dataset",
    "GapRuleTask",
    "PeriodicAttentionTask",
    "TASKS",
    "generate",
    "bayes_rates",
    "collision_states",
    "task_manifest",
    "load_jsonl",
    "write_jsonl",
    "ParseError",
]


class ParseError(InputError):
    """A JSONL record could not be decoded into an event sequence."""


@dataclass(frozen=True, eq=False)
class EventSequence:
    events: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        ev = np.asarray(self.events, dtype=np.int64).reshape(-1)
        tm = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if ev.shape != tm.shape:
            raise InputError(f"events ({ev.size}) and times ({tm.size}) differ in length")
        if tm.size and not np.all(np.isfinite(tm)):
            raise InputError("times must be finite")
        if np.any(tm < 0):
            raise InputError("times must be non-negative")
        if np.any(np.diff(tm) < 0):
            raise InputError("times must be non-decreasing")
        if np.any(ev < 0):
            raise InputError("event ids must be non-negative")
        object.__setattr__(self, "events", ev)
        object.__setattr__(self, "times", tm)

    def __len__(self) -> int:
        return int(self.events.size)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EventSequence)
            and np.array_equal(self.events, other.events)
            and np.array_equal(self.times, other.times)
        )

    def gaps(self) -> np.ndarray:
        return np.diff(self.times)

    def to_record(self) -> dict:
        return {"events": self.events.tolist(), "times": self.times.tolist()}


class Dataset(NamedTuple):
    train: list
    valid: list
    test: list


@dataclass(frozen=True)
class GapRuleTask:
    """Next event is determined by the previous event and the gap that precedes it.

    Gaps come from a two-component exponential mixture.  A gap shorter than
    ``threshold`` maps ``prev -> (prev + 1) mod V``; a longer one maps
    ``prev -> (multiplier * prev + offset) mod V``.
    """

    vocab_size: int = 20
    p_short: float = 0.6
    mean_short: float = 0.5
    mean_long: float = 5.0
    threshold: float = 1.0
    multiplier: int = 7
    offset: int = 3
    seq_len: int = 64
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200

    name = "gap-rule"

    def __post_init__(self):
        if math.gcd(self.multiplier, self.vocab_size) != 1:
            raise ConfigError(
                f"multiplier {self.multiplier} must be coprime to vocab_size {self.vocab_size}"
            )
        if not 0.0 <= self.p_short <= 1.0:
            raise ConfigError("p_short must lie in [0, 1]")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2")

    def p_below_threshold(self) -> float:
        th = self.threshold
        if th <= 0:
            return 0.0
        if math.isinf(th):
            return 1.0
        return self.p_short * -math.expm1(-th / self.mean_short) + (1 - self.p_short) * -math.expm1(
            -th / self.mean_long
        )

    def rule(self, prev, gap):
        prev = np.asarray(prev)
        return np.where(
            np.asarray(gap) < self.threshold,
            (prev + 1) % self.vocab_size,
            (self.multiplier * prev + self.offset) % self.vocab_size,
        )

    def sample_gaps(self, rng: np.random.Generator, n: int) -> np.ndarray:
        short = rng.random(n) < self.p_short
        gaps = rng.exponential(1.0, n) * np.where(short, self.mean_short, self.mean_long)
        return np.maximum(gaps, np.finfo(float).tiny)

    def _sequence(self, rng: np.random.Generator) -> EventSequence:
        n = self.seq_len
        gaps = self.sample_gaps(rng, n - 1)
        events = np.empty(n, dtype=np.int64)
        events[0] = rng.integers(self.vocab_size)
        for i in range(1, n):
            events[i] = self.rule(events[i - 1], gaps[i - 1])
        times = np.concatenate([[0.0], np.cumsum(gaps)])
        return EventSequence(events, times)


@dataclass(frozen=True)
class PeriodicAttentionTask:
    """Two interest regimes alternating every ``period`` time units.

    The regime at time ``t`` is ``floor(t / period) mod 2``; regime ``r``
    emits mostly from its own half of the vocabulary.
    """

    vocab_size: int = 10
    period: float = 10.0
    mean_gap: float = 1.0
    purity: float = 0.9
    seq_len: int = 32
    n_train: int = 500
    n_valid: int = 100
    n_test: int = 100

    name = "periodic"

    def __post_init__(self):
        if self.vocab_size < 2 or self.vocab_size % 2:
            raise ConfigError("vocab_size must be an even number >= 2")

    def regime(self, t) -> np.ndarray:
        return (np.floor(np.asarray(t) / self.period) % 2).astype(np.int64)

    def event_probs(self, regime: int) -> np.ndarray:
        half = self.vocab_size // 2
        p = np.full(self.vocab_size, (1 - self.purity) / half)
        p[regime * half : (regime + 1) * half] = self.purity / half
        return p

    def _sequence(self, rng: np.random.Generator) -> EventSequence:
        gaps = np.maximum(rng.exponential(self.mean_gap, self.seq_len - 1), np.finfo(float).tiny)
        times = np.concatenate([[rng.uniform(0, 2 * self.period)], np.zeros(self.seq_len - 1)])
        times[1:] = times[0] + np.cumsum(gaps)
        cdfs = [np.cumsum(self.event_probs(r)) for r in (0, 1)]
        u = rng.random(self.seq_len)
        events = np.array(
            [min(int(np.searchsorted(cdfs[r], x, side="right")), self.vocab_size - 1) for r, x in zip(self.regime(times), u)],
            dtype=np.int64,
        )
        return EventSequence(events, times)


TASKS = {"gap-rule": GapRuleTask, "periodic": PeriodicAttentionTask}


def generate(task, seed: int) -> Dataset:
    """Deterministic train/valid/test split; sequence ``i`` draws from its own stream."""
    sizes = (task.n_train, task.n_valid, task.n_test)
    seqs = [task._sequence(rng_stream(seed, f"{task.name}.seq{i}")) for i in range(sum(sizes))]
    a, b = sizes[0], sizes[0] + sizes[1]
    return Dataset(seqs[:a], seqs[a:b], seqs[b:])


def collision_states(task: GapRuleTask) -> np.ndarray:
    """Previous events for which both branches lead to the same next event."""
    prev = np.arange(task.vocab_size)
    return prev[task.rule(prev, 0.0) == task.rule(prev, math.inf)]


def bayes_rates(task) -> tuple[float, float]:
    """Best achievable accuracy with and without access to the gaps.

    Without gaps the best guess is the majority branch, right with
    probability ``max(p, 1 - p)`` where ``p = P(gap < threshold)``, except for
    previous events where both branches coincide.  Both branches are
    bijections, so the transition matrix is doubly stochastic and a uniform
    first event keeps every position's previous event uniform.
    """
    if not isinstance(task, GapRuleTask):
        raise ConfigError(f"Bayes rates are only defined for GapRuleTask, got {type(task).__name__}")
    p = task.p_below_threshold()
    branch = max(p, 1.0 - p)
    share = collision_states(task).size / task.vocab_size
    return 1.0, share + (1.0 - share) * branch


def task_manifest(task) -> dict:
    out = {"task": task.name, "params": asdict(task)}
    if isinstance(task, GapRuleTask):
        with_gaps, without = bayes_rates(task)
        p = task.p_below_threshold()
        out["bayes_rates"] = {
            "with_gaps": with_gaps,
            "without_gaps": without,
            "majority_branch": max(p, 1.0 - p),
            "collision_states": collision_states(task).tolist(),
        }
    return out


def load_jsonl(path, vocab_size: int | None = None) -> list[EventSequence]:
    """Read one ``{"events": [...], "times": [...]}`` record per line."""
    path = Path(path)
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                events, times = rec["events"], rec["times"]
            except (json.JSONDecodeError, TypeError, KeyError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed record ({exc})") from None
            if not isinstance(events, list) or not all(isinstance(e, int) and not isinstance(e, bool) for e in events):
                raise ParseError(f"{path}:{lineno}: 'events' must be a list of integers")
            try:
                seq = EventSequence(np.array(events, dtype=np.int64), np.array(times, dtype=np.float64))
            except (InputError, ValueError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
            if vocab_size is not None and len(seq) and seq.events.max() >= vocab_size:
                raise InputError(f"{path}:{lineno}: event id {seq.events.max()} >= vocab size {vocab_size}")
            out.append(seq)
    if not out:
        warnings.warn(f"{path} contains no sequences", RuntimeWarning, stacklevel=2)
    return out


def write_jsonl(path, sequences) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(json.dumps(seq.to_record()) + "\n")
