import json
import math

import numpy as np
import pytest

from timekernel.data import (
    EventSequence,
    GapRuleTask,
    ParseError,
    PeriodicAttentionTask,
    bayes_rates,
    collision_states,
    generate,
    load_jsonl,
    task_manifest,
    write_jsonl,
)
from timekernel.validation import ConfigError, InputError

P_SHORT_GAP = 0.6 * (1 - math.exp(-2.0)) + 0.4 * (1 - math.exp(-0.2))


@pytest.fixture(scope="module")
def small_gap_data():
    return generate(GapRuleTask(n_train=60, n_valid=10, n_test=10), seed=5)


class TestEventSequence:
    def test_valid(self):
        s = EventSequence([1, 2], [0.0, 1.5])
        assert len(s) == 2 and s.events.dtype == np.int64
        np.testing.assert_array_equal(s.gaps(), [1.5])

    @pytest.mark.parametrize(
        "events, times",
        [([1, 2], [0.0]), ([1, 2], [2.0, 1.0]), ([1], [-1.0]), ([-1], [0.0]), ([1], [np.nan])],
    )
    def test_invalid(self, events, times):
        with pytest.raises(InputError):
            EventSequence(events, times)

    def test_equality_and_record(self):
        a = EventSequence([3, 4], [0.5, 0.75])
        assert a == EventSequence(*a.to_record().values())
        assert a != EventSequence([3, 5], [0.5, 0.75])


class TestGapRuleTask:
    def test_rules_are_bijections(self):
        task = GapRuleTask()
        prev = np.arange(task.vocab_size)
        assert sorted(task.rule(prev, 0.1)) == list(prev)
        assert sorted(task.rule(prev, 10.0)) == list(prev)

    def test_non_coprime_multiplier_rejected(self):
        with pytest.raises(ConfigError):
            GapRuleTask(multiplier=4)

    def test_short_gap_probability(self):
        assert GapRuleTask().p_below_threshold() == pytest.approx(P_SHORT_GAP, abs=1e-15)
        assert P_SHORT_GAP == pytest.approx(0.5913, abs=1e-4)

    def test_empirical_gap_mixture(self):
        task = GapRuleTask()
        gaps = task.sample_gaps(np.random.default_rng(0), 100_000)
        p = task.p_below_threshold()
        se = math.sqrt(p * (1 - p) / gaps.size)
        assert abs(np.mean(gaps < 1.0) - p) <= 3 * se
        assert abs(np.mean(gaps < 1.0) - 0.5913) <= 0.01

    def test_generated_transitions_follow_rule(self, small_gap_data):
        task = GapRuleTask()
        for seq in [*small_gap_data.train, *small_gap_data.test]:
            np.testing.assert_array_equal(seq.events[1:], task.rule(seq.events[:-1], seq.gaps()))

    def test_generated_shape(self, small_gap_data):
        assert [len(x) for x in small_gap_data] == [60, 10, 10]
        for seq in small_gap_data.train:
            assert len(seq) == 64 and seq.times[0] == 0.0
            assert np.all(np.diff(seq.times) > 0)
            assert seq.events.max() < 20

    def test_branch_frequencies_in_data(self):
        ds = generate(GapRuleTask(n_train=1600, n_valid=0, n_test=0), seed=1)
        gaps = np.concatenate([s.gaps() for s in ds.train])
        p = GapRuleTask().p_below_threshold()
        assert abs(np.mean(gaps < 1.0) - p) <= 3 * math.sqrt(p * (1 - p) / gaps.size)


class TestBayesRates:
    def test_collision_states(self):
        np.testing.assert_array_equal(collision_states(GapRuleTask()), [3, 13])

    def test_default_task(self):
        with_gaps, without = bayes_rates(GapRuleTask())
        assert with_gaps == 1.0
        # the majority branch is right 59.13% of the time; in 2 of 20 states both branches agree
        assert without == pytest.approx(0.1 + 0.9 * P_SHORT_GAP, abs=1e-12)
        assert task_manifest(GapRuleTask())["bayes_rates"]["majority_branch"] == pytest.approx(0.5913, abs=1e-4)

    def test_empirical_no_gap_ceiling(self):
        """The best gap-blind predictor on generated data scores the closed-form rate."""
        task = GapRuleTask()
        ds = generate(GapRuleTask(n_train=400, n_valid=0, n_test=0), seed=9)
        prev = np.concatenate([s.events[:-1] for s in ds.train])
        nxt = np.concatenate([s.events[1:] for s in ds.train])
        p = task.p_below_threshold()
        guess = task.rule(prev, 0.0 if p >= 0.5 else math.inf)
        acc = np.mean(guess == nxt)
        assert abs(acc - bayes_rates(task)[1]) <= 3 * math.sqrt(0.25 / prev.size)

    @pytest.mark.parametrize("threshold", [1e-12, 0.0, 1e9, math.inf])
    def test_single_branch_limits(self, threshold):
        assert bayes_rates(GapRuleTask(threshold=threshold))[1] == pytest.approx(1.0, abs=1e-9)

    def test_unsupported_task(self):
        with pytest.raises(ConfigError):
            bayes_rates(PeriodicAttentionTask())


class TestPeriodicTask:
    def test_regime(self):
        task = PeriodicAttentionTask()
        np.testing.assert_array_equal(task.regime([0.0, 9.99, 10.0, 25.0, 40.0]), [0, 0, 1, 0, 0])

    def test_events_follow_regime(self):
        task = PeriodicAttentionTask(n_train=200, n_valid=0, n_test=0)
        ds = generate(task, seed=2)
        ev = np.concatenate([s.events for s in ds.train])
        reg = np.concatenate([task.regime(s.times) for s in ds.train])
        in_half = (ev // (task.vocab_size // 2)) == reg
        assert abs(in_half.mean() - task.purity) < 0.02

    def test_odd_vocab_rejected(self):
        with pytest.raises(ConfigError):
            PeriodicAttentionTask(vocab_size=7)


class TestGenerate:
    def test_same_seed_same_data(self):
        task = GapRuleTask(n_train=5, n_valid=2, n_test=2)
        a, b = generate(task, 3), generate(task, 3)
        assert all(x == y for split_a, split_b in zip(a, b) for x, y in zip(split_a, split_b))

    def test_different_seed(self):
        task = GapRuleTask(n_train=5, n_valid=0, n_test=0)
        assert generate(task, 3).train[0] != generate(task, 4).train[0]

    def test_prefix_stability(self):
        """Sequence i depends only on (seed, i): growing the dataset keeps earlier sequences."""
        small = generate(GapRuleTask(n_train=3, n_valid=0, n_test=0), 8).train
        big = generate(GapRuleTask(n_train=6, n_valid=0, n_test=0), 8).train
        assert all(x == y for x, y in zip(small, big))

    def test_splits_disjoint(self, small_gap_data):
        keys = [tuple(s.times[:4]) for split in small_gap_data for s in split]
        assert len(keys) == len(set(keys))


class TestJsonl:
    def test_round_trip(self, tmp_path, small_gap_data):
        path = tmp_path / "train.jsonl"
        write_jsonl(path, small_gap_data.train[:4])
        back = load_jsonl(path, vocab_size=20)
        assert back == small_gap_data.train[:4]

    def test_single_record(self, tmp_path):
        path = tmp_path / "a.jsonl"
        path.write_text('{"events":[1,2],"times":[0.0,1.5]}\n')
        (seq,) = load_jsonl(path)
        assert len(seq) == 2

    def test_unsorted_times_cite_line(self, tmp_path):
        path = tmp_path / "a.jsonl"
        path.write_text('{"events":[1],"times":[0.0]}\n{"events":[1,2],"times":[2.0,1.0]}\n')
        with pytest.raises(InputError, match=r"a\.jsonl:2"):
            load_jsonl(path)

    @pytest.mark.parametrize(
        "line", ["not json", '{"events":[1]}', '{"events":[1.5],"times":[0.0]}', "[1, 2]", '{"events":[true],"times":[0]}']
    )
    def test_malformed(self, tmp_path, line):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"events":[0],"times":[0.0]}\n' + line + "\n")
        with pytest.raises(ParseError, match=r"bad\.jsonl:2"):
            load_jsonl(path)

    def test_vocab_violation(self, tmp_path):
        path = tmp_path / "v.jsonl"
        path.write_text(json.dumps({"events": [3, 25], "times": [0, 1]}) + "\n")
        with pytest.raises(InputError, match="vocab"):
            load_jsonl(path, vocab_size=20)

    def test_empty_file_warns(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.warns(RuntimeWarning):
            assert load_jsonl(path) == []
