import numpy as np
import pytest
from sklearn.base import clone

from timekernel import EventSequence, GapRuleTask, TimeAwareSelfAttention, generate
from timekernel.validation import InputError, NotFittedError


@pytest.fixture(scope="module")
def data():
    return generate(GapRuleTask(n_train=60, n_valid=10, n_test=12, seq_len=16), seed=3)


@pytest.fixture(scope="module")
def fitted(data):
    return TimeAwareSelfAttention(max_epochs=2, batch_size=64, embedder_params={"k": 3, "jmax": 4}).fit(data.train)


class TestParams:
    def test_get_params_round_trip(self):
        est = TimeAwareSelfAttention(embedder="bochner-normal", embedder_params={"d": 8}, lr=5e-3)
        params = est.get_params()
        assert params["embedder"] == "bochner-normal" and params["lr"] == 5e-3
        assert TimeAwareSelfAttention(**params).get_params() == params

    def test_clone_is_unfitted(self, fitted):
        c = clone(fitted)
        assert c.get_params() == fitted.get_params()
        assert not hasattr(c, "model_")

    def test_set_params(self):
        est = TimeAwareSelfAttention().set_params(hidden_dim=16, num_heads=2)
        assert est.hidden_dim == 16 and est.num_heads == 2


class TestFitPredict:
    def test_shapes(self, fitted, data):
        assert fitted.predict(data.test).shape == (12,)
        proba = fitted.predict_proba(data.test)
        assert proba.shape == (12, 20)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(np.argmax(proba, axis=1), fitted.predict(data.test))
        np.testing.assert_array_equal(fitted.classes_, np.arange(20))

    def test_score_matches_predict(self, fitted, data):
        labels = np.array([s.events[-1] for s in data.test])
        assert fitted.score(data.test) == np.mean(fitted.predict(data.test) == labels)
        assert fitted.score(data.test, labels) == fitted.score(data.test)

    def test_single_sequence(self, fitted, data):
        assert fitted.predict(data.test[0]).shape == (1,)

    def test_prediction_ignores_other_rows(self, fitted, data):
        together = fitted.decision_function(data.test[:3])
        alone = fitted.decision_function([data.test[1]])
        np.testing.assert_allclose(together[1], alone[0], rtol=1e-12)

    def test_evaluate(self, fitted, data):
        rep = fitted.evaluate(data.test)
        assert 0.0 <= rep.accuracy <= rep.hit_at_5 <= rep.hit_at_10 <= 1.0

    def test_fit_is_deterministic(self, data):
        est = TimeAwareSelfAttention(max_epochs=1, batch_size=64, embedder="posenc", random_state=7)
        a = clone(est).fit(data.train[:20]).decision_function(data.test)
        b = clone(est).fit(data.train[:20]).decision_function(data.test)
        np.testing.assert_array_equal(a, b)

    def test_history(self, fitted):
        assert [row["epoch"] for row in fitted.history_] == [1, 2]


class TestErrors:
    def test_not_fitted(self, data):
        with pytest.raises(NotFittedError):
            TimeAwareSelfAttention().predict(data.test)

    def test_fit_needs_two_sequences(self, data):
        with pytest.raises(InputError):
            TimeAwareSelfAttention().fit(data.train[:1])

    def test_fit_rejects_non_sequences(self):
        with pytest.raises(InputError, match="EventSequence"):
            TimeAwareSelfAttention().fit([[1, 2, 3], [4, 5]])

    def test_query_needs_history(self, fitted):
        with pytest.raises(InputError):
            fitted.predict([EventSequence([1], [0.0])])

    def test_unseen_event_id(self, fitted):
        with pytest.raises(InputError, match="< 20"):
            fitted.predict([EventSequence([1, 25], [0.0, 1.0])])

    def test_empty_input(self, fitted):
        with pytest.raises(InputError):
            fitted.predict([])
