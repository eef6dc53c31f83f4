import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from splitrank.errors import InputError
from splitrank.estimator import TwoTowerRanker, check_pairs, check_triples
from splitrank.nncore import TrainExample
from splitrank.synth import triples_from_rows


def _params():
    return dict(embed_dim=8, query_hidden=(16,), member_hidden=(16, 16), epochs=2, random_state=3)


def test_get_params_and_clone():
    est = TwoTowerRanker(**_params())
    params = est.get_params()
    assert params["embed_dim"] == 8 and params["random_state"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(lr=0.05)
    assert est.lr == 0.05


def test_not_fitted():
    with pytest.raises(NotFittedError):
        TwoTowerRanker().decision_function([({0: []}, {0: []})])


def test_input_validation():
    with pytest.raises(InputError):
        check_triples([])
    with pytest.raises(InputError):
        check_triples([(1, 2)])
    with pytest.raises(InputError):
        check_pairs([(1, 2, 3)])
    ex = TrainExample({0: [1]}, {0: [2]}, {0: [3]})
    assert check_triples([ex, ({0: [1]}, {0: [2]}, {0: [3]})])[1] == ex


def test_fit_score_on_synthetic(small_data, small_members):
    train = triples_from_rows(small_data.train, small_members)
    held = triples_from_rows(small_data.heldout, small_members)
    est = TwoTowerRanker(**{**_params(), "embed_dim": 16, "epochs": 3}).fit(train)
    assert len(est.loss_curve_) == 3
    assert est.vocabulary_.size(1) > 0
    assert est.score(held) >= 0.8
    pairs = [(t.query, t.positive) for t in held[:5]]
    scores = est.decision_function(pairs)
    assert scores.shape == (5,) and np.all(np.abs(scores) <= 1 + 1e-6)
    assert set(np.unique(est.predict(held[:20]))) <= {0, 1}


def test_fit_is_reproducible(small_data, small_members):
    train = triples_from_rows(small_data.train[:300], small_members)
    a = TwoTowerRanker(**_params()).fit(train)
    b = TwoTowerRanker(**_params()).fit(train)
    assert a.loss_curve_ == b.loss_curve_
    for name, t in a.model_.tensors().items():
        assert t.tobytes() == b.model_.tensors()[name].tobytes()


def test_fit_with_id_inputs_needs_vocabulary():
    ex = TrainExample({0: [1]}, {0: [2]}, {0: [3]})
    with pytest.raises(InputError):
        TwoTowerRanker(**_params()).fit([ex])
