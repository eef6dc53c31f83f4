import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from conftest import random_inputs
from splitrank import nncore
from splitrank.errors import FormatError, InputError, TrainingError
from splitrank.nncore import (Arm, ArmSpec, Cross, CrossSpec, FieldSpec, ModelSpec, TrainExample, TwoTowerModel,
                              embed_pool, forward_arm, grad_check, score_pair, similarity, train)


# ---------------------------------------------------------------- embed_pool

def test_embed_pool_mean_of_two_rows():
    table = np.array([[1, 3], [3, 5]], dtype=np.float32)
    np.testing.assert_array_equal(embed_pool([0, 1], table, "mean"), [2, 4])


@pytest.mark.parametrize("mode", ["mean", "sum"])
def test_embed_pool_single_token_is_row(mode):
    table = np.random.default_rng(0).standard_normal((10, 3)).astype(np.float32)
    np.testing.assert_array_equal(embed_pool([7], table, mode), table[7])


def test_embed_pool_empty_is_zero():
    table = np.ones((4, 5), dtype=np.float32)
    out = embed_pool([], table, "mean")
    assert out.shape == (5,) and not out.any()


def test_embed_pool_rejects_out_of_range():
    with pytest.raises(InputError):
        embed_pool([4], np.zeros((4, 2), np.float32))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=12),
       arrays(np.float32, (10, 3), elements=st.floats(-10, 10, width=32)))
def test_pooling_linearity(tokens, table):
    total = embed_pool(tokens, table, "sum")
    mean = embed_pool(tokens, table, "mean")
    np.testing.assert_allclose(total, len(tokens) * mean, rtol=1e-5, atol=1e-4)


def test_duplicate_tokens_count_twice():
    table = np.array([[2.0], [4.0]], dtype=np.float32)
    assert embed_pool([0, 0, 1], table, "mean")[0] == pytest.approx(8 / 3)


# ---------------------------------------------------------------- forward_arm

def test_identity_layer_applies_tanh():
    spec = ArmSpec((FieldSpec(0, 3, 2),), (2,), "tanh")
    table = np.array([[0.5, -1.0], [2.0, 0.0], [0, 0]], dtype=np.float32)
    arm = Arm(spec, {"emb/0": table, "dense/0/W": np.eye(2, dtype=np.float32),
                     "dense/0/b": np.zeros(2, np.float32)})
    np.testing.assert_allclose(forward_arm(arm, {0: [1]}), np.tanh([2.0, 0.0]), rtol=1e-6)


def test_fields_stack_in_declared_order():
    spec = ArmSpec((FieldSpec(5, 1, 2), FieldSpec(3, 1, 2)), (4,), "relu")
    arm = Arm(spec, {"emb/5": np.array([[1, 0]], np.float32), "emb/3": np.array([[0, 1]], np.float32),
                     "dense/0/W": np.eye(4, dtype=np.float32), "dense/0/b": np.zeros(4, np.float32)})
    x, _ = arm.aggregate([arm.encode({5: [0], 3: [0]})])
    np.testing.assert_array_equal(x[0], [1, 0, 0, 1])


def test_forward_arm_missing_field():
    spec = ArmSpec((FieldSpec(0, 2, 2), FieldSpec(1, 2, 2)), (2,))
    arm = TwoTowerModel.initialize(ModelSpec(spec, spec)).query
    with pytest.raises(InputError):
        forward_arm(arm, {0: [1]})


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_forward_arm_matches_loop_oracle(tiny_vocab, activation):
    spec = nncore.default_spec(tiny_vocab, embed_dim=5, member_hidden=(9, 7), query_hidden=(7,),
                               activation=activation)
    model = TwoTowerModel.initialize(spec, seed=42)
    model = TwoTowerModel(spec, {n: t * 20 for n, t in model.tensors().items()})
    rng = np.random.default_rng(42)
    for _ in range(25):
        inputs = random_inputs(rng, tiny_vocab)
        np.testing.assert_allclose(forward_arm(model.member, inputs), oracles.arm_forward(model.member, inputs),
                                   atol=1e-6)


def test_string_features_need_vocab():
    spec = ArmSpec((FieldSpec(0, 2, 2),), (2,))
    arm = TwoTowerModel.initialize(ModelSpec(spec, spec)).query

    class Q:
        def model_inputs(self):
            return {0: ["x"]}

    with pytest.raises(InputError):
        arm.forward(Q())


# ----------------------------------------------------------------- similarity

def _cosine_cross(dim=2):
    return Cross(CrossSpec("cosine"), {}, dim, dim)


def test_cosine_self_similarity():
    assert similarity(_cosine_cross(), [3, 4], [3, 4]) == pytest.approx(1.0)


def test_cosine_orthogonal():
    assert similarity(_cosine_cross(), [1, 0], [0, 1]) == 0.0


def test_cosine_zero_vector():
    assert similarity(_cosine_cross(), [0, 0], [1, 2]) == 0.0


def test_similarity_dimension_mismatch():
    with pytest.raises(InputError):
        similarity(_cosine_cross(), [1, 0, 0], [1, 0])
    dense = Cross(CrossSpec("dense_cross", (3, 1)),
                  {"dense/0/W": np.zeros((4, 3), np.float32), "dense/0/b": np.zeros(3, np.float32),
                   "dense/1/W": np.zeros((3, 1), np.float32), "dense/1/b": np.zeros(1, np.float32)}, 2, 2)
    with pytest.raises(InputError):
        similarity(dense, [1, 0, 0], [1, 0])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)))
def test_cosine_range(q, m):
    s = similarity(_cosine_cross(6), q, m)
    assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12


def test_dense_cross_matches_oracle(tiny_vocab):
    spec = nncore.default_spec(tiny_vocab, embed_dim=4, query_hidden=(5,), member_hidden=(6,), cross="dense_cross",
                               cross_hidden=(4, 1))
    model = TwoTowerModel.initialize(spec, seed=1)
    rng = np.random.default_rng(1)
    q, m = rng.standard_normal(5), rng.standard_normal(6)
    assert similarity(model.cross, q, m) == pytest.approx(oracles.cross_forward(model.cross, q, m), abs=1e-6)


@pytest.mark.parametrize("cross,hidden", [("cosine", ()), ("dense_cross", (4, 1)), ("dense_cross", (7, 3, 1))])
def test_score_query_matches_batch(tiny_vocab, cross, hidden):
    spec = nncore.default_spec(tiny_vocab, embed_dim=4, query_hidden=(5,), member_hidden=(5,), cross=cross,
                               cross_hidden=hidden or None)
    c = TwoTowerModel.initialize(spec, seed=4).cross
    rng = np.random.default_rng(4)
    q, M = rng.standard_normal(5), rng.standard_normal((40, 5))
    M[3] = 0.0
    np.testing.assert_allclose(c.score_query(q, M), c.score_batch(np.tile(q, (40, 1)), M), rtol=1e-12, atol=1e-12)
    for row, m in zip(c.score_query(q, M[:5]), M[:5]):
        assert row == pytest.approx(oracles.cross_forward(c, q, m), abs=1e-9)
    with pytest.raises(InputError):
        c.score_query(q[:4], M)


# ----------------------------------------------------------------- score_pair

def test_score_pair_identical_arms_is_one():
    arm = ArmSpec((FieldSpec(0, 5, 3),), (4,))
    spec = ModelSpec(arm, arm)
    base = TwoTowerModel.initialize(spec, seed=0).tensors()
    tensors = {n: t for n, t in base.items()}
    for n in list(tensors):
        if n.startswith("member/"):
            tensors[n] = base["query/" + n[len("member/"):]].copy()
    model = TwoTowerModel(spec, tensors)
    assert score_pair(model, {0: [1, 2]}, {0: [1, 2]}) == pytest.approx(1.0, abs=1e-6)


def test_score_pair_deterministic(tiny_model):
    q, m = {0: [1, 2], 1: [3], 2: []}, {0: [4], 1: [0, 0], 2: [2]}
    assert score_pair(tiny_model, q, m) == score_pair(tiny_model, q, m)


@pytest.mark.parametrize("cross", ["cosine", "dense_cross"])
def test_score_pair_matches_oracle(tiny_vocab, cross):
    spec = nncore.default_spec(tiny_vocab, embed_dim=4, query_hidden=(6,), member_hidden=(8, 6), cross=cross,
                               cross_hidden=(5, 1))
    model = TwoTowerModel.initialize(spec, seed=5)
    model = TwoTowerModel(spec, {n: t * 10 for n, t in model.tensors().items()})
    rng = np.random.default_rng(5)
    for _ in range(100):
        q, m = random_inputs(rng, tiny_vocab), random_inputs(rng, tiny_vocab)
        assert score_pair(model, q, m) == pytest.approx(oracles.score(model, q, m), abs=1e-6)


def test_field_permutation_needs_weight_permutation(tiny_model, tiny_vocab):
    spec = tiny_model.spec
    arm = spec.member_arm
    permuted_arm = ArmSpec(tuple(reversed(arm.fields)), arm.hidden_dims, arm.activation)
    tensors = dict(tiny_model.tensors())
    W = tensors["member/dense/0/W"]
    blocks, start = [], 0
    for fs in arm.fields:
        blocks.append(W[start:start + fs.embed_dim])
        start += fs.embed_dim
    permuted = dict(tensors)
    permuted["member/dense/0/W"] = np.concatenate(list(reversed(blocks)))
    pspec = ModelSpec(spec.query_arm, permuted_arm, spec.cross)
    same = TwoTowerModel(pspec, permuted)
    naive = TwoTowerModel(pspec, tensors)
    q, m = {0: [1, 2], 1: [3], 2: [0]}, {0: [4, 5], 1: [7], 2: [1]}
    assert score_pair(same, q, m) == pytest.approx(score_pair(tiny_model, q, m), abs=1e-6)
    assert score_pair(naive, q, m) != pytest.approx(score_pair(tiny_model, q, m), abs=1e-6)


# ------------------------------------------------------------------ training

def test_single_example_overfit(tiny_model):
    ex = TrainExample({0: [1, 2], 1: [3], 2: [0]}, {0: [4], 1: [5], 2: [1]}, {0: [9], 1: [8], 2: [2]})
    margin = 0.5
    result = train(tiny_model, [ex], lr=0.01, epochs=200, seed=0, margin=margin)
    s_pos = score_pair(result.model, ex.query, ex.positive)
    s_neg = score_pair(result.model, ex.query, ex.negative)
    assert s_pos - s_neg > margin


def test_zero_lr_keeps_weights(tiny_model):
    ex = TrainExample({0: [1], 1: [3], 2: [0]}, {0: [4], 1: [5], 2: [1]}, {0: [9], 1: [8], 2: [2]})
    result = train(tiny_model, [ex] * 5, lr=0.0, epochs=3, seed=0)
    for name, t in tiny_model.tensors().items():
        assert np.array_equal(t, result.model.tensors()[name])


def test_training_is_reproducible(tiny_model, tiny_vocab):
    rng = np.random.default_rng(0)
    data = [TrainExample(random_inputs(rng, tiny_vocab), random_inputs(rng, tiny_vocab),
                         random_inputs(rng, tiny_vocab)) for _ in range(40)]
    a = train(tiny_model, data, lr=0.01, epochs=3, seed=9, batch_size=8)
    b = train(tiny_model, data, lr=0.01, epochs=3, seed=9, batch_size=8)
    assert a.loss_trace == b.loss_trace
    for name, t in a.model.tensors().items():
        assert t.tobytes() == b.model.tensors()[name].tobytes()


def test_training_input_model_untouched(tiny_model):
    before = {n: t.copy() for n, t in tiny_model.tensors().items()}
    ex = TrainExample({0: [1], 1: [3], 2: [0]}, {0: [4], 1: [5], 2: [1]}, {0: [9], 1: [8], 2: [2]})
    train(tiny_model, [ex], lr=0.1, epochs=2)
    for n, t in tiny_model.tensors().items():
        assert np.array_equal(t, before[n])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_rejects_nonfinite(tiny_model):
    tensors = tiny_model.tensors()
    tensors["member/dense/0/b"] = np.full_like(tensors["member/dense/0/b"], np.nan)
    broken = TwoTowerModel(tiny_model.spec, tensors)
    ex = TrainExample({0: [1], 1: [3], 2: [0]}, {0: [4], 1: [5], 2: [1]}, {0: [9], 1: [8], 2: [2]})
    with pytest.raises(TrainingError) as info:
        train(broken, [ex], lr=0.1, epochs=2)
    assert info.value.epoch == 0


def test_training_rejects_empty(tiny_model):
    with pytest.raises(InputError):
        train(tiny_model, [], lr=0.1)


def test_small_synthetic_training(small_trained, small_data, small_members):
    from splitrank.synth import triples_from_rows
    acc = nncore.pairwise_accuracy(small_trained, triples_from_rows(small_data.heldout, small_members))
    assert acc >= 0.8


# ----------------------------------------------------------------- grad_check

@pytest.mark.parametrize("activation", ["tanh", "relu"])
@pytest.mark.parametrize("cross", ["cosine", "dense_cross"])
def test_grad_check(tiny_vocab, activation, cross):
    spec = nncore.default_spec(tiny_vocab, embed_dim=4, query_hidden=(6,), member_hidden=(8, 6),
                               activation=activation, cross=cross, cross_hidden=(5, 1))
    rng = np.random.default_rng(2)
    for seed in range(3):
        model = TwoTowerModel.initialize(spec, seed=seed)
        ex = (random_inputs(rng, tiny_vocab, max_len=3), random_inputs(rng, tiny_vocab, max_len=3),
              random_inputs(rng, tiny_vocab, max_len=3))
        assert grad_check(model, ex, 1e-4, n_params=60, seed=seed) <= 1e-3


def test_grad_check_zero_gradient_is_zero(tiny_vocab):
    spec = nncore.default_spec(tiny_vocab, embed_dim=3, query_hidden=(4,), member_hidden=(4,))
    zero = TwoTowerModel(spec, {n: np.zeros(s, np.float32) for n, s in spec.tensor_shapes()})
    ex = ({0: [1], 1: [2], 2: [0]}, {0: [3], 1: [4], 2: [1]}, {0: [5], 1: [6], 2: [2]})
    assert grad_check(zero, ex, 1e-4) == 0.0


def test_grad_check_epsilon_bounds(tiny_model):
    with pytest.raises(InputError):
        grad_check(tiny_model, ({0: []}, {0: []}, {0: []}), epsilon=1e-2)


# ----------------------------------------------------------------- spec / I/O

def test_spec_validation():
    with pytest.raises(InputError):
        FieldSpec(0, 0, 4)
    with pytest.raises(InputError):
        ArmSpec((FieldSpec(0, 2, 2),), ())
    with pytest.raises(InputError):
        CrossSpec("dense_cross", (4, 2))
    arm_a = ArmSpec((FieldSpec(0, 2, 2),), (3,))
    arm_b = ArmSpec((FieldSpec(0, 2, 2),), (4,))
    with pytest.raises(InputError):
        ModelSpec(arm_a, arm_b, CrossSpec("cosine"))
    assert ModelSpec(arm_a, arm_b, CrossSpec("dense_cross", (2, 1))).cross_input_dim == 7


def test_tensor_shapes_are_determined_by_spec(tiny_model):
    for name, shape in tiny_model.spec.tensor_shapes():
        assert tiny_model.tensors()[name].shape == shape
        assert tiny_model.tensors()[name].dtype == np.float32


def test_model_bundle_round_trip(tiny_model, tmp_path):
    nncore.save_model(tiny_model, tmp_path / "m")
    loaded = nncore.load_model(tmp_path / "m")
    assert loaded.spec == tiny_model.spec
    assert loaded.vocab == tiny_model.vocab
    for name, t in tiny_model.tensors().items():
        assert loaded.tensors()[name].tobytes() == t.tobytes()


def test_model_bundle_weights_layout(tiny_model, tmp_path):
    nncore.save_model(tiny_model, tmp_path / "m")
    raw = (tmp_path / "m" / "weights.bin").read_bytes()
    expected = b"".join(t.astype("<f4").tobytes() for t in tiny_model.tensors().values())
    assert raw == expected


def test_model_bundle_truncated(tiny_model, tmp_path):
    nncore.save_model(tiny_model, tmp_path / "m")
    path = tmp_path / "m" / "weights.bin"
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError, match="truncated inside tensor"):
        nncore.load_model(tmp_path / "m")


def test_model_bundle_corrupt_manifest(tiny_model, tmp_path):
    nncore.save_model(tiny_model, tmp_path / "m")
    (tmp_path / "m" / "manifest.json").write_text("{not json")
    with pytest.raises(FormatError):
        nncore.load_model(tmp_path / "m")
