import numpy as np
import pytest

from splitrank import nncore
from splitrank.synth import SyntheticConfig, gen_synthetic, triples_from_rows
from splitrank.vocab import Vocabulary

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_vocab():
    return Vocabulary({0: [f"t{i}" for i in range(20)], 1: [f"s{i}" for i in range(12)], 2: ["a", "b", "c"]})


def random_inputs(rng, vocab, fields=(0, 1, 2), max_len=4):
    return {f: [int(x) for x in rng.integers(0, vocab.size(f), size=int(rng.integers(0, max_len + 1)))]
            for f in fields}


@pytest.fixture
def tiny_model(tiny_vocab):
    spec = nncore.default_spec(tiny_vocab, embed_dim=4, query_hidden=(6,), member_hidden=(8, 6))
    model = nncore.TwoTowerModel.initialize(spec, seed=3, vocab=tiny_vocab)
    # scale up so outputs are far from zero and comparisons are meaningful
    return nncore.TwoTowerModel(spec, {n: t * 10 for n, t in model.tensors().items()}, tiny_vocab)


SMALL_CONFIG = dict(seed=11, n_members=3000, n_clusters=6, train_queries_per_cluster=60,
                    test_queries_per_cluster=6, pairs_per_query=4)


@pytest.fixture(scope="session")
def small_data():
    return gen_synthetic(SyntheticConfig(**SMALL_CONFIG))


@pytest.fixture(scope="session")
def small_members(small_data):
    return {m.uid: m for m in small_data.members}


@pytest.fixture(scope="session")
def small_trained(small_data, small_members):
    spec = nncore.default_spec(small_data.vocab)
    model = nncore.TwoTowerModel.initialize(spec, seed=7, vocab=small_data.vocab)
    result = nncore.train(model, triples_from_rows(small_data.train, small_members), lr=0.01, epochs=4, seed=7)
    return result.model


@pytest.fixture(scope="session")
def default_data():
    return gen_synthetic(SyntheticConfig())
