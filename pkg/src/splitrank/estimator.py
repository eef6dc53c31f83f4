"""scikit-learn style wrapper around the two-tower network."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import nncore
from .errors import InputError
from .nncore import TrainExample
from .vocab import Vocabulary


def check_triples(X) -> list[TrainExample]:
    """Accept TrainExamples or (query, positive, negative) tuples."""
    out = []
    for row in X:
        if isinstance(row, TrainExample):
            out.append(row)
        elif isinstance(row, (tuple, list)) and len(row) == 3:
            out.append(TrainExample(*row))
        else:
            raise InputError(f"expected a (query, positive, negative) triple, got {type(row).__name__}")
    if not out:
        raise InputError("expected at least one training triple")
    return out


def check_pairs(X) -> list[tuple]:
    out = []
    for row in X:
        if not isinstance(row, (tuple, list)) or len(row) != 2:
            raise InputError(f"expected a (query, member) pair, got {row!r}")
        out.append(tuple(row))
    return out


def _vocab_from_triples(triples) -> Vocabulary:
    streams: dict[int, list[str]] = {}
    for ex in triples:
        for obj in (ex.query, ex.positive, ex.negative):
            if not hasattr(obj, "model_inputs"):
                raise InputError("learning a vocabulary needs string features; pass vocabulary=")
            for f, toks in obj.model_inputs().items():
                streams.setdefault(f, []).extend(toks)
    return Vocabulary.from_iterables(streams)


class TwoTowerRanker(BaseEstimator):
    """Pairwise-trained two-tower ranker.

    ``fit`` takes (query, positive member, negative member) triples;
    ``decision_function`` scores (query, member) pairs; ``score`` reports
    pairwise accuracy on triples.  When ``vocabulary`` is None it is learned
    from the training triples.
    """

    def __init__(self, vocabulary=None, embed_dim=16, query_hidden=(64,), member_hidden=(128, 64),
                 activation="tanh", cross="cosine", cross_hidden=(32, 1), pooling="mean",
                 lr=0.01, epochs=20, batch_size=64, margin=0.0, optimizer="adam", random_state=0):
        self.vocabulary = vocabulary
        self.embed_dim = embed_dim
        self.query_hidden = query_hidden
        self.member_hidden = member_hidden
        self.activation = activation
        self.cross = cross
        self.cross_hidden = cross_hidden
        self.pooling = pooling
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.margin = margin
        self.optimizer = optimizer
        self.random_state = random_state

    def _build_spec(self, vocab):
        return nncore.default_spec(vocab, embed_dim=self.embed_dim, query_hidden=self.query_hidden,
                                   member_hidden=self.member_hidden, activation=self.activation,
                                   cross=self.cross, cross_hidden=self.cross_hidden, pooling=self.pooling)

    def fit(self, X, y=None):
        triples = check_triples(X)
        vocab = self.vocabulary
        if vocab is None:
            vocab = _vocab_from_triples(triples)
        elif not isinstance(vocab, Vocabulary):
            vocab = Vocabulary(vocab)
        self.vocabulary_ = vocab
        seed = 0 if self.random_state is None else int(self.random_state)
        model = nncore.TwoTowerModel.initialize(self._build_spec(vocab), seed=seed, vocab=vocab)
        result = nncore.train(model, triples, lr=self.lr, epochs=self.epochs, seed=seed,
                              margin=self.margin, batch_size=self.batch_size, optimizer=self.optimizer)
        self.model_ = result.model
        self.loss_curve_ = result.loss_trace
        return self

    def transform_queries(self, queries) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.query.forward_batch(list(queries))

    def transform_members(self, members) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.member.forward_batch(list(members))

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        pairs = check_pairs(X)
        if not pairs:
            return np.zeros(0, dtype=np.float32)
        Q = self.transform_queries([p[0] for p in pairs])
        M = self.transform_members([p[1] for p in pairs])
        return self.model_.cross.score_batch(Q, M)

    def predict(self, X) -> np.ndarray:
        """1 where the first member of each triple outranks the second, else 0."""
        check_is_fitted(self, "model_")
        triples = check_triples(X)
        pos = self.decision_function([(t.query, t.positive) for t in triples])
        neg = self.decision_function([(t.query, t.negative) for t in triples])
        return (pos > neg).astype(int)

    def score(self, X, y=None) -> float:
        return float(np.mean(self.predict(X)))
