"""Two-tower ranking network with a late-crossing similarity layer.

Each arm pools the embeddings of every input field, stacks the pooled
vectors in declared field order and runs them through a dense stack.  The
cross layer turns the two arm outputs into one score.  Everything here is
plain numpy; forward passes use ``einsum`` so that a row's result does not
depend on how many other rows share the batch.
"""
from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import bundle
from .errors import FormatError, InputError, TrainingError
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu")
POOLINGS = ("mean", "sum")
CROSS_KINDS = ("cosine", "dense_cross")
INIT_RANGE = 0.05
ROMBERG_LEVELS = 4
GRAD_CHECK_FLOOR = 1e-6


# --------------------------------------------------------------------- specs


@dataclass(frozen=True)
class FieldSpec:
    field_id: int
    vocab_size: int
    embed_dim: int
    pooling: str = "mean"

    def __post_init__(self):
        if self.vocab_size < 1:
            raise InputError(f"field {self.field_id}: vocab_size must be >= 1")
        if self.embed_dim < 1:
            raise InputError(f"field {self.field_id}: embed_dim must be >= 1")
        if self.pooling not in POOLINGS:
            raise InputError(f"unknown pooling {self.pooling!r}")

    def to_dict(self):
        return {"field_id": self.field_id, "vocab_size": self.vocab_size,
                "embed_dim": self.embed_dim, "pooling": self.pooling}


@dataclass(frozen=True)
class ArmSpec:
    fields: tuple[FieldSpec, ...]
    hidden_dims: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.fields:
            raise InputError("an arm needs at least one field")
        ids = [f.field_id for f in self.fields]
        if len(set(ids)) != len(ids):
            raise InputError(f"duplicate field ids {ids}")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise InputError("hidden_dims must be a non-empty list of positive ints")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return sum(f.embed_dim for f in self.fields)

    @property
    def output_dim(self) -> int:
        return self.hidden_dims[-1]

    @property
    def field_ids(self) -> list[int]:
        return [f.field_id for f in self.fields]

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = [(f"emb/{f.field_id}", (f.vocab_size, f.embed_dim)) for f in self.fields]
        width = self.input_dim
        for i, h in enumerate(self.hidden_dims):
            shapes += [(f"dense/{i}/W", (width, h)), (f"dense/{i}/b", (h,))]
            width = h
        return shapes

    def to_dict(self):
        return {"fields": [f.to_dict() for f in self.fields],
                "hidden_dims": list(self.hidden_dims), "activation": self.activation}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(FieldSpec(**f) for f in d["fields"]), tuple(d["hidden_dims"]),
                   d.get("activation", "tanh"))


@dataclass(frozen=True)
class CrossSpec:
    kind: str = "cosine"
    hidden_dims: tuple[int, ...] = ()
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.kind not in CROSS_KINDS:
            raise InputError(f"unknown cross kind {self.kind!r}")
        if self.kind == "dense_cross":
            if not self.hidden_dims or self.hidden_dims[-1] != 1 or min(self.hidden_dims) < 1:
                raise InputError("dense_cross hidden_dims must be positive and end with width 1")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")

    def tensor_shapes(self, input_dim: int) -> list[tuple[str, tuple[int, ...]]]:
        if self.kind == "cosine":
            return []
        shapes, width = [], input_dim
        for i, h in enumerate(self.hidden_dims):
            shapes += [(f"dense/{i}/W", (width, h)), (f"dense/{i}/b", (h,))]
            width = h
        return shapes

    def to_dict(self):
        return {"kind": self.kind, "hidden_dims": list(self.hidden_dims), "activation": self.activation}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("kind", "cosine"), tuple(d.get("hidden_dims", ())), d.get("activation", "tanh"))


@dataclass(frozen=True)
class ModelSpec:
    query_arm: ArmSpec
    member_arm: ArmSpec
    cross: CrossSpec = field(default_factory=CrossSpec)

    def __post_init__(self):
        if self.cross.kind == "cosine" and self.query_arm.output_dim != self.member_arm.output_dim:
            raise InputError(
                f"cosine cross needs equal arm outputs, got {self.query_arm.output_dim} "
                f"and {self.member_arm.output_dim}"
            )

    @property
    def cross_input_dim(self) -> int:
        return self.query_arm.output_dim + self.member_arm.output_dim

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = [(f"query/{n}", s) for n, s in self.query_arm.tensor_shapes()]
        shapes += [(f"member/{n}", s) for n, s in self.member_arm.tensor_shapes()]
        shapes += [(f"cross/{n}", s) for n, s in self.cross.tensor_shapes(self.cross_input_dim)]
        return shapes

    def to_dict(self):
        return {"query_arm": self.query_arm.to_dict(), "member_arm": self.member_arm.to_dict(),
                "cross": self.cross.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(ArmSpec.from_dict(d["query_arm"]), ArmSpec.from_dict(d["member_arm"]),
                   CrossSpec.from_dict(d.get("cross", {})))


def default_spec(vocab: Vocabulary, *, embed_dim=16, query_hidden=(64,), member_hidden=(128, 64),
                 activation="tanh", cross="cosine", cross_hidden=(32, 1), pooling="mean",
                 query_fields=None, member_fields=None) -> ModelSpec:
    """Shallow query arm, deeper member arm, one field per vocabulary entry."""
    def arm(ids, hidden):
        ids = vocab.field_ids if ids is None else list(ids)
        return ArmSpec(tuple(FieldSpec(f, vocab.size(f), embed_dim, pooling) for f in ids),
                       tuple(hidden), activation)
    cross_spec = CrossSpec(cross, tuple(cross_hidden) if cross == "dense_cross" else (), activation)
    return ModelSpec(arm(query_fields, query_hidden), arm(member_fields, member_hidden), cross_spec)


# ------------------------------------------------------------------ helpers


def _activate(z, kind):
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0)


def _activate_grad(z, h, kind):
    if kind == "tanh":
        return 1 - h * h
    return (z > 0).astype(z.dtype)


def _affine(h, W, b):
    return np.einsum("bi,ij->bj", h, W) + b


def _pool_matrix(token_lists: Sequence[Sequence[int]], vocab_size: int, dtype):
    lengths = np.fromiter((len(t) for t in token_lists), dtype=np.int64, count=len(token_lists))
    indptr = np.zeros(len(token_lists) + 1, dtype=np.int64)
    np.cumsum(lengths, out=indptr[1:])
    if indptr[-1]:
        indices = np.fromiter((i for t in token_lists for i in t), dtype=np.int64, count=int(indptr[-1]))
        if indices.min() < 0 or indices.max() >= vocab_size:
            bad = indices[(indices < 0) | (indices >= vocab_size)][0]
            raise InputError(f"token id {int(bad)} out of range for vocab_size {vocab_size}")
    else:
        indices = np.zeros(0, dtype=np.int64)
    data = np.ones(len(indices), dtype=dtype)
    P = sp.csr_matrix((data, indices, indptr), shape=(len(token_lists), vocab_size))
    return P, lengths


def _pool(token_lists, table, mode):
    P, lengths = _pool_matrix(token_lists, table.shape[0], table.dtype)
    pooled = np.asarray(P @ table)
    if mode == "mean":
        pooled = pooled / np.maximum(lengths, 1).astype(table.dtype)[:, None]
    return pooled, P, lengths


def embed_pool(tokens: Sequence[int], table: np.ndarray, mode: str = "mean") -> np.ndarray:
    """Mean or sum of the selected embedding rows; the zero vector for no tokens."""
    if mode not in POOLINGS:
        raise InputError(f"unknown pooling {mode!r}")
    return _pool([list(tokens)], table, mode)[0][0]


# --------------------------------------------------------------------- nets


class Arm:
    """One tower: per-field pooled embeddings, stacked, then a dense stack."""

    def __init__(self, spec: ArmSpec, params: Mapping[str, np.ndarray], vocab: Vocabulary | None = None):
        self.spec = spec
        self.params = {n: np.asarray(params[n]) for n, _ in spec.tensor_shapes()}
        for name, shape in spec.tensor_shapes():
            if self.params[name].shape != shape:
                raise InputError(f"tensor {name!r} has shape {self.params[name].shape}, expected {shape}")
        self.vocab = vocab

    @property
    def dtype(self):
        return self.params[f"emb/{self.spec.fields[0].field_id}"].dtype

    def encode(self, inputs) -> dict[int, list[int]]:
        """Accept id lists keyed by field, or a feature object exposing ``model_inputs()``."""
        if hasattr(inputs, "model_inputs"):
            if self.vocab is None:
                raise InputError("string features need a vocabulary")
            return self.vocab.encode_inputs(inputs.model_inputs(), self.spec.field_ids)
        missing = [f for f in self.spec.field_ids if f not in inputs]
        if missing:
            raise InputError(f"inputs missing field(s) {missing}")
        return {f: list(inputs[f]) for f in self.spec.field_ids}

    def aggregate(self, batch: Sequence[Mapping[int, Sequence[int]]]):
        parts, pools = [], []
        for fs in self.spec.fields:
            pooled, P, lengths = _pool([x[fs.field_id] for x in batch], self.params[f"emb/{fs.field_id}"], fs.pooling)
            parts.append(pooled)
            pools.append((P, lengths))
        return np.concatenate(parts, axis=1), pools

    def dense(self, x: np.ndarray, cache=False):
        hs, zs = [x], []
        for i in range(len(self.spec.hidden_dims)):
            z = _affine(hs[-1], self.params[f"dense/{i}/W"], self.params[f"dense/{i}/b"])
            zs.append(z)
            hs.append(_activate(z, self.spec.activation))
        return (hs[-1], (hs, zs)) if cache else hs[-1]

    def forward_batch(self, batch) -> np.ndarray:
        encoded = [self.encode(x) for x in batch]
        if not encoded:
            return np.zeros((0, self.spec.output_dim), dtype=self.dtype)
        x, _ = self.aggregate(encoded)
        return self.dense(x)

    def forward(self, inputs) -> np.ndarray:
        return self.forward_batch([inputs])[0]

    def _forward_train(self, encoded):
        x, pools = self.aggregate(encoded)
        out, (hs, zs) = self.dense(x, cache=True)
        return out, (pools, hs, zs)

    def _backward(self, cache, d_out) -> dict[str, np.ndarray]:
        pools, hs, zs = cache
        grads = {}
        dh = d_out
        for i in reversed(range(len(self.spec.hidden_dims))):
            dz = dh * _activate_grad(zs[i], hs[i + 1], self.spec.activation)
            grads[f"dense/{i}/W"] = hs[i].T @ dz
            grads[f"dense/{i}/b"] = dz.sum(axis=0)
            dh = dz @ self.params[f"dense/{i}/W"].T
        start = 0
        for fs, (P, lengths) in zip(self.spec.fields, pools):
            d_pooled = dh[:, start:start + fs.embed_dim]
            start += fs.embed_dim
            if fs.pooling == "mean":
                d_pooled = d_pooled / np.maximum(lengths, 1).astype(d_pooled.dtype)[:, None]
            grads[f"emb/{fs.field_id}"] = np.asarray(P.T @ d_pooled)
        return grads


class Cross:
    """Similarity layer combining a query and a member representation."""

    def __init__(self, spec: CrossSpec, params: Mapping[str, np.ndarray] | None, query_dim: int, member_dim: int):
        self.spec = spec
        self.query_dim = query_dim
        self.member_dim = member_dim
        params = params or {}
        self.params = {n: np.asarray(params[n]) for n, _ in spec.tensor_shapes(query_dim + member_dim)}
        for name, shape in spec.tensor_shapes(query_dim + member_dim):
            if self.params[name].shape != shape:
                raise InputError(f"tensor {name!r} has shape {self.params[name].shape}, expected {shape}")

    def _check(self, Q, M):
        if Q.ndim != 2 or M.ndim != 2 or Q.shape[0] != M.shape[0]:
            raise InputError(f"bad batch shapes {Q.shape} / {M.shape}")
        if Q.shape[1] != self.query_dim or M.shape[1] != self.member_dim:
            raise InputError(
                f"dimension mismatch: query {Q.shape[1]} vs {self.query_dim}, "
                f"member {M.shape[1]} vs {self.member_dim}"
            )

    def score_batch(self, Q, M) -> np.ndarray:
        Q, M = np.atleast_2d(Q), np.atleast_2d(M)
        self._check(Q, M)
        return self._forward(Q, M)[0]

    def score_query(self, q, M) -> np.ndarray:
        """Scores of one query vector against every row of M.

        Same values as score_batch with q repeated per row, without building
        the repeated query matrix."""
        q, M = np.asarray(q), np.atleast_2d(M)
        if q.shape != (self.query_dim,) or M.shape[1] != self.member_dim:
            raise InputError(f"dimension mismatch: query {q.shape} vs ({self.query_dim},), "
                             f"member {M.shape[1]} vs {self.member_dim}")
        dtype = np.result_type(q, M)
        if self.spec.kind == "cosine":
            dot = M @ q
            denom = np.sqrt(q @ q) * np.sqrt(np.einsum("ij,ij->i", M, M))
            ok = denom != 0
            return np.where(ok, dot / np.where(ok, denom, 1), 0).astype(dtype)
        # the query half of the first layer is shared by every row
        W0 = self.params["dense/0/W"]
        h = M @ W0[self.query_dim:] + (q @ W0[:self.query_dim] + self.params["dense/0/b"])
        for i in range(1, len(self.spec.hidden_dims)):
            h = _affine(_activate(h, self.spec.activation), self.params[f"dense/{i}/W"], self.params[f"dense/{i}/b"])
        return h[:, 0].astype(dtype)

    def _forward(self, Q, M):
        if self.spec.kind == "cosine":
            dot = (Q * M).sum(axis=1)
            qn = np.sqrt((Q * Q).sum(axis=1))
            mn = np.sqrt((M * M).sum(axis=1))
            denom = qn * mn
            ok = denom != 0  # NaN stays NaN so training can flag it
            s = np.where(ok, dot / np.where(ok, denom, 1), 0).astype(np.result_type(Q, M))
            return s, (Q, M, qn, mn, denom, ok, s)
        hs, zs = [np.concatenate([Q, M], axis=1)], []
        n = len(self.spec.hidden_dims)
        for i in range(n):
            z = _affine(hs[-1], self.params[f"dense/{i}/W"], self.params[f"dense/{i}/b"])
            zs.append(z)
            hs.append(z if i == n - 1 else _activate(z, self.spec.activation))
        return hs[-1][:, 0], (hs, zs)

    def _backward(self, cache, d_s):
        grads = {}
        if self.spec.kind == "cosine":
            Q, M, qn, mn, denom, ok, s = cache
            safe_denom = np.where(ok, denom, 1)[:, None]
            safe_qn2 = np.where(ok, qn * qn, 1)[:, None]
            safe_mn2 = np.where(ok, mn * mn, 1)[:, None]
            w = np.where(ok, d_s, 0)[:, None]
            dQ = w * (M / safe_denom - s[:, None] * Q / safe_qn2)
            dM = w * (Q / safe_denom - s[:, None] * M / safe_mn2)
            return grads, dQ, dM
        hs, zs = cache
        n = len(self.spec.hidden_dims)
        dh = d_s[:, None]
        for i in reversed(range(n)):
            dz = dh if i == n - 1 else dh * _activate_grad(zs[i], hs[i + 1], self.spec.activation)
            grads[f"dense/{i}/W"] = hs[i].T @ dz
            grads[f"dense/{i}/b"] = dz.sum(axis=0)
            dh = dz @ self.params[f"dense/{i}/W"].T
        return grads, dh[:, :self.query_dim], dh[:, self.query_dim:]


class TwoTowerModel:
    """A trained (or freshly initialised) network: spec, tensors and vocabulary."""

    def __init__(self, spec: ModelSpec, tensors: Mapping[str, np.ndarray], vocab: Vocabulary | None = None):
        self.spec = spec
        self.vocab = vocab

        def sub(prefix):
            return {n[len(prefix):]: t for n, t in tensors.items() if n.startswith(prefix)}

        self.query = Arm(spec.query_arm, sub("query/"), vocab)
        self.member = Arm(spec.member_arm, sub("member/"), vocab)
        self.cross = Cross(spec.cross, sub("cross/"), spec.query_arm.output_dim, spec.member_arm.output_dim)
        if vocab is not None:
            for arm in (spec.query_arm, spec.member_arm):
                for fs in arm.fields:
                    if fs.field_id not in vocab.field_ids or vocab.size(fs.field_id) != fs.vocab_size:
                        raise InputError(f"vocabulary does not match field {fs.field_id}")

    @classmethod
    def initialize(cls, spec: ModelSpec, seed: int = 0, vocab: Vocabulary | None = None, dtype=np.float32):
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in spec.tensor_shapes():
            if name.endswith("/b"):
                tensors[name] = np.zeros(shape, dtype=dtype)
            else:
                tensors[name] = rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape).astype(dtype)
        return cls(spec, tensors, vocab)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, part in (("query/", self.query), ("member/", self.member), ("cross/", self.cross)):
            out.update({prefix + n: t for n, t in part.params.items()})
        return {n: out[n] for n, _ in self.spec.tensor_shapes()}

    def astype(self, dtype) -> TwoTowerModel:
        return TwoTowerModel(self.spec, {n: t.astype(dtype) for n, t in self.tensors().items()}, self.vocab)

    def copy(self) -> TwoTowerModel:
        return self.astype(self.query.dtype)

    def score(self, q, m) -> float:
        return score_pair(self, q, m)


# ------------------------------------------------------------ public ops


def forward_arm(arm: Arm, inputs) -> np.ndarray:
    return arm.forward(inputs)


def similarity(cross: Cross, qvec, mvec) -> float:
    """Cosine (zero vectors score 0.0) or the dense cross network's scalar output."""
    qvec = np.asarray(qvec)
    mvec = np.asarray(mvec)
    if qvec.ndim != 1 or mvec.ndim != 1:
        raise InputError("similarity expects two vectors")
    if cross.spec.kind == "cosine" and qvec.shape != mvec.shape:
        raise InputError(f"dimension mismatch {qvec.shape} vs {mvec.shape}")
    return float(cross.score_batch(qvec[None], mvec[None])[0])


def score_pair(model: TwoTowerModel, q, m) -> float:
    """Monolithic ``f(q, m)``: both arms then the similarity layer."""
    return similarity(model.cross, model.query.forward(q), model.member.forward(m))


# -------------------------------------------------------------- training


@dataclass
class TrainExample:
    query: object
    positive: object
    negative: object


@dataclass
class TrainResult:
    model: TwoTowerModel
    loss_trace: list[float]


def _encode_examples(model, dataset):
    enc = []
    for ex in dataset:
        pos_uid = getattr(ex.positive, "uid", None)
        if pos_uid is not None and pos_uid == getattr(ex.negative, "uid", None):
            raise InputError(f"positive and negative share uid {pos_uid}")
        enc.append((model.query.encode(ex.query), model.member.encode(ex.positive), model.member.encode(ex.negative)))
    return enc


def _loss_and_grads(model: TwoTowerModel, batch, margin=0.0, with_grads=True):
    """Mean pairwise logistic loss log(1 + exp(-(s+ - s- - margin))) over the batch."""
    qs = [b[0] for b in batch]
    ms = [b[1] for b in batch] + [b[2] for b in batch]
    B = len(batch)
    Q, qcache = model.query._forward_train(qs)
    M, mcache = model.member._forward_train(ms)
    QQ = np.concatenate([Q, Q], axis=0)
    s, ccache = model.cross._forward(QQ, M)
    delta = s[:B] - s[B:] - margin
    loss = float(np.mean(np.logaddexp(0, -delta.astype(np.float64))))
    if not with_grads:
        return loss, None
    # d/d(delta) softplus(-delta) = -sigmoid(-delta)
    d_delta = (-0.5 * (1 - np.tanh(delta / 2)) / B).astype(s.dtype)
    d_s = np.concatenate([d_delta, -d_delta])
    cgrads, dQQ, dM = model.cross._backward(ccache, d_s)
    dQ = dQQ[:B] + dQQ[B:]
    grads = {}
    grads.update({"query/" + n: g for n, g in model.query._backward(qcache, dQ).items()})
    grads.update({"member/" + n: g for n, g in model.member._backward(mcache, dM).items()})
    grads.update({"cross/" + n: g for n, g in cgrads.items()})
    return loss, grads


def dataset_loss(model: TwoTowerModel, encoded, margin=0.0, batch_size=1024) -> float:
    total = 0.0
    for i in range(0, len(encoded), batch_size):
        chunk = encoded[i:i + batch_size]
        total += _loss_and_grads(model, chunk, margin, with_grads=False)[0] * len(chunk)
    return total / len(encoded)


def train(model: TwoTowerModel, dataset: Sequence[TrainExample], *, lr=0.01, epochs=20, seed=0,
          margin=0.0, batch_size=64, optimizer="adam", encoded=None) -> TrainResult:
    """Mini-batch gradient descent on the pairwise logistic loss.

    Returns a new model; the input model is not modified.  The loss trace holds
    the full training-set loss measured after each epoch.
    """
    if lr < 0:
        raise InputError("lr must be >= 0")
    if optimizer not in ("sgd", "adam"):
        raise InputError(f"unknown optimizer {optimizer!r}")
    if encoded is None:
        if not dataset:
            raise InputError("training dataset is empty")
        encoded = _encode_examples(model, dataset)
    if not encoded:
        raise InputError("training dataset is empty")
    model = model.copy()
    views = {}
    for prefix, part in (("query/", model.query), ("member/", model.member), ("cross/", model.cross)):
        views.update({prefix + n: part.params[n] for n in part.params})
    m1 = {n: np.zeros_like(p) for n, p in views.items()}
    m2 = {n: np.zeros_like(p) for n, p in views.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    rng = np.random.default_rng(seed)
    trace = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(encoded))
        for start in range(0, len(order), batch_size):
            batch = [encoded[i] for i in order[start:start + batch_size]]
            loss, grads = _loss_and_grads(model, batch, margin)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            if lr == 0:
                continue
            step += 1
            for name, g in grads.items():
                p = views[name]
                if optimizer == "sgd":
                    p -= np.asarray(lr * g, dtype=p.dtype)
                    continue
                m1[name] = beta1 * m1[name] + (1 - beta1) * g
                m2[name] = beta2 * m2[name] + (1 - beta2) * g * g
                mhat = m1[name] / (1 - beta1 ** step)
                vhat = m2[name] / (1 - beta2 ** step)
                p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
        epoch_loss = dataset_loss(model, encoded, margin)
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
        trace.append(epoch_loss)
        logger.info("epoch %d loss %.5f", epoch, epoch_loss)
    return TrainResult(model, trace)


def pairwise_accuracy(model: TwoTowerModel, dataset=None, *, encoded=None, batch_size=1024) -> float:
    """Fraction of triples where the positive member outscores the negative."""
    if encoded is None:
        encoded = _encode_examples(model, dataset)
    wins = 0
    for i in range(0, len(encoded), batch_size):
        chunk = encoded[i:i + batch_size]
        Q = model.query.dense(model.query.aggregate([c[0] for c in chunk])[0])
        P = model.member.dense(model.member.aggregate([c[1] for c in chunk])[0])
        N = model.member.dense(model.member.aggregate([c[2] for c in chunk])[0])
        wins += int(np.sum(model.cross.score_batch(Q, P) > model.cross.score_batch(Q, N)))
    return wins / len(encoded)


# ---------------------------------------------------------- gradient check


def _kink_pattern(model, batch):
    pattern = []
    for arm, xs in ((model.query, [b[0] for b in batch]),
                    (model.member, [b[1] for b in batch] + [b[2] for b in batch])):
        if arm.spec.activation == "relu":
            _, (_, _, zs) = arm._forward_train(xs)
            pattern += [z > 0 for z in zs]
    if model.cross.spec.kind == "dense_cross" and model.cross.spec.activation == "relu":
        Q = model.query.forward_batch([b[0] for b in batch])
        M = model.member.forward_batch([b[1] for b in batch] + [b[2] for b in batch])
        _, (_, zs) = model.cross._forward(np.concatenate([Q, Q]), M)
        pattern += [z > 0 for z in zs[:-1]]
    if model.cross.spec.kind == "cosine":
        # cosine is not differentiable where an arm output is exactly zero
        Q = model.query.forward_batch([b[0] for b in batch])
        M = model.member.forward_batch([b[1] for b in batch] + [b[2] for b in batch])
        pattern += [~Q.any(axis=1), ~M.any(axis=1)]
    return pattern


def grad_check(model: TwoTowerModel, example, epsilon=1e-4, *, n_params=64, seed=0, margin=0.0) -> float:
    """Max relative error between backprop and central finite differences.

    Runs in float64 on a copy.  The numeric side takes central differences at
    ``epsilon / 2**i`` for ``i < ROMBERG_LEVELS`` and combines them by
    Richardson extrapolation.  This keeps the oracle accurate when the arm
    outputs are small: near the usual initialisation a member vector can be
    only a few times larger than ``epsilon``, and the cosine curvature grows
    like 1/|m|^2.  Parameters are sampled from the dense layers
    and the embedding rows the example actually touches.  Samples whose
    perturbation crosses a kink (a relu flipping, or a cosine input leaving
    the zero vector) are redrawn.  The denominator is
    floored at ``GRAD_CHECK_FLOOR``: the extrapolated difference carries
    ~1e-11 of roundoff, so gradients below the floor are compared on an
    absolute scale.  Two zero gradients give error 0.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise InputError("epsilon must lie in [1e-6, 1e-3]")
    m64 = model.astype(np.float64)
    batch = _encode_examples(m64, [example]) if isinstance(example, TrainExample) else [tuple(example)]
    _, grads = _loss_and_grads(m64, batch, margin)

    views = {}
    for prefix, part in (("query/", m64.query), ("member/", m64.member), ("cross/", m64.cross)):
        views.update({prefix + n: part.params[n] for n in part.params})
    candidates = []
    for name, p in views.items():
        if "/emb/" in name:
            fid = int(name.rsplit("/", 1)[1])
            slot = (0,) if name.startswith("query/") else (1, 2)
            rows = sorted({t for b in batch for s in slot for t in b[s].get(fid, [])})
            candidates += [(name, r * p.shape[1] + c) for r in rows for c in range(p.shape[1])]
        else:
            candidates += [(name, i) for i in range(p.size)]
    if not candidates:
        return 0.0
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(candidates))
    base_pattern = _kink_pattern(m64, batch)

    worst, checked = 0.0, 0
    for idx in order:
        if checked >= n_params:
            break
        name, flat = candidates[idx]
        p = views[name].reshape(-1)
        orig = p[flat]
        diffs, kink = [], False
        for level in range(ROMBERG_LEVELS):
            h = epsilon / 2 ** level
            losses = []
            for x in (orig + h, orig - h):
                p[flat] = x
                losses.append(_loss_and_grads(m64, batch, margin, with_grads=False)[0])
                if base_pattern:
                    kink = kink or not all(np.array_equal(a, b)
                                           for a, b in zip(_kink_pattern(m64, batch), base_pattern))
            diffs.append((losses[0] - losses[1]) / (2 * h))
        p[flat] = orig
        if kink:
            continue
        # Romberg table on the halving steps: each column cancels the next even power of h
        for j in range(1, ROMBERG_LEVELS):
            f = 4 ** j
            diffs = [(f * diffs[i + 1] - diffs[i]) / (f - 1) for i in range(len(diffs) - 1)]
        numeric = diffs[0]
        analytic = float(grads[name].reshape(-1)[flat])
        denom = max(abs(numeric), abs(analytic), GRAD_CHECK_FLOOR)
        rel = abs(numeric - analytic) / denom
        worst = max(worst, rel)
        checked += 1
    return worst


# ------------------------------------------------------------ persistence


def save_model(model: TwoTowerModel, path, version: str = "") -> Path:
    manifest = {"kind": "model", "version": version, "spec": model.spec.to_dict(),
                "vocab": model.vocab.to_dict() if model.vocab is not None else None}
    return bundle.write_bundle(path, manifest, model.tensors())


def load_model(path) -> TwoTowerModel:
    manifest, tensors = bundle.read_bundle(path)
    if manifest.get("kind") != "model":
        raise FormatError(f"{path}: expected a model bundle, found kind {manifest.get('kind')!r}")
    try:
        spec = ModelSpec.from_dict(manifest["spec"])
    except (KeyError, TypeError, InputError) as exc:
        raise FormatError(f"{path}: invalid spec in manifest ({exc})") from exc
    bundle.check_tensor_shapes(path, tensors, spec.tensor_shapes())
    vocab = Vocabulary.from_dict(manifest["vocab"]) if manifest.get("vocab") else None
    return TwoTowerModel(spec, tensors, vocab)
