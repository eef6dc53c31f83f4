"""Carve a trained two-tower model into query-arm, member-arm and cross bundles.

The three pieces are deployed on different tiers (frontend, indexer,
searcher), so each bundle carries the same version id; downstream code
refuses to combine pieces whose ids disagree.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bundle
from .errors import FormatError, InputError, VersionError
from .nncore import Arm, ArmSpec, Cross, CrossSpec, TwoTowerModel
from .vocab import Vocabulary

MAX_VERSION = 0xFFFF


@dataclass(frozen=True)
class ModelVersion:
    version_id: int
    label: str = ""

    def __post_init__(self):
        if not isinstance(self.version_id, (int, np.integer)) or not 0 < self.version_id <= MAX_VERSION:
            raise InputError(f"version_id must be in 1..{MAX_VERSION} (0 is reserved), got {self.version_id!r}")
        object.__setattr__(self, "version_id", int(self.version_id))

    def to_dict(self):
        return {"id": self.version_id, "label": self.label}


@dataclass
class QueryArmBundle:
    version: ModelVersion
    arm: Arm
    kind = "query_arm"


@dataclass
class MemberArmBundle:
    version: ModelVersion
    arm: Arm
    kind = "member_arm"


@dataclass
class CrossBundle:
    version: ModelVersion
    cross: Cross
    kind = "cross"

    def score_batch(self, Q, M):
        return self.cross.score_batch(Q, M)


def _copy_arm(arm: Arm) -> Arm:
    return Arm(arm.spec, {n: t.copy() for n, t in arm.params.items()}, arm.vocab)


def split(model: TwoTowerModel, version) -> tuple[QueryArmBundle, MemberArmBundle, CrossBundle]:
    if not isinstance(version, ModelVersion):
        version = ModelVersion(version)
    for name, t in model.tensors().items():
        if not np.all(np.isfinite(t)):
            raise InputError(f"tensor {name!r} has non-finite values")
    cross = Cross(model.cross.spec, {n: t.copy() for n, t in model.cross.params.items()},
                  model.cross.query_dim, model.cross.member_dim)
    return (QueryArmBundle(version, _copy_arm(model.query)),
            MemberArmBundle(version, _copy_arm(model.member)),
            CrossBundle(version, cross))


def tensor_names(b) -> set[str]:
    """Tensor names in the monolithic model's namespace."""
    if isinstance(b, CrossBundle):
        return {"cross/" + n for n in b.cross.params}
    prefix = "query/" if isinstance(b, QueryArmBundle) else "member/"
    return {prefix + n for n in b.arm.params}


def check_versions(*bundles) -> ModelVersion:
    ids = {b.version.version_id for b in bundles}
    if len(ids) != 1:
        raise VersionError(f"mixed bundle versions {sorted(ids)}")
    return bundles[0].version


def compose_score(qb: QueryArmBundle, mb: MemberArmBundle, cb: CrossBundle, q, m) -> float:
    check_versions(qb, mb, cb)
    qvec = qb.arm.forward(q)
    mvec = mb.arm.forward(m)
    return float(cb.cross.score_batch(qvec[None], mvec[None])[0])


def save_bundle(b, path) -> Path:
    manifest = {"kind": b.kind, "version": b.version.to_dict()}
    if isinstance(b, CrossBundle):
        manifest["spec"] = {**b.cross.spec.to_dict(), "query_dim": b.cross.query_dim,
                            "member_dim": b.cross.member_dim}
        tensors = b.cross.params
    else:
        manifest["spec"] = b.arm.spec.to_dict()
        manifest["vocab"] = b.arm.vocab.to_dict() if b.arm.vocab is not None else None
        tensors = b.arm.params
    ordered = {n: tensors[n] for n in _shapes(b)}
    return bundle.write_bundle(path, manifest, ordered)


def _shapes(b):
    if isinstance(b, CrossBundle):
        return dict(b.cross.spec.tensor_shapes(b.cross.query_dim + b.cross.member_dim))
    return dict(b.arm.spec.tensor_shapes())


def load_bundle(path):
    manifest, tensors = bundle.read_bundle(path)
    kind = manifest.get("kind")
    try:
        v = manifest["version"]
        version_id = int(v["id"])
        label = str(v.get("label", ""))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: manifest has no usable version") from exc
    if version_id == 0:
        raise FormatError(f"{path}: version_id 0 is reserved for 'unversioned'")
    try:
        version = ModelVersion(version_id, label)
        spec_dict = manifest["spec"]
        if kind == "cross":
            spec = CrossSpec.from_dict(spec_dict)
            qd, md = int(spec_dict["query_dim"]), int(spec_dict["member_dim"])
            bundle.check_tensor_shapes(path, tensors, spec.tensor_shapes(qd + md))
            return CrossBundle(version, Cross(spec, tensors, qd, md))
        if kind in ("query_arm", "member_arm"):
            spec = ArmSpec.from_dict(spec_dict)
            bundle.check_tensor_shapes(path, tensors, spec.tensor_shapes())
            vocab = Vocabulary.from_dict(manifest["vocab"]) if manifest.get("vocab") else None
            cls = QueryArmBundle if kind == "query_arm" else MemberArmBundle
            return cls(version, Arm(spec, tensors, vocab))
    except (KeyError, TypeError, InputError) as exc:
        raise FormatError(f"{path}: invalid manifest ({exc})") from exc
    raise FormatError(f"{path}: unknown bundle kind {kind!r}")


def save_split(bundles, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    names = ("query", "member", "cross")
    return {n: save_bundle(b, out_dir / n) for n, b in zip(names, bundles)}
