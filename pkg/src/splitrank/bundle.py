"""On-disk bundle directories: ``manifest.json`` plus raw ``weights.bin``.

Tensors are concatenated in manifest order as little-endian float32.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

BUNDLE_FORMAT = "splitrank-bundle"
BUNDLE_FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


def write_bundle(path, manifest: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    with open(path / "weights.bin", "wb") as fh:
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=_DTYPE)
            entries.append({"name": name, "shape": list(arr.shape)})
            fh.write(arr.tobytes())
    full = {"format": BUNDLE_FORMAT, "format_version": BUNDLE_FORMAT_VERSION, **manifest, "tensors": entries}
    (path / "manifest.json").write_text(json.dumps(full, indent=1, sort_keys=False))
    return path


def read_bundle(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: missing manifest.json") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt manifest.json ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != BUNDLE_FORMAT:
        raise FormatError(f"{path}: not a {BUNDLE_FORMAT} manifest")
    if manifest.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    try:
        raw = (path / "weights.bin").read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: missing weights.bin") from exc

    tensors = {}
    offset = 0
    for entry in manifest.get("tensors", []):
        try:
            name = str(entry["name"])
            shape = tuple(int(d) for d in entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed tensor entry {entry!r}") from exc
        if any(d < 0 for d in shape):
            raise FormatError(f"{path}: tensor {name!r} has negative dimension")
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset + nbytes > len(raw):
            raise FormatError(
                f"{path}: weights.bin truncated inside tensor {name!r} "
                f"(need {offset + nbytes} bytes, have {len(raw)})"
            )
        tensors[name] = np.frombuffer(raw, dtype=_DTYPE, count=nbytes // 4, offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: weights.bin has {len(raw) - offset} trailing bytes")
    return manifest, tensors


def check_tensor_shapes(path, tensors: dict[str, np.ndarray], expected: list[tuple[str, tuple]]):
    """Raise FormatError naming the first tensor that disagrees with the spec."""
    names = [n for n, _ in expected]
    if list(tensors) != names:
        missing = [n for n in names if n not in tensors]
        extra = [n for n in tensors if n not in names]
        bad = (missing or extra or names)[0]
        raise FormatError(f"{path}: tensor set does not match spec (offending tensor {bad!r})")
    for name, shape in expected:
        if tensors[name].shape != tuple(shape):
            raise FormatError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, spec requires {tuple(shape)}")
