"""Per-field token vocabularies mapping token strings to embedding rows."""
from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence

from .errors import InputError


class Vocabulary:
    """Ordered token list per field id.

    Unknown tokens are dropped by :meth:`encode`, which is the same
    skip-and-count policy the online dictionary applies to misses.
    """

    def __init__(self, tokens: Mapping[int, Sequence[str]]):
        self._tokens = {int(f): list(toks) for f, toks in tokens.items()}
        self._index = {}
        for f, toks in self._tokens.items():
            index = {}
            for i, tok in enumerate(toks):
                if tok in index:
                    raise InputError(f"duplicate token {tok!r} in field {f}")
                index[tok] = i
            self._index[f] = index

    @classmethod
    def from_iterables(cls, streams: Mapping[int, Iterable[str]]) -> Vocabulary:
        tokens = {}
        for f, stream in streams.items():
            seen = dict.fromkeys(stream)
            tokens[f] = sorted(seen)
        return cls(tokens)

    @property
    def field_ids(self) -> list[int]:
        return sorted(self._tokens)

    def size(self, field_id: int) -> int:
        return len(self._tokens[field_id])

    def tokens(self, field_id: int) -> list[str]:
        return self._tokens[field_id]

    def token_id(self, field_id: int, token: str) -> int | None:
        return self._index.get(field_id, {}).get(token)

    def encode(self, field_id: int, tokens: Iterable[str]) -> list[int]:
        index = self._index.get(field_id)
        if index is None:
            return []
        return [index[t] for t in tokens if t in index]

    def encode_inputs(self, inputs: Mapping[int, Sequence[str]], field_ids: Iterable[int]) -> dict[int, list[int]]:
        return {f: self.encode(f, inputs.get(f, ())) for f in field_ids}

    def to_dict(self) -> dict[str, list[str]]:
        return {str(f): toks for f, toks in sorted(self._tokens.items())}

    @classmethod
    def from_dict(cls, data: Mapping[str, Sequence[str]]) -> Vocabulary:
        return cls({int(f): toks for f, toks in data.items()})

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __repr__(self):
        sizes = ", ".join(f"{f}:{len(t)}" for f, t in sorted(self._tokens.items()))
        return f"Vocabulary({sizes})"
