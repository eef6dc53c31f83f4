"""Query and member feature types plus the text-to-trigram rule.

Field ids are shared by both arms, the dictionary and the index:

====  ==========  ===========================================
id    name        tokens
====  ==========  ===========================================
0     text        character trigrams of free text
1     skill       facet / attribute tokens
2     title       title words
3     company
4     location
====  ==========  ===========================================
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

FIELD_TEXT = 0
FIELD_SKILL = 1
FIELD_TITLE = 2
FIELD_COMPANY = 3
FIELD_LOCATION = 4

FACET_FIELDS = {"skill": FIELD_SKILL, "title": FIELD_TITLE, "company": FIELD_COMPANY, "location": FIELD_LOCATION}
FIELD_NAMES = {FIELD_TEXT: "text", **{v: k for k, v in FACET_FIELDS.items()}}
ALL_FIELDS = (FIELD_TEXT, FIELD_SKILL, FIELD_TITLE, FIELD_COMPANY, FIELD_LOCATION)

# free-text words are matched against member titles by the term-match feature
TEXT_TERM_FIELD = FIELD_TITLE

_WORD_SPLIT = re.compile(r"[^0-9a-z]+")


def words(text: str) -> list[str]:
    return [w for w in _WORD_SPLIT.split(text.lower()) if w]


def word_trigrams(word: str) -> list[str]:
    marked = f"#{word}#"
    return [marked[i:i + 3] for i in range(len(marked) - 2)]


def text_trigrams(text: str) -> list[str]:
    return [t for w in words(text) for t in word_trigrams(w)]


def facet_field(name) -> int:
    if isinstance(name, int) or (isinstance(name, str) and name.isdigit()):
        return int(name)
    try:
        return FACET_FIELDS[name]
    except KeyError:
        raise KeyError(f"unknown facet {name!r}") from None


@dataclass
class QueryFeatures:
    trigrams: list[str] = field(default_factory=list)
    facets: dict[int, list[str]] = field(default_factory=dict)
    raw_terms: list[str] = field(default_factory=list)

    def model_inputs(self) -> dict[int, list[str]]:
        inputs = {FIELD_TEXT: list(self.trigrams)}
        for fid, toks in self.facets.items():
            inputs.setdefault(fid, []).extend(toks)
        return inputs

    def terms(self) -> list[tuple[int, str]]:
        """(field_id, token) pairs for retrieval and term matching, first occurrence order."""
        out = [(TEXT_TERM_FIELD, w) for w in self.raw_terms]
        for fid in sorted(self.facets):
            out += [(fid, t) for t in self.facets[fid]]
        return list(dict.fromkeys(out))

    def token_count(self) -> int:
        return sum(len(v) for v in self.model_inputs().values())


def parse_query(raw_text: str, facets=None) -> QueryFeatures:
    """Lowercase, split on non-alphanumerics, '#'-wrap each word into trigrams;
    facet selections pass through verbatim."""
    facet_map = {}
    for name, toks in (facets or {}).items():
        facet_map.setdefault(facet_field(name), []).extend(str(t) for t in toks)
    ws = words(raw_text or "")
    return QueryFeatures([t for w in ws for t in word_trigrams(w)], facet_map, ws)


@dataclass
class MemberProfile:
    uid: int
    fields: dict[int, list[str]] = field(default_factory=dict)

    def model_inputs(self) -> dict[int, list[str]]:
        return self.fields

    def to_json(self) -> dict:
        return {"uid": self.uid, "fields": {str(k): v for k, v in sorted(self.fields.items())}}

    @classmethod
    def from_json(cls, d) -> MemberProfile:
        return cls(int(d["uid"]), {int(k): [str(t) for t in v] for k, v in d.get("fields", {}).items()})
