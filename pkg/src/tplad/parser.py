"""Online log template mining with a fixed-depth prefix tree.

Log lines are grouped into event templates: token sequences in which
positions that vary across lines hold the ``<*>`` placeholder.  Mining is
incremental.  Each incoming line is routed through a shallow prefix tree
keyed by token count and the first stable tokens, compared against the
templates in the matching leaves, and either merged into the most similar
template (widening disagreeing positions to placeholders) or minted as a
new template.

The tree descent masks numeric-looking tokens (pure digits, hex literals,
IPv4 addresses) so that lines differing only in such tokens land in the
same leaf, but stored templates keep the original literals until a merge
actually observes disagreement.
"""

from __future__ import annotations

import copy
import itertools
import json
import re
from dataclasses import dataclass, field

from .errors import EmptyLine, LengthMismatch

PLACEHOLDER = "<*>"

#: Branch key used for positions that cannot be keyed by a stable literal.
WILDCARD = "<*>"

LIBRARY_VERSION = 1

_PURE_DIGITS = re.compile(r"\d+")
_IPV4 = re.compile(r"\d{1,3}(?:\.\d{1,3}){3}(?::\d+)?")
_HEX_CHARS = frozenset("0123456789abcdefABCDEF")
#: digit-led tokens built from digits and date/time punctuation, e.g.
#: "2024-03-01T00:00:12", "12:30:01.250", "03/01", "1.2.3"
_DATEISH = re.compile(r"\d[\dTZ:+.,/\-]*")


def looks_numeric(token: str) -> bool:
    """True for tokens that should not be used as branch keys.

    Covers pure digit runs, hex literals (any 0x-prefixed run, or a bare
    run of at least four hex characters containing a digit — the digit
    rule keeps ordinary words like "deadbeef" literal), dotted IPv4
    addresses with an optional port suffix, and digit-led date/time-shaped
    tokens.
    """
    if _PURE_DIGITS.fullmatch(token):
        return True
    if _IPV4.fullmatch(token):
        return True
    if _DATEISH.fullmatch(token):
        return True
    if token[:2].lower() == "0x":
        body = token[2:]
        return bool(body) and all(c in _HEX_CHARS for c in body)
    if len(token) >= 4 and all(c in _HEX_CHARS for c in token):
        return any(c.isdigit() for c in token)
    return False


def tokenize(body: str) -> list[str]:
    """Split a log line into whitespace-delimited tokens.

    Punctuation stays attached to its token; consecutive whitespace is
    collapsed.  Raises :class:`EmptyLine` for blank input.
    """
    tokens = body.split()
    if not tokens:
        raise EmptyLine("log line contains no tokens")
    return tokens


def seq_similarity(tokens: list[str], template_tokens: list[str]) -> float:
    """Fraction of positions where the line is compatible with the template.

    A position matches when the template holds a placeholder or the exact
    literal.  Sequences of different lengths never match and raise
    :class:`LengthMismatch`.
    """
    if len(tokens) != len(template_tokens):
        raise LengthMismatch(
            f"cannot compare {len(tokens)} tokens against {len(template_tokens)}"
        )
    if not tokens:
        raise EmptyLine("cannot compare empty token sequences")
    hits = 0
    for tok, ttok in zip(tokens, template_tokens):
        if ttok == PLACEHOLDER or tok == ttok:
            hits += 1
    return hits / len(tokens)


@dataclass
class RawLog:
    """One input line: a 1-based line number and the raw text body."""

    line_no: int
    body: str
    timestamp_text: str | None = None


@dataclass
class Template:
    """A mined event template.

    ``tokens`` is the literal/placeholder sequence; ``support_count`` is
    the number of lines that matched (or minted) the template.
    """

    id: int
    tokens: list[str]
    support_count: int = 1

    def placeholder_positions(self) -> list[int]:
        return [i for i, t in enumerate(self.tokens) if t == PLACEHOLDER]

    def literal_tokens(self) -> list[str]:
        return [t for t in self.tokens if t != PLACEHOLDER]

    def render(self) -> str:
        return " ".join(self.tokens)


@dataclass
class ParsedLog:
    """The result of matching one line against the template library."""

    template_id: int
    params: list[str]
    line_no: int
    matched: bool = True
    similarity: float = 1.0


def extract_params(tokens: list[str], template: Template) -> list[str]:
    """Collect the tokens sitting at the template's placeholder positions."""
    if len(tokens) != len(template.tokens):
        raise LengthMismatch(
            f"line has {len(tokens)} tokens, template {template.id} has "
            f"{len(template.tokens)}"
        )
    return [tokens[i] for i in template.placeholder_positions()]


def _branch_keys(tokens: list[str], levels: int) -> tuple[str, ...]:
    """Compute the per-level branch keys for a token sequence.

    Each level consumes the next "stable" token: masked (numeric-looking)
    literals are skipped, a placeholder yields the wildcard key, and the
    first non-masked literal yields itself.  Missing levels pad with the
    wildcard so short or fully-variable sequences still get a bucket.
    """
    keys: list[str] = []
    pos = 0
    for _ in range(levels):
        key = WILDCARD
        while pos < len(tokens):
            tok = tokens[pos]
            pos += 1
            if tok == PLACEHOLDER:
                break
            if looks_numeric(tok):
                continue
            key = tok
            break
        keys.append(key)
    return tuple(keys)


class DrainParser:
    """Incremental template miner over a fixed-depth prefix tree.

    Parameters
    ----------
    sim_threshold:
        Minimum :func:`seq_similarity` for a line to merge into an
        existing template.  Below it, a new template is minted.
    depth:
        Total tree depth counting the root, the token-count level and the
        leaf level; ``depth - 3`` levels branch on stable tokens.
    max_children:
        Maximum distinct literal branch keys per level; overflow lines are
        routed through the wildcard key instead.
    """

    def __init__(self, sim_threshold: float = 0.5, depth: int = 4,
                 max_children: int = 100):
        if not 0.0 < sim_threshold <= 1.0:
            raise ValueError("sim_threshold must be in (0, 1]")
        if depth < 3:
            raise ValueError("depth must be at least 3")
        if max_children < 1:
            raise ValueError("max_children must be positive")
        self.sim_threshold = sim_threshold
        self.depth = depth
        self.max_children = max_children
        self._levels = depth - 3
        self._templates: dict[int, Template] = {}
        self._buckets: dict[tuple, list[int]] = {}
        self._template_bucket: dict[int, tuple] = {}
        self._next_id = 1

    # -- bucket management ----------------------------------------------------

    def _bucket_key(self, token_count: int, tokens: list[str]) -> tuple:
        keys = _branch_keys(tokens, self._levels)
        capped: list[str] = []
        for level, key in enumerate(keys):
            if key != WILDCARD and not self._level_has_room(token_count, tuple(capped), key):
                key = WILDCARD
            capped.append(key)
        return (token_count, *capped)

    def _level_has_room(self, token_count: int, prefix: tuple, key: str) -> bool:
        """True if `key` exists at this level or the level is under the cap."""
        level = len(prefix)
        seen: set[str] = set()
        for bucket in self._buckets:
            if bucket[0] != token_count or bucket[1:1 + level] != prefix:
                continue
            candidate = bucket[1 + level]
            if candidate == key:
                return True
            if candidate != WILDCARD:
                seen.add(candidate)
        return len(seen) < self.max_children

    def _candidate_ids(self, token_count: int, tokens: list[str]) -> list[int]:
        """Template ids reachable from this line's bucket or wildcard buckets."""
        keys = _branch_keys(tokens, self._levels)
        ids: list[int] = []
        seen: set[int] = set()
        for combo in itertools.product(*(
            (key, WILDCARD) if key != WILDCARD else (WILDCARD,) for key in keys
        )):
            bucket = self._buckets.get((token_count, *combo))
            if not bucket:
                continue
            for tid in bucket:
                if tid not in seen:
                    seen.add(tid)
                    ids.append(tid)
        return ids

    def _insert_bucket(self, template: Template) -> None:
        key = self._bucket_key(len(template.tokens), template.tokens)
        self._buckets.setdefault(key, []).append(template.id)
        self._template_bucket[template.id] = key

    def _remove_bucket(self, template: Template) -> None:
        key = self._template_bucket.pop(template.id, None)
        bucket = self._buckets.get(key)
        if bucket and template.id in bucket:
            bucket.remove(template.id)
            if not bucket:
                del self._buckets[key]

    # -- public surface ---------------------------------------------------------

    @property
    def templates(self) -> list[Template]:
        return [self._templates[tid] for tid in sorted(self._templates)]

    def get_template(self, template_id: int) -> Template | None:
        return self._templates.get(template_id)

    def find_best(self, tokens: list[str]) -> tuple[Template, float] | None:
        """Best-scoring template for `tokens`, or None if no candidate exists.

        Ties on similarity resolve to the smallest (first-seen) template id.
        """
        best: Template | None = None
        best_sim = -1.0
        for tid in sorted(self._candidate_ids(len(tokens), tokens)):
            template = self._templates[tid]
            sim = seq_similarity(tokens, template.tokens)
            if sim > best_sim:
                best, best_sim = template, sim
        if best is None:
            return None
        return best, best_sim

    def match_only(self, tokens: list[str]) -> tuple[Template, float] | None:
        """Match without mutating the library; None when below threshold."""
        found = self.find_best(tokens)
        if found is None or found[1] < self.sim_threshold:
            return None
        return found

    def parse_line(self, raw: RawLog) -> ParsedLog:
        """Match or mint a template for one line and extract its parameters."""
        tokens = tokenize(raw.body)
        found = self.find_best(tokens)
        if found is not None and found[1] >= self.sim_threshold:
            template, sim = found
            merged = self._merge(template, tokens)
            if merged:
                template.support_count += 1
                params = extract_params(tokens, template)
                return ParsedLog(template.id, params, raw.line_no,
                                 matched=True, similarity=sim)
        template = self._mint(tokens)
        return ParsedLog(template.id, extract_params(tokens, template),
                         raw.line_no, matched=True, similarity=1.0)

    def _merge(self, template: Template, tokens: list[str]) -> bool:
        """Widen `template` to cover `tokens`; False if that would erase it.

        A merge that would turn every position into a placeholder is
        rejected so each template keeps at least one literal.
        """
        new_tokens = [
            ttok if (ttok == PLACEHOLDER or ttok == tok) else PLACEHOLDER
            for tok, ttok in zip(tokens, template.tokens)
        ]
        if all(t == PLACEHOLDER for t in new_tokens):
            return False
        if new_tokens != template.tokens:
            old_key = self._template_bucket[template.id]
            template.tokens = new_tokens
            if self._bucket_key(len(new_tokens), new_tokens) != old_key:
                self._remove_bucket(template)
                self._insert_bucket(template)
        return True

    def _mint(self, tokens: list[str]) -> Template:
        template = Template(id=self._next_id, tokens=list(tokens), support_count=1)
        self._next_id += 1
        self._templates[template.id] = template
        self._insert_bucket(template)
        return template

    def snapshot(self) -> "DrainParser":
        """Deep copy, used so online detection never mutates trained state."""
        return copy.deepcopy(self)

    @property
    def max_template_id(self) -> int:
        return self._next_id - 1

    # -- persistence ------------------------------------------------------------

    def to_json(self) -> dict:
        """Template library as a JSON-ready dict.

        Tokens serialize as ``{"lit": word}`` for literals and ``"*"`` for
        placeholders.  The tree itself is not stored; it is rebuilt
        deterministically on load by re-inserting templates in id order.
        """
        return {
            "version": LIBRARY_VERSION,
            "sim_threshold": self.sim_threshold,
            "depth": self.depth,
            "max_children": self.max_children,
            "next_id": self._next_id,
            "templates": [
                {
                    "id": t.id,
                    "tokens": [
                        "*" if tok == PLACEHOLDER else {"lit": tok}
                        for tok in t.tokens
                    ],
                    "support": t.support_count,
                }
                for t in self.templates
            ],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "DrainParser":
        version = payload.get("version")
        if version != LIBRARY_VERSION:
            from .errors import VersionError
            raise VersionError(f"unsupported template library version: {version!r}")
        parser = cls(
            sim_threshold=payload.get("sim_threshold", 0.5),
            depth=payload.get("depth", 4),
            max_children=payload.get("max_children", 100),
        )
        for entry in payload["templates"]:
            tokens = [
                PLACEHOLDER if tok == "*" else tok["lit"]
                for tok in entry["tokens"]
            ]
            template = Template(id=int(entry["id"]), tokens=tokens,
                                support_count=int(entry["support"]))
            parser._templates[template.id] = template
            parser._insert_bucket(template)
        parser._next_id = int(payload.get(
            "next_id", 1 + max(parser._templates, default=0)))
        return parser

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "DrainParser":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def parse_stream(parser: DrainParser, raws: "list[RawLog]") -> list[ParsedLog]:
    """Feed lines through the miner in order, returning one record per line."""
    return [parser.parse_line(raw) for raw in raws]


def reextract(parser: DrainParser, raws: "list[RawLog]") -> list[ParsedLog]:
    """Match lines against a frozen library without mutating it.

    Used after mining so every record's parameters align with the final
    placeholder structure of its template.  Lines that no template accepts
    come back with ``matched=False`` and ``template_id=-1``.
    """
    records: list[ParsedLog] = []
    for raw in raws:
        tokens = tokenize(raw.body)
        found = parser.match_only(tokens)
        if found is None:
            records.append(ParsedLog(-1, [], raw.line_no, matched=False,
                                     similarity=0.0))
        else:
            template, sim = found
            records.append(ParsedLog(template.id, extract_params(tokens, template),
                                     raw.line_no, matched=True, similarity=sim))
    return records
