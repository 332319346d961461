"""Typed encoding of template parameters.

Placeholder values extracted by the template miner are heterogeneous:
timestamps, user identities, measurements, status words, file paths.
Each (template, position) pair is assigned one of five types by a rule
cascade frozen over the training data, fitted with a per-type model, and
encoded into a fixed per-template numeric layout:

* time        -> cyclic sin/cos pair per calendar unit
* user id     -> 64-bit FNV-1a hash mapped into [0, 1)
* numeric     -> z-score against the training baseline
* state       -> one-hot position read as an MSB-first binary integer
* resource id -> TF-IDF over path tokens, L2-normalized

Positions that matter are picked by clustering position statistics and
keeping the clusters that carry most of the observed variance; the rest
are ignored both in encoding and at detection time.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (EmptyUser, LayoutMismatch, NotANumber, TooFewSamples,
                     UnknownUnit, UnseenState)
from .parser import ParsedLog, Template


class ParamType(str, Enum):
    TIME = "time"
    USER = "user"
    NUMERIC = "numeric"
    STATE = "state"
    RESOURCE = "resource"
    UNKNOWN = "unknown"


#: Rule-cascade order; earlier entries win classification ties.
CASCADE = [ParamType.TIME, ParamType.NUMERIC, ParamType.RESOURCE,
           ParamType.STATE, ParamType.USER, ParamType.UNKNOWN]

#: Strings treated as "no value" for user/state parameters.
EMPTY_MARKERS = frozenset({"", "-", "null", "(null)", "none", "nil", "?"})

#: Canonical calendar unit order used everywhere a unit list is stored.
UNIT_ORDER = ["year", "month", "day", "hour", "minute", "second", "millisecond"]

#: Inclusive value ranges for validity checking (year is unbounded).
UNIT_RANGES = {
    "month": (1, 12),
    "day": (1, 31),
    "hour": (0, 23),
    "minute": (0, 59),
    "second": (0, 59),
    "millisecond": (0, 999),
}


@dataclass
class TimeUnits:
    """Cycle length per calendar unit for the sin/cos encoding.

    Years have no natural cycle, so they wrap over a configurable period
    (default: one decade) to stay in line with the other units.
    """

    year_period: int = 10
    periods: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        defaults = {
            "month": 12, "day": 31, "hour": 24, "minute": 60,
            "second": 60, "millisecond": 1000,
        }
        merged = dict(defaults)
        merged["year"] = self.year_period
        merged.update(self.periods)
        self.periods = merged

    def period(self, unit: str) -> int:
        if unit not in self.periods:
            raise UnknownUnit(f"no cycle configured for unit {unit!r}")
        return self.periods[unit]


# --- timestamp parsing ---------------------------------------------------------

_TS_PATTERNS: list[tuple[str, re.Pattern]] = [
    ("iso_datetime", re.compile(
        r"(?P<year>\d{4})-(?P<month>\d{2})-(?P<day>\d{2})"
        r"T(?P<hour>\d{2}):(?P<minute>\d{2}):(?P<second>\d{2})"
        r"(?:[.,](?P<millisecond>\d{1,3}))?")),
    ("date_dash", re.compile(r"(?P<year>\d{4})-(?P<month>\d{2})-(?P<day>\d{2})")),
    ("date_slash", re.compile(r"(?P<year>\d{4})/(?P<month>\d{2})/(?P<day>\d{2})")),
    ("time_of_day", re.compile(
        r"(?P<hour>\d{2}):(?P<minute>\d{2}):(?P<second>\d{2})"
        r"(?:[.,](?P<millisecond>\d{1,3}))?")),
]


def parse_timestamp(raw: str) -> dict[str, int] | None:
    """Parse a single-token timestamp into calendar unit values.

    Returns a dict of unit -> integer for the first matching shape, or
    None when the token matches no known timestamp format.  Values are
    not range-checked here; see :func:`timestamp_in_range`.
    """
    for _, pattern in _TS_PATTERNS:
        m = pattern.fullmatch(raw)
        if m:
            return {
                unit: int(value)
                for unit, value in m.groupdict().items()
                if value is not None
            }
    return None


def timestamp_in_range(parts: dict[str, int]) -> bool:
    """True when every parsed unit sits inside its calendar range."""
    for unit, value in parts.items():
        bounds = UNIT_RANGES.get(unit)
        if bounds and not bounds[0] <= value <= bounds[1]:
            return False
    return True


def timestamp_sort_key(parts: dict[str, int]) -> tuple:
    """Total-order key over timestamps sharing the same unit set."""
    return tuple(parts.get(unit, 0) for unit in UNIT_ORDER)


def encode_time(value: float, unit: str, units: TimeUnits) -> tuple[float, float]:
    """Cyclic encoding of one unit value: (sin, cos) on its cycle.

    The encoding is periodic by construction: value and value + period
    map to the same point.
    """
    period = units.period(unit)
    angle = 2.0 * math.pi * value / period
    return (math.sin(angle), math.cos(angle))


def encode_timestamp(parts: dict[str, int], frozen_units: list[str],
                     units: TimeUnits) -> np.ndarray:
    """Fixed-width encoding over a frozen unit list (2 lanes per unit).

    Units absent from `parts` encode as value 0 so the width never varies.
    """
    out = np.zeros(2 * len(frozen_units))
    for i, unit in enumerate(frozen_units):
        s, c = encode_time(float(parts.get(unit, 0)), unit, units)
        out[2 * i] = s
        out[2 * i + 1] = c
    return out


# --- user identity -------------------------------------------------------------

_FNV64_OFFSET = 0xCBF29CE484222325
_FNV64_PRIME = 0x100000001B3
_U64 = 1 << 64


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of the UTF-8 encoding of `text`."""
    h = _FNV64_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV64_PRIME) % _U64
    return h


def encode_user(raw: str) -> float:
    """Deterministic user fingerprint in [0, 1): FNV-1a(u) / 2^64."""
    if raw == "":
        raise EmptyUser("cannot encode an empty user identity")
    return fnv1a64(raw) / _U64


def is_empty_marker(raw: str) -> bool:
    return raw.lower() in EMPTY_MARKERS


# --- numeric --------------------------------------------------------------------

_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")


def parse_number(raw: str) -> float:
    """Strictly parse a decimal number; NotANumber on anything else."""
    if not _NUMBER.fullmatch(raw):
        raise NotANumber(f"not a valid number: {raw!r}")
    value = float(raw)
    if not math.isfinite(value):
        raise NotANumber(f"non-finite number: {raw!r}")
    return value


@dataclass
class NumericBaseline:
    """Training statistics for one numeric position."""

    mean: float
    std: float
    vmin: float
    vmax: float
    count: int

    @classmethod
    def fit(cls, values: list[float]) -> "NumericBaseline":
        arr = np.asarray(values, dtype=np.float64)
        if arr.size == 0:
            return cls(0.0, 0.0, 0.0, 0.0, 0)
        return cls(float(arr.mean()), float(arr.std()), float(arr.min()),
                   float(arr.max()), int(arr.size))


def encode_numeric(value: float, baseline: NumericBaseline,
                   z_cap: float = 10.0, sigma_eps: float = 1e-9) -> float:
    """Z-score against the baseline.

    A degenerate baseline (zero spread) still has to distinguish "same as
    always" from "suddenly different": on-mean values encode as 0 and any
    other value as the sentinel `z_cap`.
    """
    if baseline.std < sigma_eps:
        return 0.0 if value == baseline.mean else z_cap
    return (value - baseline.mean) / baseline.std


# --- state ----------------------------------------------------------------------

#: Hard cap on registry size; positions beyond it stop being states.
STATE_REGISTRY_CAP = 30


@dataclass
class StateRegistry:
    """Frozen first-seen enumeration of a state position's values."""

    values: list[str]

    def __post_init__(self):
        self.index = {v: i for i, v in enumerate(self.values)}

    @classmethod
    def fit(cls, observed: list[str]) -> "StateRegistry":
        seen: dict[str, None] = {}
        for value in observed:
            seen.setdefault(value, None)
        return cls(list(seen))

    def __contains__(self, value: str) -> bool:
        return value in self.index

    def __len__(self) -> int:
        return len(self.values)


def encode_state(raw: str, registry: StateRegistry) -> float:
    """One-hot -> MSB-first binary -> integer, as a float.

    Entry i of a k-entry registry encodes as 2**(k-1-i), i.e. the one-hot
    vector read as a binary number with the first entry most significant.
    """
    if raw not in registry:
        raise UnseenState(f"state value {raw!r} not in registry")
    k = len(registry)
    if k > STATE_REGISTRY_CAP:
        raise UnseenState(f"registry size {k} exceeds cap {STATE_REGISTRY_CAP}")
    return float(2 ** (k - 1 - registry.index[raw]))


# --- resource -------------------------------------------------------------------

_RESOURCE_SEPARATORS = re.compile(r"[/\\?&=.:]+")
_RESOURCE_CHARSET = re.compile(r"[\w.\-~/\\:?&=+%@]+")
_URL_SCHEME = re.compile(r"[A-Za-z][\w+.-]*://\S+")
_IPV4_VALUE = re.compile(r"\d{1,3}(?:\.\d{1,3}){3}(?::\d+)?")


def tokenize_resource(raw: str) -> list[str]:
    """Split a path-like value on its structural separators."""
    return [t for t in _RESOURCE_SEPARATORS.split(raw) if t]


def is_well_formed_resource(raw: str) -> bool:
    """Grammar check for identification paths.

    A well-formed resource uses only path characters and carries some
    separator structure (directory separators, a URL scheme, dots, or an
    IPv4 shape).
    """
    if not raw or not _RESOURCE_CHARSET.fullmatch(raw):
        return False
    return ("/" in raw or "\\" in raw or ":" in raw or "." in raw)


class TfidfModel:
    """Hand-rolled TF-IDF over path tokens with a frozen vocabulary.

    idf uses the smoothed form ln((1 + N) / (1 + df)) + 1, which keeps
    every weight strictly positive, and vectors are L2-normalized.  The
    vocabulary keeps the `max_dim` most document-frequent tokens, with
    first-seen order breaking ties so fits are reproducible.
    """

    def __init__(self, vocab: list[str], idf: np.ndarray, n_docs: int):
        self.vocab = vocab
        self.index = {t: i for i, t in enumerate(vocab)}
        self.idf = np.asarray(idf, dtype=np.float64)
        self.n_docs = n_docs

    @property
    def dim(self) -> int:
        return len(self.vocab)

    @classmethod
    def fit(cls, documents: list[str], max_dim: int = 256) -> "TfidfModel":
        df: dict[str, int] = {}
        for doc in documents:
            for token in dict.fromkeys(tokenize_resource(doc)):
                df[token] = df.get(token, 0) + 1
        order = {t: i for i, t in enumerate(df)}
        ranked = sorted(df, key=lambda t: (-df[t], order[t]))[:max_dim]
        n = len(documents)
        idf = np.array([math.log((1 + n) / (1 + df[t])) + 1.0 for t in ranked])
        return cls(ranked, idf, n)

    def transform(self, raw: str) -> np.ndarray:
        """TF-IDF vector for one value; all-zero when every token is OOV."""
        vec = np.zeros(self.dim)
        for token in tokenize_resource(raw):
            idx = self.index.get(token)
            if idx is not None:
                vec[idx] += self.idf[idx]
        norm = float(np.linalg.norm(vec))
        if norm > 0.0:
            vec /= norm
        return vec

    def to_json(self) -> dict:
        return {
            "vocab": self.vocab,
            "idf": [float(x) for x in self.idf],
            "n_docs": self.n_docs,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "TfidfModel":
        return cls(list(payload["vocab"]), np.asarray(payload["idf"]),
                   int(payload["n_docs"]))


# --- classification -------------------------------------------------------------

_HEX_ID = re.compile(r"(?:0x)?[0-9a-f]{6,}", re.IGNORECASE)
_USER_MARKER = re.compile(
    r"(?:user|usr|uid|acct|account|client|cust|session|sess)[-_:=]?\w*",
    re.IGNORECASE)
_USER_SHORT = re.compile(r"u[-_]\w+|\w+[-_](?:id|uid|user)", re.IGNORECASE)


def classify_value(raw: str) -> ParamType | None:
    """String-level classification rules (everything except State).

    Returns None when no rule matches; position-level voting decides
    between State and Unknown for those.
    """
    if parse_timestamp(raw) is not None:
        return ParamType.TIME
    if _NUMBER.fullmatch(raw):
        return ParamType.NUMERIC
    if (_URL_SCHEME.fullmatch(raw) or _IPV4_VALUE.fullmatch(raw)
            or (("/" in raw or "\\" in raw) and _RESOURCE_CHARSET.fullmatch(raw))
            or ("." in raw and any(c.isalpha() for c in raw)
                and _RESOURCE_CHARSET.fullmatch(raw) and raw.count(".") >= 1
                and "/" not in raw and len(tokenize_resource(raw)) >= 2)):
        return ParamType.RESOURCE
    if (_HEX_ID.fullmatch(raw) and any(c.isdigit() for c in raw)) \
            or _USER_MARKER.fullmatch(raw) or _USER_SHORT.fullmatch(raw):
        return ParamType.USER
    return None


def vote_position_type(values: list[str], state_card_max: int = 16) -> ParamType:
    """Freeze one type for a position by majority over its training values.

    String-level rules vote first; when the plurality is not one of the
    value-shaped types (time / numeric / resource), a small closed value
    set makes the position a State, a user-ish plurality makes it a User,
    and anything else stays Unknown.  Ties break toward the earlier rule
    in the cascade.
    """
    tally: dict[ParamType, int] = {}
    for raw in values:
        label = classify_value(raw)
        key = label if label is not None else ParamType.UNKNOWN
        tally[key] = tally.get(key, 0) + 1
    if not tally:
        return ParamType.UNKNOWN
    winner = max(tally, key=lambda t: (tally[t], -CASCADE.index(t)))
    if winner in (ParamType.TIME, ParamType.NUMERIC, ParamType.RESOURCE):
        return winner
    distinct = len(set(values))
    if distinct <= state_card_max:
        return ParamType.STATE
    if winner is ParamType.USER:
        return ParamType.USER
    return ParamType.UNKNOWN


# --- fitted models ---------------------------------------------------------------


@dataclass
class ParamEncConfig:
    """Knobs for classification, fitting and key selection."""

    state_card_max: int = 16
    state_registry_cap: int = STATE_REGISTRY_CAP
    z_cap: float = 10.0
    sigma_eps: float = 1e-9
    tfidf_max_dim: int = 256
    year_period: int = 10
    key_min_samples: int = 5
    key_coverage: float = 0.9
    kmeans_k_min: int = 2
    kmeans_k_max: int = 5
    seed: int = 7

    def time_units(self) -> TimeUnits:
        return TimeUnits(year_period=self.year_period)


@dataclass
class PositionModel:
    """Frozen type and per-type statistics for one (template, position)."""

    template_id: int
    position: int
    ptype: ParamType
    count: int = 0
    distinct: int = 0
    variance: float = 0.0
    time_units: list[str] | None = None
    baseline: NumericBaseline | None = None
    registry: StateRegistry | None = None
    user_hist: dict[int, int] | None = None
    user_total: int = 0
    centroid: np.ndarray | None = None


@dataclass
class Slot:
    """One lane group in a template's parameter layout."""

    position: int
    ptype: ParamType
    offset: int
    width: int


@dataclass
class ParamVector:
    """Fixed-layout encoding of one entry's key parameters.

    `values` spans the template layout; `mask` holds one presence bit per
    slot, cleared when the slot's encoder could not produce a value.
    """

    values: np.ndarray
    mask: np.ndarray


class ParamModels:
    """Everything fitted over training parameters, frozen for detection."""

    def __init__(self, positions: dict[tuple[int, int], PositionModel],
                 tfidf: TfidfModel | None,
                 key_positions: dict[int, list[int]],
                 layouts: dict[int, list[Slot]],
                 config: ParamEncConfig):
        self.positions = positions
        self.tfidf = tfidf
        self.key_positions = key_positions
        self.layouts = layouts
        self.config = config
        self.units = config.time_units()
        self.width = max(
            (slots[-1].offset + slots[-1].width for slots in layouts.values() if slots),
            default=0)

    def position(self, template_id: int, position: int) -> PositionModel | None:
        return self.positions.get((template_id, position))

    def template_width(self, template_id: int) -> int:
        slots = self.layouts.get(template_id, [])
        if not slots:
            return 0
        return slots[-1].offset + slots[-1].width


def _value_scalar(raw: str, ptype: ParamType) -> float:
    """Scalar summary of a raw value, used only for variance features."""
    if ptype is ParamType.NUMERIC:
        try:
            return parse_number(raw)
        except NotANumber:
            return fnv1a64(raw) / _U64
    return fnv1a64(raw) / _U64


def _position_variance(values: list[str], ptype: ParamType) -> float:
    """Variance of min-max scaled value scalars; 0 for constant positions."""
    if len(values) < 2:
        return 0.0
    scalars = np.array([_value_scalar(v, ptype) for v in values])
    lo, hi = float(scalars.min()), float(scalars.max())
    if hi - lo <= 0.0:
        return 0.0
    scaled = (scalars - lo) / (hi - lo)
    return float(scaled.var())


_TYPE_CODE = {t: i for i, t in enumerate(CASCADE)}

#: Ordering of lanes inside a template layout: stable and type-grouped.
_LANE_ORDER = {ParamType.TIME: 0, ParamType.USER: 1, ParamType.NUMERIC: 2,
               ParamType.STATE: 3, ParamType.RESOURCE: 4}


def select_key_parameters(features: np.ndarray, variances: np.ndarray,
                          k_min: int = 2, k_max: int = 5,
                          coverage: float = 0.9, seed: int = 7) -> np.ndarray:
    """Cluster position features and keep the variance-heavy clusters.

    Positions are clustered with k-means for each k in [k_min, k_max]
    (bounded by n - 1); the k with the best silhouette wins.  Clusters
    are then ranked by mean member variance and consumed until the kept
    positions cover at least `coverage` of the total variance.  Returns a
    boolean keep-mask.  Raises :class:`TooFewSamples` when there are not
    enough positions to cluster.
    """
    from sklearn.cluster import KMeans
    from sklearn.metrics import silhouette_score

    n = features.shape[0]
    if n < 3:
        raise TooFewSamples(f"need at least 3 positions to cluster, got {n}")
    total = float(variances.sum())
    if total <= 0.0:
        return np.ones(n, dtype=bool)

    k_hi = min(k_max, n - 1)
    best_labels = None
    best_score = -np.inf
    for k in range(k_min, k_hi + 1):
        labels = KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(features)
        if len(set(labels.tolist())) < 2:
            continue
        score = float(silhouette_score(features, labels))
        if score > best_score:
            best_labels, best_score = labels, score
    if best_labels is None:
        raise TooFewSamples("clustering produced no valid partition")

    clusters = sorted(set(best_labels.tolist()))
    ranked = sorted(
        clusters,
        key=lambda c: (-float(variances[best_labels == c].mean()), c))
    keep = np.zeros(n, dtype=bool)
    covered = 0.0
    for cluster in ranked:
        members = best_labels == cluster
        keep |= members
        covered += float(variances[members].sum())
        if covered >= coverage * total:
            break
    return keep


def _build_layouts(positions: dict[tuple[int, int], PositionModel],
                   key_positions: dict[int, list[int]],
                   tfidf: TfidfModel | None) -> dict[int, list[Slot]]:
    """Deterministic fixed layouts: lanes grouped by type, then position."""
    layouts: dict[int, list[Slot]] = {}
    for tid in sorted(key_positions):
        slots: list[Slot] = []
        offset = 0
        chosen = sorted(
            key_positions[tid],
            key=lambda p: (_LANE_ORDER[positions[(tid, p)].ptype], p))
        for pos in chosen:
            model = positions[(tid, pos)]
            if model.ptype is ParamType.TIME:
                width = 2 * len(model.time_units or [])
            elif model.ptype is ParamType.RESOURCE:
                width = tfidf.dim if tfidf else 0
            else:
                width = 1
            if width == 0:
                continue
            slots.append(Slot(pos, model.ptype, offset, width))
            offset += width
        layouts[tid] = slots
    return layouts


def fit_param_models(records: list[ParsedLog],
                     config: ParamEncConfig | None = None) -> ParamModels:
    """Classify, fit and select key parameters over a parsed training stream."""
    config = config or ParamEncConfig()

    # Gather per-position raw values in stream order.
    values: dict[tuple[int, int], list[str]] = {}
    template_totals: dict[int, int] = {}
    for record in records:
        if not record.matched:
            continue
        template_totals[record.template_id] = template_totals.get(record.template_id, 0) + 1
        for pos, raw in enumerate(record.params):
            values.setdefault((record.template_id, pos), []).append(raw)

    # Freeze one type per position; fit its model.
    positions: dict[tuple[int, int], PositionModel] = {}
    resource_docs: list[str] = []
    resource_keys: list[tuple[int, int]] = []
    for key in sorted(values):
        observed = values[key]
        ptype = vote_position_type(observed, config.state_card_max)
        if ptype is ParamType.STATE:
            distinct_count = len(set(observed))
            if distinct_count > min(config.state_registry_cap, STATE_REGISTRY_CAP):
                ptype = ParamType.RESOURCE
        model = PositionModel(
            template_id=key[0], position=key[1], ptype=ptype,
            count=len(observed), distinct=len(set(observed)),
            variance=_position_variance(observed, ptype))

        if ptype is ParamType.TIME:
            unit_sets: dict[tuple[str, ...], int] = {}
            for raw in observed:
                parts = parse_timestamp(raw)
                if parts is not None:
                    unit_key = tuple(u for u in UNIT_ORDER if u in parts)
                    unit_sets[unit_key] = unit_sets.get(unit_key, 0) + 1
            if unit_sets:
                modal = max(unit_sets, key=lambda u: unit_sets[u])
                model.time_units = list(modal)
            else:
                model.time_units = []
        elif ptype is ParamType.NUMERIC:
            parsed = []
            for raw in observed:
                try:
                    parsed.append(parse_number(raw))
                except NotANumber:
                    continue
            model.baseline = NumericBaseline.fit(parsed)
        elif ptype is ParamType.STATE:
            model.registry = StateRegistry.fit(observed)
        elif ptype is ParamType.USER:
            hist: dict[int, int] = {}
            total = 0
            for raw in observed:
                if is_empty_marker(raw):
                    continue
                h = fnv1a64(raw)
                hist[h] = hist.get(h, 0) + 1
                total += 1
            model.user_hist = hist
            model.user_total = total
        elif ptype is ParamType.RESOURCE:
            resource_docs.extend(observed)
            resource_keys.append(key)
        positions[key] = model

    # One shared TF-IDF model; per-position centroids on top of it.
    tfidf: TfidfModel | None = None
    if resource_docs:
        tfidf = TfidfModel.fit(resource_docs, max_dim=config.tfidf_max_dim)
        for key in resource_keys:
            vecs = np.stack([tfidf.transform(raw) for raw in values[key]])
            centroid = vecs.mean(axis=0)
            norm = float(np.linalg.norm(centroid))
            positions[key].centroid = centroid / norm if norm > 0 else centroid

    # Key selection over eligible positions.
    ordered_keys = sorted(positions)
    eligible = [k for k in ordered_keys
                if positions[k].count >= config.key_min_samples]
    key_mask: dict[tuple[int, int], bool] = {k: True for k in ordered_keys}
    if len(eligible) >= 3:
        feats = np.array([
            [
                positions[k].variance,
                _TYPE_CODE[positions[k].ptype] / 5.0,
                positions[k].distinct / max(1, positions[k].count),
                positions[k].count / max(1, template_totals.get(k[0], 0)),
            ]
            for k in eligible
        ])
        variances = np.array([positions[k].variance for k in eligible])
        try:
            keep = select_key_parameters(
                feats, variances, k_min=config.kmeans_k_min,
                k_max=config.kmeans_k_max, coverage=config.key_coverage,
                seed=config.seed)
            for k, kept in zip(eligible, keep):
                key_mask[k] = bool(kept)
        except TooFewSamples:
            pass  # keep everything

    # Guarantee at least one key position per template that has any.
    key_positions: dict[int, list[int]] = {}
    by_template: dict[int, list[tuple[int, int]]] = {}
    for k in ordered_keys:
        by_template.setdefault(k[0], []).append(k)
    for tid, keys in by_template.items():
        kept = [k[1] for k in keys if key_mask[k]
                and positions[k].ptype is not ParamType.UNKNOWN]
        if not kept:
            candidates = [k for k in keys if positions[k].ptype is not ParamType.UNKNOWN]
            if candidates:
                best = max(candidates, key=lambda k: positions[k].variance)
                kept = [best[1]]
        key_positions[tid] = sorted(kept)

    # Templates seen in training without any placeholder still count as
    # fitted: they get an empty layout, distinct from "never trained on".
    for tid in template_totals:
        key_positions.setdefault(tid, [])

    layouts = _build_layouts(positions, key_positions, tfidf)
    return ParamModels(positions, tfidf, key_positions, layouts, config)


def encode_entry(record: ParsedLog, models: ParamModels) -> ParamVector | None:
    """Encode one entry's key parameters into its template's fixed layout.

    Returns None for templates without a fitted layout.  Slots whose
    encoder fails (unparseable time, unseen state, malformed number,
    empty user, all-OOV resource) zero-fill their lanes with the mask bit
    cleared; detection decides separately whether that is anomalous.
    """
    slots = models.layouts.get(record.template_id)
    if slots is None:
        return None
    width = models.template_width(record.template_id)
    vector = np.zeros(width)
    mask = np.zeros(len(slots), dtype=bool)
    for i, slot in enumerate(slots):
        if slot.position >= len(record.params):
            raise LayoutMismatch(
                f"template {record.template_id} slot at position {slot.position} "
                f"but record has {len(record.params)} params")
        raw = record.params[slot.position]
        model = models.positions[(record.template_id, slot.position)]
        lane = None
        if slot.ptype is ParamType.TIME:
            parts = parse_timestamp(raw)
            if parts is not None:
                lane = encode_timestamp(parts, model.time_units or [], models.units)
        elif slot.ptype is ParamType.USER:
            if not is_empty_marker(raw):
                lane = np.array([encode_user(raw)])
        elif slot.ptype is ParamType.NUMERIC:
            try:
                lane = np.array([
                    encode_numeric(parse_number(raw), model.baseline,
                                   models.config.z_cap, models.config.sigma_eps)])
            except NotANumber:
                lane = None
        elif slot.ptype is ParamType.STATE:
            try:
                lane = np.array([encode_state(raw, model.registry)])
            except UnseenState:
                lane = None
        elif slot.ptype is ParamType.RESOURCE:
            vec = models.tfidf.transform(raw) if models.tfidf else None
            if vec is not None and float(np.linalg.norm(vec)) > 0.0:
                lane = vec
        if lane is not None:
            if lane.shape[0] != slot.width:
                raise LayoutMismatch(
                    f"slot width {slot.width} but encoder produced {lane.shape[0]}")
            vector[slot.offset:slot.offset + slot.width] = lane
            mask[i] = True
    return ParamVector(vector, mask)


# --- persistence -----------------------------------------------------------------


def params_to_json(models: ParamModels) -> dict:
    """JSON-ready dump of every fitted parameter model."""
    out_positions = []
    for key in sorted(models.positions):
        m = models.positions[key]
        entry: dict = {
            "template_id": m.template_id,
            "position": m.position,
            "type": m.ptype.value,
            "count": m.count,
            "distinct": m.distinct,
            "variance": m.variance,
        }
        if m.time_units is not None:
            entry["time_units"] = m.time_units
        if m.baseline is not None:
            entry["baseline"] = {
                "mean": m.baseline.mean, "std": m.baseline.std,
                "min": m.baseline.vmin, "max": m.baseline.vmax,
                "count": m.baseline.count,
            }
        if m.registry is not None:
            entry["registry"] = m.registry.values
        if m.user_hist is not None:
            entry["user_hist"] = {str(h): c for h, c in sorted(m.user_hist.items())}
            entry["user_total"] = m.user_total
        if m.centroid is not None:
            entry["centroid"] = [float(x) for x in m.centroid]
        out_positions.append(entry)
    return {
        "positions": out_positions,
        "tfidf": models.tfidf.to_json() if models.tfidf else None,
        "key_positions": {str(t): p for t, p in sorted(models.key_positions.items())},
        "config": {
            "state_card_max": models.config.state_card_max,
            "state_registry_cap": models.config.state_registry_cap,
            "z_cap": models.config.z_cap,
            "sigma_eps": models.config.sigma_eps,
            "tfidf_max_dim": models.config.tfidf_max_dim,
            "year_period": models.config.year_period,
            "key_min_samples": models.config.key_min_samples,
            "key_coverage": models.config.key_coverage,
            "kmeans_k_min": models.config.kmeans_k_min,
            "kmeans_k_max": models.config.kmeans_k_max,
            "seed": models.config.seed,
        },
    }


def params_from_json(payload: dict) -> ParamModels:
    config = ParamEncConfig(**payload["config"])
    tfidf = TfidfModel.from_json(payload["tfidf"]) if payload.get("tfidf") else None
    positions: dict[tuple[int, int], PositionModel] = {}
    for entry in payload["positions"]:
        model = PositionModel(
            template_id=int(entry["template_id"]),
            position=int(entry["position"]),
            ptype=ParamType(entry["type"]),
            count=int(entry["count"]),
            distinct=int(entry["distinct"]),
            variance=float(entry["variance"]))
        if "time_units" in entry:
            model.time_units = list(entry["time_units"])
        if "baseline" in entry:
            b = entry["baseline"]
            model.baseline = NumericBaseline(
                float(b["mean"]), float(b["std"]), float(b["min"]),
                float(b["max"]), int(b["count"]))
        if "registry" in entry:
            model.registry = StateRegistry(list(entry["registry"]))
        if "user_hist" in entry:
            model.user_hist = {int(h): int(c) for h, c in entry["user_hist"].items()}
            model.user_total = int(entry.get("user_total", 0))
        if "centroid" in entry:
            model.centroid = np.asarray(entry["centroid"], dtype=np.float64)
        positions[(model.template_id, model.position)] = model
    key_positions = {int(t): list(p) for t, p in payload["key_positions"].items()}
    layouts = _build_layouts(positions, key_positions, tfidf)
    return ParamModels(positions, tfidf, key_positions, layouts, config)
