"""Online anomaly detection over a trained model.

The detector consumes a raw log stream one line at a time and emits
structured anomaly reports.  It never mutates trained state: matching
runs against a frozen copy of the trained template library, and lines
that match nothing are mined into a private scratch library that lives
only for the duration of the stream.

Each line follows one of three paths:

* **matched** — the line matches a trained template; it is
  sequence-checked against the model's next-entry prediction and its
  key parameters are buffered for windowed checks.
* **adopted** — the line matches no trained template, but its freshly
  mined template embeds close enough to a trained one; the line is
  processed as if it were that template (sharing its vector and, when
  the parameter counts line up, its parameter models).
* **novel** — nothing trained is similar; the line itself is reported
  as a sequence anomaly carrying the new template's text as evidence.

Sequence checks use a sliding window of the last `w` entry vectors and
ask the trained model for its top-g candidates for the next entry; an
actual template outside that candidate set is anomalous.  No sequence
verdicts are produced until the window has filled (warm-up).

Parameter checks run on tumbling per-template windows of `param_window`
entries.  A window closes when full; at end of stream, templates that
completed at least one full window flush their partial remainder so
tail entries are not silently dropped.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .embedding import cosine, nearest_template, template_vector
from .errors import ModelMissing, NoLiterals, NotANumber, ZeroVector
from .paramenc import (
    ParamType,
    encode_entry,
    is_empty_marker,
    is_well_formed_resource,
    fnv1a64,
    parse_number,
    parse_timestamp,
    timestamp_in_range,
    timestamp_sort_key,
)
from .parser import DrainParser, ParsedLog, RawLog
from .seqmodel import forward, top_candidates

KIND_SEQUENCE = "sequence"
KIND_PARAMETER = "parameter"

SUBKIND_TIME_FORMAT = "time_format"
SUBKIND_TIME_RANGE = "time_range"
SUBKIND_USER_EMPTY = "user_empty"
SUBKIND_USER_OUTLIER = "user_outlier"
SUBKIND_NUMERIC_INVALID = "numeric_invalid"
SUBKIND_NUMERIC_RANGE = "numeric_range"
SUBKIND_STATE_UNSEEN = "state_unseen"
SUBKIND_STATE_FLAPPING = "state_flapping"
SUBKIND_RESOURCE_PATH = "resource_path"
SUBKIND_RESOURCE_ASSOCIATION = "resource_association"

PARAMETER_SUBKINDS = (
    SUBKIND_TIME_FORMAT,
    SUBKIND_TIME_RANGE,
    SUBKIND_USER_EMPTY,
    SUBKIND_USER_OUTLIER,
    SUBKIND_NUMERIC_INVALID,
    SUBKIND_NUMERIC_RANGE,
    SUBKIND_STATE_UNSEEN,
    SUBKIND_STATE_FLAPPING,
    SUBKIND_RESOURCE_PATH,
    SUBKIND_RESOURCE_ASSOCIATION,
)


@dataclass
class DetectorConfig:
    """Detection-time knobs (training-time shape lives in the model)."""

    param_window: int = 100
    z_threshold: float = 3.0
    state_flip_ratio: float = 0.5
    resource_sim_floor: float = 0.3
    adopt_sim_floor: float = 0.5
    user_rare_freq: float = 0.01
    flush_partial: bool = True


@dataclass
class AnomalyReport:
    """One detected anomaly, attributed to a single input line."""

    line_no: int
    kind: str
    subkind: str | None
    template_id: int
    matched: bool
    evidence: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "line_no": self.line_no,
            "kind": self.kind,
            "subkind": self.subkind,
            "template_id": self.template_id,
            "matched": self.matched,
            "evidence": self.evidence,
        }


class Detector:
    """Streaming detector over a trained model.

    `model` must expose: `parser` (template library), `provider`
    (word embeddings), `template_vectors` (id -> vector),
    `param_models`, `weights`, `seq_config`, `class_of` (template id ->
    class index), `template_of_class` (class index -> template id), and
    `weighted_mean` (bool, template vector averaging mode).
    """

    def __init__(self, model, config: DetectorConfig | None = None):
        for attr in ("parser", "provider", "template_vectors", "param_models",
                     "weights", "seq_config", "class_of", "template_of_class"):
            if not hasattr(model, attr) or getattr(model, attr) is None:
                raise ModelMissing(f"model is missing {attr!r}")
        self.model = model
        self.cfg = config or DetectorConfig()
        self.frozen = model.parser.snapshot()
        self.scratch = DrainParser(
            sim_threshold=self.frozen.sim_threshold,
            depth=self.frozen.depth,
            max_children=self.frozen.max_children,
        )
        self.window: deque[np.ndarray] = deque(maxlen=model.seq_config.window)
        self.param_buffers: dict[int, list[ParsedLog]] = {}
        self.full_windows: dict[int, int] = {}
        #: scratch template id -> trained template id it was adopted as
        self.adopted_as: dict[int, int] = {}
        self.stats = {
            "lines": 0,
            "matched": 0,
            "unmatched_total": 0,
            "adopted": 0,
            "novel_reported": 0,
            "sequence_checked": 0,
            "sequence_anomalies": 0,
            "param_windows_closed": 0,
            "param_windows_flushed": 0,
        }
        params = model.param_models
        self._embed_dim = next(iter(model.template_vectors.values())).shape[0]
        self._param_width = params.width
        expected = self._embed_dim + self._param_width
        if model.seq_config.input_dim != expected:
            raise ModelMissing(
                f"model input width {model.seq_config.input_dim} != "
                f"embedding+parameters width {expected}")

    # --- per-line processing ---------------------------------------------------

    def process(self, raw: RawLog) -> list[AnomalyReport]:
        """Consume one line; return reports attributable right now."""
        self.stats["lines"] += 1
        reports: list[AnomalyReport] = []

        tokens = raw.body.split()
        matched = self.frozen.match_only(tokens)
        if matched is not None:
            template, _sim = matched
            parsed = ParsedLog(
                template_id=template.id,
                params=[tokens[i] for i in template.placeholder_positions()],
                line_no=raw.line_no,
                matched=True,
            )
            self.stats["matched"] += 1
            entry_vec = self._input_vector(template.id, parsed)
            reports += self._sequence_step(template.id, parsed, entry_vec)
            reports += self._buffer_params(template.id, parsed)
            return reports

        # Unmatched: mine into scratch, then adopt or report.
        self.stats["unmatched_total"] += 1
        disposition, trained_id, query_vec, evidence = self.handle_unmatched(raw)
        if disposition == "adopted":
            self.stats["adopted"] += 1
            scratch_template = evidence.pop("_scratch_template")
            body_tokens = raw.body.split()
            params = [body_tokens[i]
                      for i in scratch_template.placeholder_positions()]
            parsed = ParsedLog(
                template_id=trained_id,
                params=params,
                line_no=raw.line_no,
                matched=False,
            )
            entry_vec = self._input_vector(trained_id, parsed,
                                           aligned=evidence["params_aligned"])
            reports += self._sequence_step(trained_id, parsed, entry_vec)
            if evidence["params_aligned"]:
                reports += self._buffer_params(trained_id, parsed)
            return reports

        # Novel: report the line itself, keep its vector as window context.
        self.stats["novel_reported"] += 1
        reports.append(AnomalyReport(
            line_no=raw.line_no,
            kind=KIND_SEQUENCE,
            subkind=None,
            template_id=-1,
            matched=False,
            evidence=evidence,
        ))
        vec = np.zeros(self._embed_dim + self._param_width)
        if query_vec is not None:
            vec[:self._embed_dim] = query_vec
        self.window.append(vec)
        return reports

    def handle_unmatched(self, raw: RawLog):
        """Classify an unmatched line: adopt it or flag it as novel.

        Returns (disposition, trained_id, query_vector, evidence) where
        disposition is "adopted" or "novel".
        """
        parsed = self.scratch.parse_line(raw)
        scratch_template = self.scratch.get_template(parsed.template_id)
        try:
            query = template_vector(
                scratch_template, self.model.provider,
                weighted_mean=getattr(self.model, "weighted_mean", True),
                allow_unknown=True)
        except (NoLiterals, ZeroVector):
            return "novel", -1, None, {
                "reason": "novel_template",
                "detail": "no usable words",
                "template_text": scratch_template.render(),
            }
        nearest_id, sim = nearest_template(query, self.model.template_vectors)
        if sim >= self.cfg.adopt_sim_floor:
            trained = self.frozen.get_template(nearest_id)
            aligned = (len(scratch_template.placeholder_positions())
                       == len(trained.placeholder_positions()))
            self.adopted_as[parsed.template_id] = nearest_id
            return "adopted", nearest_id, query, {
                "adopted_from": scratch_template.render(),
                "similarity": round(sim, 6),
                "params_aligned": aligned,
                "_scratch_template": scratch_template,
            }
        return "novel", -1, query, {
            "reason": "novel_template",
            "template_text": scratch_template.render(),
            "nearest_template_id": nearest_id,
            "similarity": round(sim, 6),
        }

    # --- sequence path -----------------------------------------------------------

    def _input_vector(self, template_id: int, parsed: ParsedLog,
                      aligned: bool = True) -> np.ndarray:
        vec = np.zeros(self._embed_dim + self._param_width)
        vec[:self._embed_dim] = self.model.template_vectors[template_id]
        if aligned:
            encoded = encode_entry(parsed, self.model.param_models)
            if encoded is not None:
                vec[self._embed_dim:self._embed_dim + encoded.values.shape[0]] = \
                    encoded.values
        return vec

    def _sequence_step(self, template_id: int, parsed: ParsedLog,
                       entry_vec: np.ndarray) -> list[AnomalyReport]:
        """Check this entry against the window prediction, then add it."""
        reports: list[AnomalyReport] = []
        w = self.model.seq_config.window
        if len(self.window) == w:
            actual_class = self.model.class_of[template_id]
            anomalous, candidates, prob = self.detect_sequence(actual_class)
            self.stats["sequence_checked"] += 1
            if anomalous:
                self.stats["sequence_anomalies"] += 1
                reports.append(AnomalyReport(
                    line_no=parsed.line_no,
                    kind=KIND_SEQUENCE,
                    subkind=None,
                    template_id=template_id,
                    matched=parsed.matched,
                    evidence={
                        "reason": "unexpected_next",
                        "candidates": [self.model.template_of_class[c]
                                       for c in candidates],
                        "probability": round(prob, 6),
                    },
                ))
        self.window.append(entry_vec)
        return reports

    def detect_sequence(self, actual_class: int) -> tuple[bool, list[int], float]:
        """Is `actual_class` outside the model's top-g candidates?"""
        x = np.stack(self.window)
        probs = forward(self.model.weights, x)
        candidates = top_candidates(probs, self.model.seq_config.candidate_count)
        return (actual_class not in candidates, candidates,
                float(probs[actual_class]))

    # --- parameter path ----------------------------------------------------------

    def _buffer_params(self, template_id: int,
                       parsed: ParsedLog) -> list[AnomalyReport]:
        layout = self.model.param_models.layouts.get(template_id)
        if not layout:
            return []
        buf = self.param_buffers.setdefault(template_id, [])
        buf.append(parsed)
        if len(buf) < self.cfg.param_window:
            return []
        self.param_buffers[template_id] = []
        self.full_windows[template_id] = self.full_windows.get(template_id, 0) + 1
        self.stats["param_windows_closed"] += 1
        return self.detect_parameters(template_id, buf)

    def detect_parameters(self, template_id: int,
                          entries: list[ParsedLog]) -> list[AnomalyReport]:
        """Run every per-type check over one window of entries."""
        reports: list[AnomalyReport] = []
        models = self.model.param_models
        for slot in models.layouts.get(template_id, []):
            pm = models.position(template_id, slot.position)
            if pm is None:
                continue
            values = []
            for entry in entries:
                if slot.position < len(entry.params):
                    values.append((entry, entry.params[slot.position]))
            if pm.ptype == ParamType.TIME:
                reports += self._check_time(template_id, slot.position, values)
            elif pm.ptype == ParamType.USER:
                reports += self._check_user(template_id, pm, values)
            elif pm.ptype == ParamType.NUMERIC:
                reports += self._check_numeric(template_id, pm, values)
            elif pm.ptype == ParamType.STATE:
                reports += self._check_state(template_id, pm, values)
            elif pm.ptype == ParamType.RESOURCE:
                reports += self._check_resource(template_id, pm, values)
        return reports

    def _report(self, entry: ParsedLog, template_id: int, subkind: str,
                evidence: dict) -> AnomalyReport:
        return AnomalyReport(
            line_no=entry.line_no,
            kind=KIND_PARAMETER,
            subkind=subkind,
            template_id=template_id,
            matched=entry.matched,
            evidence=evidence,
        )

    def _check_time(self, tid: int, position: int, values) -> list[AnomalyReport]:
        reports = []
        previous: tuple | None = None
        previous_units: frozenset | None = None
        for entry, raw in values:
            parts = parse_timestamp(raw)
            if parts is None:
                reports.append(self._report(
                    entry, tid, SUBKIND_TIME_FORMAT,
                    {"value": raw, "position": position}))
                continue
            if not timestamp_in_range(parts):
                reports.append(self._report(
                    entry, tid, SUBKIND_TIME_RANGE,
                    {"value": raw, "reason": "out_of_range"}))
                continue
            key = timestamp_sort_key(parts)
            units = frozenset(parts)
            if previous is not None and units == previous_units and key < previous:
                reports.append(self._report(
                    entry, tid, SUBKIND_TIME_RANGE,
                    {"value": raw, "reason": "non_monotonic"}))
            previous, previous_units = key, units
        return reports

    def _check_user(self, tid: int, pm, values) -> list[AnomalyReport]:
        reports = []
        for entry, raw in values:
            if is_empty_marker(raw):
                reports.append(self._report(
                    entry, tid, SUBKIND_USER_EMPTY, {"value": raw}))
                continue
            if pm.user_total:
                count = (pm.user_hist or {}).get(fnv1a64(raw), 0)
                freq = count / pm.user_total
                if freq < self.cfg.user_rare_freq:
                    reports.append(self._report(
                        entry, tid, SUBKIND_USER_OUTLIER,
                        {"value": raw, "frequency": round(freq, 6)}))
        return reports

    def _check_numeric(self, tid: int, pm, values) -> list[AnomalyReport]:
        reports = []
        baseline = pm.baseline
        for entry, raw in values:
            try:
                value = parse_number(raw)
            except NotANumber:
                reports.append(self._report(
                    entry, tid, SUBKIND_NUMERIC_INVALID, {"value": raw}))
                continue
            if baseline is None:
                continue
            if baseline.std > 0:
                z = (value - baseline.mean) / baseline.std
            else:
                z = 0.0 if value == baseline.mean else float("inf")
            if abs(z) > self.cfg.z_threshold:
                reports.append(self._report(
                    entry, tid, SUBKIND_NUMERIC_RANGE,
                    {"value": raw, "zscore": round(min(abs(z), 1e9), 3)}))
        return reports

    def _check_state(self, tid: int, pm, values) -> list[AnomalyReport]:
        reports = []
        registry = pm.registry
        for entry, raw in values:
            if registry is not None and raw not in registry:
                reports.append(self._report(
                    entry, tid, SUBKIND_STATE_UNSEEN, {"value": raw}))
        flips = sum(1 for i in range(1, len(values))
                    if values[i][1] != values[i - 1][1])
        # Threshold scales with the actual entry count so flushed partial
        # windows are judged by the same flip *rate* as full ones.
        if flips > self.cfg.state_flip_ratio * min(len(values),
                                                   self.cfg.param_window):
            for i in range(1, len(values)):
                if values[i][1] != values[i - 1][1]:
                    entry, raw = values[i]
                    reports.append(self._report(
                        entry, tid, SUBKIND_STATE_FLAPPING,
                        {"value": raw, "flips_in_window": flips,
                         "window": len(values)}))
        return reports

    def _check_resource(self, tid: int, pm, values) -> list[AnomalyReport]:
        reports = []
        tfidf = self.model.param_models.tfidf
        for entry, raw in values:
            if not is_well_formed_resource(raw):
                reports.append(self._report(
                    entry, tid, SUBKIND_RESOURCE_PATH, {"value": raw}))
                continue
            if tfidf is None or pm.centroid is None:
                continue
            vec = tfidf.transform(raw)
            if not np.any(vec):
                reports.append(self._report(
                    entry, tid, SUBKIND_RESOURCE_ASSOCIATION,
                    {"value": raw, "reason": "unrecognized_vocabulary"}))
                continue
            sim = cosine(vec, pm.centroid)
            if sim < self.cfg.resource_sim_floor:
                reports.append(self._report(
                    entry, tid, SUBKIND_RESOURCE_ASSOCIATION,
                    {"value": raw, "similarity": round(sim, 6)}))
        return reports

    # --- end of stream -----------------------------------------------------------

    def finish(self) -> list[AnomalyReport]:
        """Flush partial parameter windows for templates with history."""
        reports: list[AnomalyReport] = []
        if not self.cfg.flush_partial:
            return reports
        for tid in sorted(self.param_buffers):
            buf = self.param_buffers[tid]
            if len(buf) >= 2 and self.full_windows.get(tid, 0) >= 1:
                self.stats["param_windows_flushed"] += 1
                reports += self.detect_parameters(tid, buf)
        self.param_buffers.clear()
        return reports


def stream_detect(raws, model,
                  config: DetectorConfig | None = None
                  ) -> tuple[list[AnomalyReport], dict]:
    """Detect over an iterable of raw lines; reports sorted by line."""
    detector = Detector(model, config)
    reports: list[AnomalyReport] = []
    for raw in raws:
        reports += detector.process(raw)
    reports += detector.finish()
    reports.sort(key=lambda r: (r.line_no,
                                0 if r.kind == KIND_SEQUENCE else 1,
                                r.subkind or ""))
    return reports, dict(detector.stats)
