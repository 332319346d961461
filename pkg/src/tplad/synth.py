"""Deterministic synthetic log corpus generation.

A manifest describes a small "system": templates with typed value slots,
a Markov process over the templates, an advancing clock, and an
injection plan.  Generation is a pure function of (manifest, seed): the
same inputs always produce byte-identical corpora, which makes the
corpora usable as regression fixtures without shipping megabytes of
text.

Anomalies are injected only after a configurable fraction of the stream
so that prefix-training experiments see clean data, and every injected
line is recorded in a ground-truth sidecar with its anomaly subkind.
Optionally a share of late lines is rewritten into "holdout" template
variants that never occur earlier — simulating a software update that
introduces new-but-benign templates.
"""

from __future__ import annotations

import datetime
import json
import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import ManifestError

_SLOT_REF = re.compile(r"\{([a-zA-Z_][\w]*)\}")

#: Injection subkinds that corrupt a slot value, keyed by the slot kind
#: they need.
_PARAM_SUBKINDS = {
    "time_format": "time",
    "time_range": "time",
    "user_empty": "user",
    "user_outlier": "user",
    "numeric_invalid": "numeric",
    "numeric_range": "numeric",
    "state_unseen": "state",
    "resource_path": "resource",
    "resource_association": "resource",
}


@dataclass
class SynthResult:
    """Generated corpus plus its line-level ground truth."""

    lines: list[str]
    truth: list[dict]
    stats: dict

    def write(self, outdir: str) -> None:
        os.makedirs(outdir, exist_ok=True)
        with open(os.path.join(outdir, "corpus.log"), "w", encoding="utf-8") as fh:
            for line in self.lines:
                fh.write(line + "\n")
        with open(os.path.join(outdir, "truth.jsonl"), "w", encoding="utf-8") as fh:
            for row in self.truth:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        with open(os.path.join(outdir, "meta.json"), "w", encoding="utf-8") as fh:
            json.dump(self.stats, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_manifest(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: dict) -> None:
    """Sanity-check a manifest; raises :class:`ManifestError` with context."""
    for field in ("lines", "slot_defs", "templates", "process"):
        if field not in manifest:
            raise ManifestError(f"manifest missing required field {field!r}")
    if int(manifest["lines"]) < 10:
        raise ManifestError("manifest must request at least 10 lines")
    names = set()
    slot_defs = manifest["slot_defs"]
    for slot, spec in slot_defs.items():
        kind = spec.get("kind")
        if kind not in ("time", "user", "numeric", "state", "resource"):
            raise ManifestError(f"slot {slot!r} has unknown kind {kind!r}")
        if kind == "state" and len(spec.get("values", [])) < 2:
            raise ManifestError(f"state slot {slot!r} needs at least 2 values")
        if kind == "resource" and not spec.get("pool"):
            raise ManifestError(f"resource slot {slot!r} needs a value pool")
    for template in manifest["templates"]:
        name = template.get("name")
        if not name or name in names:
            raise ManifestError(f"duplicate or missing template name {name!r}")
        names.add(name)
        for ref in _SLOT_REF.findall(template.get("text", "")):
            if ref not in slot_defs:
                raise ManifestError(
                    f"template {name!r} references unknown slot {ref!r}")
    process = manifest["process"]
    if process.get("start") not in names:
        raise ManifestError("process.start is not a known template")
    for source, edges in process.get("transitions", {}).items():
        if source not in names:
            raise ManifestError(f"transition source {source!r} unknown")
        total = 0.0
        for target, prob in edges:
            if target not in names:
                raise ManifestError(f"transition target {target!r} unknown")
            total += float(prob)
        if abs(total - 1.0) > 1e-6:
            raise ManifestError(
                f"transitions from {source!r} sum to {total}, expected 1.0")
    for variant in manifest.get("holdout", {}).get("variants", []):
        if variant.get("of") not in names:
            raise ManifestError(
                f"holdout variant rewrites unknown template {variant.get('of')!r}")
        for ref in _SLOT_REF.findall(variant.get("text", "")):
            if ref not in slot_defs:
                raise ManifestError(
                    f"holdout variant references unknown slot {ref!r}")


class _SlotSampler:
    """Draws normal values for every slot kind, with sticky state chains."""

    def __init__(self, slot_defs: dict, rng: np.random.Generator):
        self.defs = slot_defs
        self.rng = rng
        self.state_now: dict[str, str] = {}
        for slot, spec in slot_defs.items():
            if spec["kind"] == "state":
                self.state_now[slot] = spec["values"][0]

    def user_pool(self, slot: str) -> list[str]:
        spec = self.defs[slot]
        prefix = spec.get("prefix", "uid_")
        return [f"{prefix}{i:04d}" for i in range(int(spec.get("pool", 40)))]

    def sample(self, slot: str, clock: datetime.datetime) -> str:
        spec = self.defs[slot]
        kind = spec["kind"]
        if kind == "time":
            return clock.strftime("%Y-%m-%dT%H:%M:%S")
        if kind == "user":
            pool = self.user_pool(slot)
            return pool[int(self.rng.integers(0, len(pool)))]
        if kind == "numeric":
            mean = float(spec.get("mean", 0.0))
            sigma = float(spec.get("sigma", 1.0))
            clip = float(spec.get("clip_sigma", 2.5))
            value = float(self.rng.normal(mean, sigma))
            value = min(max(value, mean - clip * sigma), mean + clip * sigma)
            digits = int(spec.get("round", 0))
            return f"{value:.{digits}f}" if digits > 0 else str(int(round(value)))
        if kind == "state":
            values = spec["values"]
            stay = float(spec.get("stay", 0.85))
            current = self.state_now[slot]
            if self.rng.random() >= stay:
                others = [v for v in values if v != current]
                current = others[int(self.rng.integers(0, len(others)))]
                self.state_now[slot] = current
            return current
        if kind == "resource":
            pool = spec["pool"]
            return pool[int(self.rng.integers(0, len(pool)))]
        raise ManifestError(f"slot {slot!r} has unknown kind {kind!r}")

    def corrupt(self, slot: str, subkind: str, serial: int) -> str:
        """A value violating the slot's normal behaviour for `subkind`."""
        spec = self.defs[slot]
        if subkind == "time_format":
            return "when-exactly"
        if subkind == "time_range":
            return "2024-13-40T25:61:61"
        if subkind == "user_empty":
            return "null"
        if subkind == "user_outlier":
            return f"{spec.get('prefix', 'uid_')}ghost{serial:03d}"
        if subkind == "numeric_invalid":
            return "unreadable"
        if subkind == "numeric_range":
            mean = float(spec.get("mean", 0.0))
            sigma = float(spec.get("sigma", 1.0))
            digits = int(spec.get("round", 0))
            value = mean + 8.0 * max(sigma, 1e-6)
            return f"{value:.{digits}f}" if digits > 0 else str(int(round(value)))
        if subkind == "state_unseen":
            return "GLITCHED"
        if subkind == "resource_path":
            return "##corrupt@@path!!"
        if subkind == "resource_association":
            return "/zzzalien/qqforeign/artifact.xbin"
        raise ManifestError(f"unknown corruption subkind {subkind!r}")


def _template_slots(text: str) -> list[str]:
    return _SLOT_REF.findall(text)


def generate(manifest: dict, seed: int = 7) -> SynthResult:
    """Generate a corpus from a validated manifest, deterministically."""
    validate_manifest(manifest)
    rng = np.random.default_rng(seed)
    n = int(manifest["lines"])
    texts = {t["name"]: t["text"] for t in manifest["templates"]}
    slots_of = {name: _template_slots(text) for name, text in texts.items()}
    kinds_of = {
        name: [manifest["slot_defs"][s]["kind"] for s in slots]
        for name, slots in slots_of.items()
    }
    transitions = {
        source: ([t for t, _ in edges], np.array([p for _, p in edges]))
        for source, edges in manifest["process"].get("transitions", {}).items()
    }
    all_names = sorted(texts)

    # 1. Markov schedule over template names.
    schedule: list[str] = []
    current = manifest["process"]["start"]
    for _ in range(n):
        schedule.append(current)
        targets, probs = transitions.get(current, (all_names, None))
        if probs is None:
            current = targets[int(rng.integers(0, len(targets)))]
        else:
            current = targets[int(rng.choice(len(targets), p=probs / probs.sum()))]

    # 2. Holdout variants replace their parent template late in the stream.
    holdout = manifest.get("holdout", {})
    variant_of: dict[str, tuple[str, str]] = {}
    for variant in holdout.get("variants", []):
        variant_of[variant["of"]] = (variant["of"] + "__variant", variant["text"])
    holdout_start = int(float(holdout.get("start_fraction", 1.0)) * n)
    holdout_rate = float(holdout.get("rate", 0.0))
    holdout_lines: set[int] = set()
    final: list[tuple[str, str]] = []  # (effective name, text)
    for i, name in enumerate(schedule):
        if (i >= holdout_start and name in variant_of
                and rng.random() < holdout_rate):
            vname, vtext = variant_of[name]
            final.append((vname, vtext))
            holdout_lines.add(i)
        else:
            final.append((name, texts[name]))

    # 3. Injection plan.
    injections = manifest.get("injections", {})
    counts = dict(injections.get("counts", {}))
    inj_start = int(float(injections.get("start_fraction", 1.0)) * n)
    inj_start += int(injections.get("margin_lines", 0))
    used: set[int] = set(holdout_lines)
    plan: dict[int, tuple[str, str | None]] = {}  # line -> (subkind, slot or foreign name)

    def eligible_lines(kind_needed: str | None) -> list[int]:
        out = []
        for i in range(inj_start, n):
            if i in used:
                continue
            if kind_needed is None or kind_needed in kinds_of[final[i][0].removesuffix("__variant")]:
                out.append(i)
        return out

    # 3a. Sequence anomalies: replace the scheduled template with one that
    # can never follow the previous entry.  Replaced lines must not touch,
    # otherwise one replacement changes the context the neighbouring
    # replacement's foreignness was computed against.
    seq_lines: set[int] = set()
    for _ in range(int(counts.pop("sequence", 0))):
        candidates = [i for i in eligible_lines(None)
                      if i > 0 and i - 1 not in seq_lines
                      and i + 1 not in seq_lines]
        if not candidates:
            break
        i = candidates[int(rng.integers(0, len(candidates)))]
        prev_name = final[i - 1][0].removesuffix("__variant")
        succ = set(transitions.get(prev_name, (all_names, None))[0])
        foreign = [t for t in all_names if t not in succ and t != final[i][0]]
        if not foreign:
            continue
        pick = foreign[int(rng.integers(0, len(foreign)))]
        plan[i] = ("sequence", pick)
        used.add(i)
        seq_lines.add(i)

    # 3b. State flapping: force a run of template occurrences to alternate.
    flap = counts.pop("state_flapping", None)
    flap_lines: list[int] = []
    if flap:
        length = int(flap.get("length", 40))
        state_templates = sorted(
            name for name in texts
            if "state" in kinds_of[name])
        best: list[int] = []
        best_name = None
        for name in state_templates:
            occurrences = [i for i in range(inj_start, n)
                           if final[i][0].removesuffix("__variant") == name
                           and i not in used]
            if len(occurrences) > len(best):
                best, best_name = occurrences, name
        if best_name is not None and len(best) >= 4:
            run = best[:length]
            slot = next(s for s in slots_of[best_name]
                        if manifest["slot_defs"][s]["kind"] == "state")
            spec = manifest["slot_defs"][slot]
            for j, i in enumerate(run):
                forced = spec["values"][j % 2]
                plan[i] = ("state_flapping", f"{slot}={forced}")
                used.add(i)
                flap_lines.append(i)

    # 3c. Per-slot corruptions.
    serial = 0
    for subkind in sorted(counts):
        needed = _PARAM_SUBKINDS.get(subkind)
        if needed is None:
            raise ManifestError(f"unknown injection subkind {subkind!r}")
        for _ in range(int(counts[subkind])):
            candidates = eligible_lines(needed)
            if not candidates:
                break
            i = candidates[int(rng.integers(0, len(candidates)))]
            base = final[i][0].removesuffix("__variant")
            slot = next(s for s in slots_of[base]
                        if manifest["slot_defs"][s]["kind"] == needed)
            serial += 1
            plan[i] = (subkind, f"{slot}|{serial}")
            used.add(i)

    # 4. Render pass.
    sampler = _SlotSampler(manifest["slot_defs"], rng)
    clock = datetime.datetime.fromisoformat(
        manifest.get("start_clock", "2024-03-01T00:00:00"))
    step_lo, step_hi = manifest.get("clock_step_seconds", [1, 3])
    lines: list[str] = []
    truth: list[dict] = []
    injected_counts: dict[str, int] = {}
    for i in range(n):
        name, text = final[i]
        subkind = None
        override_slot = None
        override_value = None
        if i in plan:
            subkind, detail = plan[i]
            if subkind == "sequence":
                name, text = detail, texts[detail]
            elif subkind == "state_flapping":
                override_slot, override_value = detail.split("=", 1)
            else:
                slot_name, serial_s = detail.split("|", 1)
                override_slot = slot_name
                override_value = sampler.corrupt(slot_name, subkind, int(serial_s))
        rendered = text
        for slot in _template_slots(text):
            if slot == override_slot:
                value = override_value
                # flapping forces a specific registered state and keeps the
                # sticky chain in sync with what was emitted
                if subkind == "state_flapping":
                    sampler.state_now[slot] = value
            else:
                value = sampler.sample(slot, clock)
            rendered = rendered.replace("{" + slot + "}", value, 1)
        lines.append(rendered)
        row = {"line_no": i + 1, "label": "anomaly" if subkind else "normal"}
        if subkind:
            row["subkind"] = subkind
            injected_counts[subkind] = injected_counts.get(subkind, 0) + 1
        truth.append(row)
        clock += datetime.timedelta(seconds=int(rng.integers(step_lo, step_hi + 1)))

    stats = {
        "name": manifest.get("name", "corpus"),
        "seed": seed,
        "lines": n,
        "templates": len(texts),
        "holdout_lines": len(holdout_lines),
        "injected": injected_counts,
        "anomalies": sum(injected_counts.values()),
    }
    return SynthResult(lines, truth, stats)
