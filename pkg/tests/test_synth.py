"""Synthetic corpus generation: determinism, validation, injection accounting."""

from __future__ import annotations

import json
import re

import pytest

from tplad.errors import ManifestError
from tplad.synth import generate, load_manifest, validate_manifest

ISO = re.compile(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}")


def with_injections(manifest, counts, start_fraction=0.5, margin_lines=0):
    manifest["injections"] = {
        "start_fraction": start_fraction,
        "margin_lines": margin_lines,
        "counts": counts,
    }
    return manifest


# --- determinism ------------------------------------------------------------------


class TestDeterminism:
    def test_same_seed_reproduces_everything(self, tiny_manifest):
        a = generate(tiny_manifest, seed=42)
        b = generate(tiny_manifest, seed=42)
        assert a.lines == b.lines
        assert a.truth == b.truth
        assert a.stats == b.stats

    def test_different_seeds_differ(self, tiny_manifest):
        a = generate(tiny_manifest, seed=1)
        b = generate(tiny_manifest, seed=2)
        assert a.lines != b.lines

    def test_clock_never_runs_backwards(self, tiny_manifest):
        result = generate(tiny_manifest, seed=5)
        stamps = [m.group(0) for line in result.lines
                  for m in [ISO.search(line)] if m]
        assert stamps == sorted(stamps)
        assert stamps  # the corpus does carry timestamps


# --- validation -------------------------------------------------------------------


class TestValidation:
    def test_valid_manifest_passes(self, tiny_manifest):
        validate_manifest(tiny_manifest)

    @pytest.mark.parametrize("field", ["lines", "slot_defs", "templates", "process"])
    def test_missing_required_field(self, tiny_manifest, field):
        del tiny_manifest[field]
        with pytest.raises(ManifestError, match=field):
            validate_manifest(tiny_manifest)

    def test_too_few_lines(self, tiny_manifest):
        tiny_manifest["lines"] = 9
        with pytest.raises(ManifestError, match="at least 10"):
            validate_manifest(tiny_manifest)

    def test_unknown_slot_kind(self, tiny_manifest):
        tiny_manifest["slot_defs"]["bad"] = {"kind": "sparkle"}
        with pytest.raises(ManifestError, match="sparkle"):
            validate_manifest(tiny_manifest)

    def test_state_slot_needs_two_values(self, tiny_manifest):
        tiny_manifest["slot_defs"]["st"]["values"] = ["ONLY"]
        with pytest.raises(ManifestError, match="at least 2"):
            validate_manifest(tiny_manifest)

    def test_resource_slot_needs_a_pool(self, tiny_manifest):
        tiny_manifest["slot_defs"]["res"].pop("pool")
        with pytest.raises(ManifestError, match="pool"):
            validate_manifest(tiny_manifest)

    def test_duplicate_template_name(self, tiny_manifest):
        tiny_manifest["templates"].append(dict(tiny_manifest["templates"][0]))
        with pytest.raises(ManifestError, match="duplicate"):
            validate_manifest(tiny_manifest)

    def test_unknown_slot_reference(self, tiny_manifest):
        tiny_manifest["templates"][0]["text"] = "alpha uses {ghost_slot}"
        with pytest.raises(ManifestError, match="ghost_slot"):
            validate_manifest(tiny_manifest)

    def test_unknown_process_start(self, tiny_manifest):
        tiny_manifest["process"]["start"] = "nobody"
        with pytest.raises(ManifestError, match="start"):
            validate_manifest(tiny_manifest)

    def test_unknown_transition_source(self, tiny_manifest):
        tiny_manifest["process"]["transitions"]["nobody"] = [["alpha", 1.0]]
        with pytest.raises(ManifestError, match="nobody"):
            validate_manifest(tiny_manifest)

    def test_unknown_transition_target(self, tiny_manifest):
        tiny_manifest["process"]["transitions"]["alpha"] = [["nobody", 1.0]]
        with pytest.raises(ManifestError, match="nobody"):
            validate_manifest(tiny_manifest)

    def test_transition_probabilities_must_sum_to_one(self, tiny_manifest):
        tiny_manifest["process"]["transitions"]["alpha"] = \
            [["beta", 0.5], ["gamma", 0.4]]
        with pytest.raises(ManifestError, match="sum"):
            validate_manifest(tiny_manifest)

    def test_holdout_variant_of_unknown_template(self, tiny_manifest):
        tiny_manifest["holdout"] = {
            "variants": [{"of": "nobody", "text": "x y z"}]}
        with pytest.raises(ManifestError, match="nobody"):
            validate_manifest(tiny_manifest)

    def test_holdout_variant_with_unknown_slot(self, tiny_manifest):
        tiny_manifest["holdout"] = {
            "variants": [{"of": "alpha", "text": "alpha uses {ghost_slot}"}]}
        with pytest.raises(ManifestError, match="ghost_slot"):
            validate_manifest(tiny_manifest)

    def test_unknown_injection_subkind_fails_at_generation(self, tiny_manifest):
        with_injections(tiny_manifest, {"sideways_drift": 1})
        with pytest.raises(ManifestError, match="sideways_drift"):
            generate(tiny_manifest, seed=1)

    def test_load_manifest_validates(self, tiny_manifest, tmp_path):
        tiny_manifest["lines"] = 5
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(tiny_manifest))
        with pytest.raises(ManifestError):
            load_manifest(str(path))


# --- generation -------------------------------------------------------------------


class TestGeneration:
    def test_line_and_truth_counts_match_the_request(self, tiny_manifest):
        result = generate(tiny_manifest, seed=3)
        assert len(result.lines) == tiny_manifest["lines"]
        assert len(result.truth) == tiny_manifest["lines"]
        assert [row["line_no"] for row in result.truth] == \
            list(range(1, tiny_manifest["lines"] + 1))

    def test_without_injections_everything_is_normal(self, tiny_manifest):
        result = generate(tiny_manifest, seed=3)
        assert all(row["label"] == "normal" for row in result.truth)
        assert result.stats["anomalies"] == 0
        assert result.stats["injected"] == {}

    def test_truth_is_exhaustive_over_injections(self, tiny_manifest):
        with_injections(tiny_manifest, {
            "sequence": 5,
            "numeric_invalid": 3,
            "time_format": 2,
        })
        result = generate(tiny_manifest, seed=9)
        anomalies = [row for row in result.truth if row["label"] == "anomaly"]
        assert len(anomalies) == result.stats["anomalies"] == 10
        assert all("subkind" in row for row in anomalies)
        by_subkind = {}
        for row in anomalies:
            by_subkind[row["subkind"]] = by_subkind.get(row["subkind"], 0) + 1
        assert by_subkind == result.stats["injected"] == {
            "sequence": 5, "numeric_invalid": 3, "time_format": 2}

    def test_injections_stay_past_the_start_fraction(self, tiny_manifest):
        with_injections(tiny_manifest, {"sequence": 5}, start_fraction=0.8,
                        margin_lines=10)
        result = generate(tiny_manifest, seed=9)
        floor = int(0.8 * tiny_manifest["lines"]) + 10
        for row in result.truth:
            if row["label"] == "anomaly":
                assert row["line_no"] > floor

    @pytest.mark.parametrize("subkind,token", [
        ("time_format", "when-exactly"),
        ("time_range", "2024-13-40T25:61:61"),
        ("user_empty", "null"),
        ("numeric_invalid", "unreadable"),
        ("state_unseen", "GLITCHED"),
        ("resource_path", "##corrupt@@path!!"),
        ("resource_association", "/zzzalien/qqforeign/artifact.xbin"),
    ])
    def test_corruptions_render_into_the_line(self, tiny_manifest, subkind, token):
        with_injections(tiny_manifest, {subkind: 2})
        result = generate(tiny_manifest, seed=13)
        hit = [row["line_no"] for row in result.truth
               if row.get("subkind") == subkind]
        assert len(hit) == 2
        for line_no in hit:
            assert token in result.lines[line_no - 1]

    def test_user_outlier_renders_a_ghost_identity(self, tiny_manifest):
        with_injections(tiny_manifest, {"user_outlier": 2})
        result = generate(tiny_manifest, seed=13)
        hit = [row["line_no"] for row in result.truth
               if row.get("subkind") == "user_outlier"]
        assert len(hit) == 2
        for line_no in hit:
            assert "u_ghost" in result.lines[line_no - 1]

    def test_numeric_range_renders_far_from_the_mean(self, tiny_manifest):
        with_injections(tiny_manifest, {"numeric_range": 1})
        result = generate(tiny_manifest, seed=13)
        (line_no,) = [row["line_no"] for row in result.truth
                      if row.get("subkind") == "numeric_range"]
        line = result.lines[line_no - 1]
        # Either numeric slot, shifted +8 sigma off its configured mean.
        assert ("180.0" in line) or ("80" in line.split())

    def test_state_flapping_alternates_the_two_first_values(self, tiny_manifest):
        with_injections(tiny_manifest, {"state_flapping": {"length": 12}})
        result = generate(tiny_manifest, seed=21)
        flap_lines = [row["line_no"] for row in result.truth
                      if row.get("subkind") == "state_flapping"]
        assert len(flap_lines) == 12
        seen = []
        for line_no in flap_lines:
            tokens = result.lines[line_no - 1].split()
            assert tokens[0] == "gamma"  # the only state-bearing template
            seen.append(tokens[2])
        assert seen == ["UP", "DOWN"] * 6

    def test_sequence_injection_breaks_the_process_order(self, tiny_manifest):
        with_injections(tiny_manifest, {"sequence": 8})
        result = generate(tiny_manifest, seed=17)
        transitions = tiny_manifest["process"]["transitions"]
        hit = [row["line_no"] for row in result.truth
               if row.get("subkind") == "sequence"]
        assert len(hit) == 8
        for line_no in hit:
            previous = result.lines[line_no - 2].split()[0]
            foreign = result.lines[line_no - 1].split()[0]
            allowed = {target for target, _ in transitions[previous]}
            assert foreign not in allowed

    def test_holdout_variants_replace_their_parent_late(self, tiny_manifest):
        tiny_manifest["holdout"] = {
            "start_fraction": 0.5,
            "rate": 1.0,
            "variants": [{
                "of": "alpha",
                "text": "alpha job {uid} started at {clock} took {dur} ms ok v2",
            }],
        }
        result = generate(tiny_manifest, seed=25)
        n = tiny_manifest["lines"]
        cut = n // 2
        early = [l for l in result.lines[:cut] if l.startswith("alpha")]
        late = [l for l in result.lines[cut:] if l.startswith("alpha")]
        assert early and not any(l.endswith("v2") for l in early)
        assert late and all(l.endswith("v2") for l in late)
        assert result.stats["holdout_lines"] == len(late)
        # Variants are normal traffic, not anomalies.
        assert all(row["label"] == "normal" for row in result.truth)


# --- output files -------------------------------------------------------------------


class TestWrite:
    def test_write_produces_the_three_files(self, tiny_manifest, tmp_path):
        with_injections(tiny_manifest, {"sequence": 3})
        result = generate(tiny_manifest, seed=29)
        result.write(str(tmp_path))
        corpus = (tmp_path / "corpus.log").read_text().splitlines()
        truth = [json.loads(l) for l in
                 (tmp_path / "truth.jsonl").read_text().splitlines()]
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert corpus == result.lines
        assert truth == result.truth
        assert meta == result.stats
