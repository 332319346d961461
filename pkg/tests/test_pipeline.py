"""Configuration strictness, seeding, model persistence, and the CLI."""

from __future__ import annotations

import json
import struct
from types import SimpleNamespace

import numpy as np
import pytest

from tplad import modelstate
from tplad.cli import main
from tplad.detector import DetectorConfig, stream_detect
from tplad.errors import ConfigError, FormatError, VersionError
from tplad.parser import DrainParser, RawLog
from tplad.pipeline import (
    PipelineConfig,
    config_hash,
    detect_online,
    effective_seed,
    read_raw_lines,
    train_offline,
)
from tests.conftest import TINY_CONFIG_DICT, TINY_MANIFEST


class TestConfig:
    def test_empty_payload_yields_defaults(self):
        config = PipelineConfig.from_dict({})
        assert config == PipelineConfig()
        assert config.seed == 7
        assert config.embedding.dim == 64
        assert config.seqmodel.window == 20

    def test_round_trip_through_dict(self):
        config = PipelineConfig.from_dict(TINY_CONFIG_DICT)
        assert PipelineConfig.from_dict(config.to_dict()) == config

    def test_unknown_top_level_key_is_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys.*modle"):
            PipelineConfig.from_dict({"modle": {}})

    def test_unknown_section_key_is_rejected(self):
        with pytest.raises(ConfigError, match="section 'seqmodel'.*hiden"):
            PipelineConfig.from_dict({"seqmodel": {"hiden": 8}})

    def test_section_must_be_an_object(self):
        with pytest.raises(ConfigError, match="must be an object"):
            PipelineConfig.from_dict({"embedding": 64})

    @pytest.mark.parametrize("seed", [True, False, "7", 7.0, None])
    def test_non_integer_seed_is_rejected(self, seed):
        with pytest.raises(ConfigError, match="seed must be an integer"):
            PipelineConfig.from_dict({"seed": seed})

    def test_load_rejects_invalid_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            PipelineConfig.load(str(path))

    def test_load_rejects_non_object_root(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError, match="root must be an object"):
            PipelineConfig.load(str(path))

    def test_load_reads_a_valid_file(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(TINY_CONFIG_DICT))
        assert PipelineConfig.load(str(path)) == \
            PipelineConfig.from_dict(TINY_CONFIG_DICT)

    def test_hash_ignores_key_order_but_not_values(self):
        a = PipelineConfig.from_dict(
            {"seed": 11, "embedding": {"dim": 8, "epochs": 2}})
        b = PipelineConfig.from_dict(
            {"embedding": {"epochs": 2, "dim": 8}, "seed": 11})
        c = PipelineConfig.from_dict(
            {"embedding": {"epochs": 2, "dim": 9}, "seed": 11})
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(c)
        assert len(config_hash(a)) == 64


class TestSeedOverride:
    def test_configured_seed_is_the_default(self, monkeypatch):
        monkeypatch.delenv("TPLAD_SEED", raising=False)
        assert effective_seed(PipelineConfig(seed=42)) == 42

    def test_environment_overrides_the_config(self, monkeypatch):
        monkeypatch.setenv("TPLAD_SEED", "99")
        assert effective_seed(PipelineConfig(seed=42)) == 99

    def test_non_integer_override_is_rejected(self, monkeypatch):
        monkeypatch.setenv("TPLAD_SEED", "lucky")
        with pytest.raises(ConfigError, match="TPLAD_SEED"):
            effective_seed(PipelineConfig())

    def test_override_changes_trained_weights(self, tiny_raws, tiny_config,
                                              monkeypatch):
        subset = tiny_raws[:60]
        monkeypatch.setenv("TPLAD_SEED", "11")
        state_a, _ = train_offline(subset, tiny_config)
        monkeypatch.setenv("TPLAD_SEED", "99")
        state_b, _ = train_offline(subset, tiny_config)
        assert not np.allclose(state_a.weights["wo"], state_b.weights["wo"])


class TestReadRawLines:
    def test_line_numbers_count_physical_lines(self):
        raws = read_raw_lines(["alpha one\n", "\n", "  \n", "beta two\n"])
        assert [(r.line_no, r.body) for r in raws] == \
            [(1, "alpha one"), (4, "beta two")]

    def test_reads_from_a_file_path(self, tmp_path):
        path = tmp_path / "log.txt"
        path.write_text("first line\n\nthird line\n")
        raws = read_raw_lines(str(path))
        assert [r.line_no for r in raws] == [1, 3]
        assert raws[1].body == "third line"


@pytest.fixture(scope="module")
def saved_model(tiny_model, tmp_path_factory):
    path = tmp_path_factory.mktemp("state") / "model.tplad"
    modelstate.save(tiny_model, str(path))
    return path


class TestModelPersistence:
    def test_save_load_save_is_byte_identical(self, saved_model, tmp_path):
        loaded = modelstate.load(str(saved_model))
        second = tmp_path / "again.tplad"
        modelstate.save(loaded, str(second))
        assert second.read_bytes() == saved_model.read_bytes()

    def test_no_temporary_files_linger(self, saved_model):
        names = [p.name for p in saved_model.parent.iterdir()]
        assert names == ["model.tplad"]

    def test_loaded_state_matches_the_original(self, saved_model, tiny_model):
        loaded = modelstate.load(str(saved_model))
        assert loaded.config_hash == tiny_model.config_hash
        assert loaded.template_of_class == tiny_model.template_of_class
        assert loaded.class_of == tiny_model.class_of
        assert loaded.weighted_mean == tiny_model.weighted_mean
        assert loaded.seq_config.window == tiny_model.seq_config.window
        assert loaded.seq_config.classes == tiny_model.seq_config.classes
        assert [t.render() for t in loaded.parser.templates] == \
            [t.render() for t in tiny_model.parser.templates]
        for tid, vec in tiny_model.template_vectors.items():
            assert np.array_equal(loaded.template_vectors[tid], vec)

    def test_loaded_state_detects_identically(self, saved_model, tiny_model,
                                              tiny_raws):
        loaded = modelstate.load(str(saved_model))
        chunk = tiny_raws[200:320]
        reports_a, stats_a = stream_detect(chunk, tiny_model,
                                           DetectorConfig(param_window=10))
        reports_b, stats_b = stream_detect(chunk, loaded,
                                           DetectorConfig(param_window=10))
        assert [r.to_json() for r in reports_a] == \
            [r.to_json() for r in reports_b]
        assert stats_a == stats_b

    def test_bad_magic_is_rejected(self, tmp_path):
        path = tmp_path / "junk.tplad"
        path.write_bytes(b"NOTAMODEL" + b"\x00" * 64)
        with pytest.raises(VersionError, match="bad magic"):
            modelstate.load(str(path))

    def test_newer_format_version_is_rejected(self, saved_model, tmp_path):
        blob = saved_model.read_bytes()
        tampered = blob.replace(b'"format_version":1',
                                b'"format_version":2', 1)
        assert tampered != blob
        path = tmp_path / "future.tplad"
        path.write_bytes(tampered)
        with pytest.raises(VersionError, match="format version 2"):
            modelstate.load(str(path))

    def test_truncated_header_is_rejected(self, tmp_path):
        path = tmp_path / "short.tplad"
        path.write_bytes(modelstate.MAGIC + struct.pack("<I", 1000) + b"{}")
        with pytest.raises(FormatError, match="truncated header"):
            modelstate.load(str(path))

    def test_unreadable_header_is_rejected(self, tmp_path):
        path = tmp_path / "garbled.tplad"
        path.write_bytes(modelstate.MAGIC + struct.pack("<I", 4) + b"no%j")
        with pytest.raises(FormatError, match="unreadable header"):
            modelstate.load(str(path))

    def test_truncated_tensor_payload_is_rejected(self, saved_model,
                                                  tmp_path):
        path = tmp_path / "cut.tplad"
        path.write_bytes(saved_model.read_bytes()[:-8])
        with pytest.raises(FormatError, match="truncated section"):
            modelstate.load(str(path))

    def test_trailing_bytes_are_rejected(self, saved_model, tmp_path):
        path = tmp_path / "padded.tplad"
        path.write_bytes(saved_model.read_bytes() + b"\x00" * 8)
        with pytest.raises(FormatError, match="trailing bytes"):
            modelstate.load(str(path))


class TestDetectOnline:
    def test_uses_detector_section_from_stored_config(self, tiny_model,
                                                      tiny_raws):
        reports, stats = detect_online(tiny_raws[:100], tiny_model)
        expected, expected_stats = stream_detect(tiny_raws[:100], tiny_model,
                                                 DetectorConfig())
        assert [r.to_json() for r in reports] == \
            [r.to_json() for r in expected]
        assert stats == expected_stats

    def test_explicit_detector_config_wins(self, tiny_model, tiny_raws):
        # A one-line parameter window forces immediate window closes,
        # which the stored default (100) would never reach on 50 lines.
        _, stats = detect_online(tiny_raws[:50], tiny_model,
                                 DetectorConfig(param_window=1))
        assert stats["param_windows_closed"] > 0


@pytest.fixture(scope="module")
def cli_ws(tiny_corpus, tmp_path_factory):
    """A trained-model workspace shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.log"
    corpus.write_text("\n".join(tiny_corpus.lines) + "\n")
    config = root / "config.json"
    config.write_text(json.dumps(TINY_CONFIG_DICT))
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps(TINY_MANIFEST))
    model = root / "model.tplad"
    rc = main(["train", "--input", str(corpus), "--out", str(model),
               "--config", str(config), "--quiet"])
    assert rc == 0 and model.exists()
    return SimpleNamespace(root=root, corpus=corpus, config=config,
                           manifest=manifest, model=model)


class TestCli:
    def test_train_reports_hash_and_timings(self, cli_ws, tmp_path, capsys):
        out = tmp_path / "m.tplad"
        rc = main(["train", "--input", str(cli_ws.corpus), "--out", str(out),
                   "--config", str(cli_ws.config), "--quiet"])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["model"] == str(out)
        assert len(payload["config_hash"]) == 64
        assert payload["templates"] == 5
        assert payload["lines"] == 700

    def test_detect_clean_stream_exits_zero(self, cli_ws, capsys):
        rc = main(["detect", "--model", str(cli_ws.model),
                   "--input", str(cli_ws.corpus)])
        captured = capsys.readouterr()
        assert rc == 0
        assert captured.out == ""  # no reports on the training replay
        stats = json.loads(captured.err)
        assert stats["reports"] == 0
        assert stats["lines"] == 700

    def test_detect_anomalies_exit_one_and_write_reports(self, cli_ws,
                                                         tmp_path, capsys):
        noisy = tmp_path / "noisy.log"
        noisy.write_text("\n".join(
            list((cli_ws.corpus.read_text().splitlines())) + ["-- ## !!"]
        ) + "\n")
        report_path = tmp_path / "reports.jsonl"
        rc = main(["detect", "--model", str(cli_ws.model),
                   "--input", str(noisy), "--report", str(report_path)])
        assert rc == 1
        rows = [json.loads(line)
                for line in report_path.read_text().splitlines()]
        assert len(rows) == 1
        assert rows[0]["line_no"] == 701
        assert rows[0]["kind"] == "sequence"
        assert rows[0]["template_id"] == -1
        stats = json.loads(capsys.readouterr().err)
        assert stats["novel_reported"] == 1

    def test_detect_corrupted_model_exits_two(self, cli_ws, tmp_path, capsys):
        bad = tmp_path / "bad.tplad"
        bad.write_bytes(b"NOTAMODEL" + b"\x00" * 32)
        rc = main(["detect", "--model", str(bad),
                   "--input", str(cli_ws.corpus)])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_parse_lists_templates_and_saves_artifacts(self, cli_ws,
                                                       tmp_path, capsys):
        tout = tmp_path / "templates.json"
        rout = tmp_path / "records.jsonl"
        rc = main(["parse", "--input", str(cli_ws.corpus),
                   "--templates-out", str(tout), "--records-out", str(rout)])
        assert rc == 0
        assert "700 lines -> 5 templates" in capsys.readouterr().out
        with open(tout, "r", encoding="utf-8") as fh:
            library = DrainParser.from_json(json.load(fh))
        assert len(library.templates) == 5
        rows = [json.loads(line) for line in rout.read_text().splitlines()]
        assert len(rows) == 700
        assert set(rows[0]) == {"line_no", "template_id", "params"}

    def test_synth_writes_the_three_artifacts(self, cli_ws, tmp_path, capsys):
        out_dir = tmp_path / "corpus"
        rc = main(["synth", "--manifest", str(cli_ws.manifest),
                   "--out", str(out_dir), "--seed", "11"])
        assert rc == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats["lines"] == 700
        for name in ("corpus.log", "truth.jsonl", "meta.json"):
            assert (out_dir / name).exists()
        assert (out_dir / "corpus.log").read_text() == \
            cli_ws.corpus.read_text()

    def test_eval_prints_table_and_writes_rows(self, cli_ws, tmp_path,
                                               capsys):
        data_dir = tmp_path / "dataset"
        main(["synth", "--manifest", str(cli_ws.manifest),
              "--out", str(data_dir), "--seed", "11"])
        capsys.readouterr()
        rows_path = tmp_path / "rows.json"
        rc = main(["eval", "--dataset", str(data_dir), "--format",
                   "synthetic", "--fractions", "0.8", "--config",
                   str(cli_ws.config), "--out", str(rows_path), "--quiet"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "frac" in out and "0.8" in out
        rows = json.loads(rows_path.read_text())
        assert len(rows) == 1
        assert rows[0]["train_lines"] == 560
        assert rows[0]["recall_defined"] is False

    def test_inspect_summarizes_the_model(self, cli_ws, capsys):
        rc = main(["inspect", "--model", str(cli_ws.model), "--json"])
        assert rc == 0
        info = json.loads(capsys.readouterr().out)
        assert info["templates"] == 5
        assert info["embedding_dim"] == 8
        assert info["sequence"]["window"] == 4
        assert info["sequence"]["classes"] == 5

    def test_inspect_template_listing(self, cli_ws, capsys):
        rc = main(["inspect", "--model", str(cli_ws.model), "--templates"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "omega heartbeat steady" in out
        assert "keys=" in out

    def test_config_errors_exit_two(self, cli_ws, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"modle": {}}))
        rc = main(["train", "--input", str(cli_ws.corpus),
                   "--out", str(tmp_path / "m.tplad"), "--config", str(bad)])
        assert rc == 2
        assert "unknown config keys" in capsys.readouterr().err

    def test_missing_input_exits_two(self, cli_ws, tmp_path, capsys):
        rc = main(["detect", "--model", str(cli_ws.model),
                   "--input", str(tmp_path / "nope.log")])
        assert rc == 2
        assert "error:" in capsys.readouterr().err
