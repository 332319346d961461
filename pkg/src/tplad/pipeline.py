"""End-to-end training and detection orchestration.

Training is a two-pass offline procedure:

1. **Mine** — a first pass over the stream grows the template library;
   a second pass re-extracts every line against the *frozen* library so
   each entry's parameters line up with the final placeholder layout
   (templates widen as they absorb lines, so first-pass extractions can
   predate placeholders that exist by the end of mining).
2. **Fit** — word embeddings are trained over the mined template texts,
   each template is condensed to a single similarity-weighted vector,
   parameter models are fitted per (template, position), and the
   sequence model learns to predict each entry from the window of
   entries before it, every entry encoded as template vector plus its
   fixed-layout parameter vector (zero-padded to the widest template).

Everything is seeded.  The `TPLAD_SEED` environment variable overrides
the configured seed at run time without editing config files.

Configuration is a strict nested namespace: unknown keys anywhere in a
config document are an error rather than silently ignored, so typos
cannot masquerade as defaults.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .detector import DetectorConfig, stream_detect
from .embedding import (
    WordTable,
    template_vector,
    template_words,
    train_builtin_embeddings,
)
from .errors import ConfigError, TooFewSamples
from .modelstate import ModelState
from .paramenc import ParamEncConfig, encode_entry, fit_param_models
from .parser import DrainParser, RawLog, parse_stream, reextract
from .seqmodel import SeqModelConfig, train


@dataclass
class ParserSettings:
    sim_threshold: float = 0.5
    depth: int = 4
    max_children: int = 100


@dataclass
class EmbeddingSettings:
    dim: int = 64
    window: int = 2
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    min_lr: float = 1e-4
    weighted_mean: bool = True


@dataclass
class SeqSettings:
    hidden: int = 256
    window: int = 20
    attention_dim: int | None = None
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 64
    clip_norm: float = 5.0
    candidate_count: int = 9
    train_noise: float = 0.0


@dataclass
class PipelineConfig:
    parser: ParserSettings = field(default_factory=ParserSettings)
    embedding: EmbeddingSettings = field(default_factory=EmbeddingSettings)
    paramenc: ParamEncConfig = field(default_factory=ParamEncConfig)
    seqmodel: SeqSettings = field(default_factory=SeqSettings)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    seed: int = 7

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "PipelineConfig":
        sections = {
            "parser": ParserSettings,
            "embedding": EmbeddingSettings,
            "paramenc": ParamEncConfig,
            "seqmodel": SeqSettings,
            "detector": DetectorConfig,
        }
        known_top = set(sections) | {"seed"}
        unknown = set(payload) - known_top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in sections.items():
            body = payload.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            valid = {f.name for f in fields(section_cls)}
            bad = set(body) - valid
            if bad:
                raise ConfigError(
                    f"unknown keys in config section {name!r}: {sorted(bad)}")
            kwargs[name] = section_cls(**body)
        seed = payload.get("seed", 7)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        return cls(seed=seed, **kwargs)

    @classmethod
    def load(cls, path: str) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: config root must be an object")
        return cls.from_dict(payload)


def config_hash(config: PipelineConfig) -> str:
    """Stable content hash of a configuration."""
    canonical = json.dumps(config.to_dict(), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def effective_seed(config: PipelineConfig) -> int:
    """Configured seed, unless TPLAD_SEED overrides it."""
    env = os.environ.get("TPLAD_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"TPLAD_SEED must be an integer, got {env!r}") from exc
    return config.seed


def read_raw_lines(path_or_lines) -> list[RawLog]:
    """Raw records from a file path or an iterable of strings.

    Blank lines are skipped; line numbers always count physical lines so
    reports remain addressable against the original file.
    """
    if isinstance(path_or_lines, str):
        with open(path_or_lines, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    else:
        lines = list(path_or_lines)
    raws = []
    for i, line in enumerate(lines, start=1):
        body = line.rstrip("\n")
        if body.strip():
            raws.append(RawLog(line_no=i, body=body))
    return raws


def train_offline(raws: list[RawLog], config: PipelineConfig | None = None,
                  progress=None) -> tuple[ModelState, dict]:
    """Train a full model over a finite stream; returns (state, timings)."""
    config = config or PipelineConfig()
    seed = effective_seed(config)
    raws = list(raws)
    timings: dict = {"lines": len(raws)}

    def note(msg):
        if progress:
            progress(msg)

    t0 = time.perf_counter()
    parser = DrainParser(
        sim_threshold=config.parser.sim_threshold,
        depth=config.parser.depth,
        max_children=config.parser.max_children,
    )
    parse_stream(parser, raws)
    records = reextract(parser, raws)
    unmatched = [r for r in records if not r.matched]
    if unmatched:
        # Cannot happen: merging only widens templates, so similarity to
        # the final library never drops below the mint-time similarity.
        raise TooFewSamples(
            f"{len(unmatched)} lines failed re-extraction after mining")
    timings["mine_s"] = round(time.perf_counter() - t0, 3)
    template_ids = sorted(
        tid for tid in range(1, parser.max_template_id + 1)
        if parser.get_template(tid) is not None)
    timings["templates"] = len(template_ids)
    note(f"mined {len(template_ids)} templates from {len(raws)} lines")

    t0 = time.perf_counter()
    templates = [parser.get_template(tid) for tid in template_ids]
    table = WordTable.from_templates(templates)
    sentences = [template_words(parser.get_template(r.template_id))
                 for r in records]
    emb = config.embedding
    provider = train_builtin_embeddings(
        table, sentences, dim=emb.dim, window=emb.window,
        negatives=emb.negatives, epochs=emb.epochs, lr=emb.lr,
        min_lr=emb.min_lr, seed=seed)
    template_vectors = {
        t.id: template_vector(t, provider, weighted_mean=emb.weighted_mean)
        for t in templates
    }
    timings["embed_s"] = round(time.perf_counter() - t0, 3)
    note(f"embedded {len(table)} words in {emb.dim} dimensions")

    t0 = time.perf_counter()
    pcfg = replace(config.paramenc, seed=seed)
    param_models = fit_param_models(records, pcfg)
    timings["params_s"] = round(time.perf_counter() - t0, 3)
    note(f"fitted parameter models (layout width {param_models.width})")

    t0 = time.perf_counter()
    n = len(records)
    w = config.seqmodel.window
    if n <= w + 1:
        raise TooFewSamples(
            f"{n} lines cannot fill a window of {w} plus a target")
    dim = emb.dim
    width = dim + param_models.width
    inputs = np.zeros((n, width))
    for i, record in enumerate(records):
        inputs[i, :dim] = template_vectors[record.template_id]
        encoded = encode_entry(record, param_models)
        if encoded is not None and encoded.values.shape[0]:
            inputs[i, dim:dim + encoded.values.shape[0]] = encoded.values
    class_of = {tid: k for k, tid in enumerate(template_ids)}
    windows = np.lib.stride_tricks.sliding_window_view(
        inputs, (w, width))[:, 0]
    x = windows[:n - w]
    y = np.array([class_of[records[i].template_id] for i in range(w, n)],
                 dtype=np.int64)
    sq = config.seqmodel
    seq_config = SeqModelConfig(
        input_dim=width,
        classes=len(template_ids),
        hidden=sq.hidden,
        window=w,
        attention_dim=sq.attention_dim,
        lr=sq.lr,
        epochs=sq.epochs,
        batch_size=sq.batch_size,
        clip_norm=sq.clip_norm,
        candidate_count=sq.candidate_count,
        train_noise=sq.train_noise,
        seed=seed,
    )
    note(f"training sequence model on {x.shape[0]} windows "
         f"({len(template_ids)} classes, width {width})")
    weights, losses = train(x, y, seq_config)
    timings["seq_s"] = round(time.perf_counter() - t0, 3)
    timings["loss_per_epoch"] = [round(v, 5) for v in losses]

    state = ModelState(
        config=config.to_dict(),
        config_hash=config_hash(config),
        parser=parser,
        provider=provider,
        template_vectors=template_vectors,
        param_models=param_models,
        weights=weights,
        seq_config=seq_config,
        weighted_mean=emb.weighted_mean,
    )
    return state, timings


def detect_online(raws, state: ModelState,
                  detector_config: DetectorConfig | None = None):
    """Stream detection over raw lines; returns (reports, stats)."""
    cfg = detector_config
    if cfg is None and isinstance(state.config, dict):
        body = state.config.get("detector", {})
        valid = {f.name for f in fields(DetectorConfig)}
        cfg = DetectorConfig(**{k: v for k, v in body.items() if k in valid})
    return stream_detect(raws, state, cfg or DetectorConfig())
