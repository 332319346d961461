"""Binary container for a fully trained model.

Layout (all integers little-endian):

* 8-byte magic ``TPLADMS1``
* u32 header length
* UTF-8 JSON header — format version, pipeline config and its hash, the
  template library, the embedding vocabulary, parameter models, the
  sequence model's architecture, and a section table naming each binary
  tensor with its shape
* concatenated float64 little-endian tensor payloads, in section-table
  order

The container stores no timestamps or environment data, so saving the
same state twice produces byte-identical files — a property the test
suite relies on.  Writes go through a temporary file in the target
directory followed by an atomic rename, so a crash mid-save can never
leave a truncated file at the destination.  Loading refuses anything
with an unknown magic or a format version newer than this code.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .embedding import SkipGramProvider, WordTable
from .errors import FormatError, VersionError
from .paramenc import params_from_json, params_to_json
from .parser import DrainParser
from .seqmodel import TENSOR_NAMES, ModelWeights, SeqModelConfig

MAGIC = b"TPLADMS1"
FORMAT_VERSION = 1


class ModelState:
    """Everything the detector needs, frozen after training."""

    def __init__(self, config: dict, config_hash: str, parser: DrainParser,
                 provider, template_vectors: dict[int, np.ndarray],
                 param_models, weights: ModelWeights,
                 seq_config: SeqModelConfig, weighted_mean: bool = True):
        self.version = FORMAT_VERSION
        self.config = config
        self.config_hash = config_hash
        self.parser = parser
        self.provider = provider
        self.template_vectors = template_vectors
        self.param_models = param_models
        self.weights = weights
        self.seq_config = seq_config
        self.weighted_mean = weighted_mean
        self.template_of_class = sorted(template_vectors)
        self.class_of = {tid: i for i, tid in enumerate(self.template_of_class)}


def _seq_config_json(cfg: SeqModelConfig) -> dict:
    return {
        "input_dim": cfg.input_dim,
        "classes": cfg.classes,
        "hidden": cfg.hidden,
        "window": cfg.window,
        "attention_dim": cfg.attention_dim,
        "candidate_count": cfg.candidate_count,
    }


def save(state: ModelState, path: str) -> None:
    """Serialize to `path` atomically."""
    template_ids = state.template_of_class
    dim = state.provider.dim
    sections: list[tuple[str, np.ndarray]] = [
        ("embedding_matrix", np.asarray(state.provider.matrix, dtype=np.float64)),
        ("template_vectors", np.stack(
            [state.template_vectors[tid] for tid in template_ids])
            if template_ids else np.zeros((0, dim))),
    ]
    for name in TENSOR_NAMES:
        sections.append((name, state.weights[name]))

    header = {
        "format_version": state.version,
        "config": state.config,
        "config_hash": state.config_hash,
        "weighted_mean": state.weighted_mean,
        "parser": state.parser.to_json(),
        "words": list(state.provider.table.words),
        "embedding_dim": dim,
        "template_ids": template_ids,
        "param_models": params_to_json(state.param_models),
        "seq_config": _seq_config_json(state.seq_config),
        "sections": [
            {"name": name, "shape": list(arr.shape)} for name, arr in sections
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tplad-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header_bytes)))
            fh.write(header_bytes)
            for _, arr in sections:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load(path: str) -> ModelState:
    """Deserialize a model file; fail closed on version mismatch."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise VersionError(f"{path}: not a model file (bad magic)")
    (header_len,) = struct.unpack_from("<I", blob, len(MAGIC))
    header_start = len(MAGIC) + 4
    header_end = header_start + header_len
    if header_end > len(blob):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[header_start:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(
            f"{path}: format version {version!r}; this build reads "
            f"{FORMAT_VERSION} only")

    offset = header_end
    arrays: dict[str, np.ndarray] = {}
    for section in header["sections"]:
        shape = tuple(section["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: truncated section {section['name']!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        arrays[section["name"]] = arr.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")

    parser = DrainParser.from_json(header["parser"])
    table = WordTable(header["words"])
    provider = SkipGramProvider(table, arrays["embedding_matrix"])
    template_ids = [int(t) for t in header["template_ids"]]
    tv_matrix = arrays["template_vectors"]
    template_vectors = {tid: tv_matrix[i] for i, tid in enumerate(template_ids)}
    param_models = params_from_json(header["param_models"])
    sc = header["seq_config"]
    seq_config = SeqModelConfig(
        input_dim=int(sc["input_dim"]),
        classes=int(sc["classes"]),
        hidden=int(sc["hidden"]),
        window=int(sc["window"]),
        attention_dim=sc.get("attention_dim"),
        candidate_count=int(sc.get("candidate_count", 9)),
    )
    weights = ModelWeights({name: arrays[name] for name in TENSOR_NAMES})
    return ModelState(
        config=header["config"],
        config_hash=header["config_hash"],
        parser=parser,
        provider=provider,
        template_vectors=template_vectors,
        param_models=param_models,
        weights=weights,
        seq_config=seq_config,
        weighted_mean=bool(header.get("weighted_mean", True)),
    )
