"""Semantic template vectors from word embeddings.

Each mined template is summarised as a single dense vector: every literal
word gets an embedding, each word receives a weight equal to its mean
cosine similarity to the template's other words (so words central to the
template's meaning count more), word vectors are scaled by their weight,
and the template vector is the weight-averaged sum of the scaled vectors.

Embeddings come from a pluggable provider.  The built-in provider trains
skip-gram vectors with negative sampling on the parsed stream's template
token sequences, which keeps the pipeline self-contained and
deterministic; any external model can be swapped in through the
line-delimited JSON subprocess protocol.
"""

from __future__ import annotations

import json
import logging
import subprocess

import numpy as np

from .errors import (EmptyLibrary, InsufficientCorpus, NoLiterals, ZeroVector)
from .parser import PLACEHOLDER, Template

log = logging.getLogger(__name__)

EMBEDDING_EXPORT_VERSION = 1

#: Below this total weight the weighted mean is considered degenerate.
WEIGHT_EPS = 1e-9


def normalize_word(token: str) -> str | None:
    """Lowercase a literal token; None for placeholders and pure punctuation."""
    if token == PLACEHOLDER:
        return None
    word = token.lower()
    if not any(ch.isalnum() for ch in word):
        return None
    return word


def template_words(template: Template) -> list[str]:
    """The template's literal words in order, duplicates preserved."""
    words = []
    for token in template.tokens:
        word = normalize_word(token)
        if word is not None:
            words.append(word)
    return words


class WordTable:
    """First-seen ordered vocabulary over template literals."""

    def __init__(self, words: list[str] | None = None):
        self.words: list[str] = []
        self.index: dict[str, int] = {}
        for word in words or []:
            self.add(word)

    def add(self, word: str) -> int:
        if word not in self.index:
            self.index[word] = len(self.words)
            self.words.append(word)
        return self.index[word]

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    @classmethod
    def from_templates(cls, templates: list[Template]) -> "WordTable":
        table = cls()
        for template in templates:
            for word in template_words(template):
                table.add(word)
        return table


class EmbeddingProvider:
    """Maps words to fixed-dimension vectors, deterministically.

    Subclasses implement :meth:`_lookup`; results are cached so repeated
    queries for the same word always return the identical vector.  Words
    outside the provider's vocabulary resolve to :attr:`unknown_vector`.
    """

    name = "base"

    def __init__(self, dim: int):
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def _lookup(self, word: str) -> np.ndarray | None:
        raise NotImplementedError

    @property
    def unknown_vector(self) -> np.ndarray:
        raise NotImplementedError

    def vector(self, word: str, allow_unknown: bool = False) -> np.ndarray:
        if word not in self._cache:
            found = self._lookup(word)
            if found is None:
                if not allow_unknown:
                    raise KeyError(f"word not in embedding vocabulary: {word!r}")
                return self.unknown_vector
            self._cache[word] = np.asarray(found, dtype=np.float64)
        return self._cache[word]

    def vectors(self, words: list[str], allow_unknown: bool = False) -> np.ndarray:
        if not words:
            return np.zeros((0, self.dim))
        return np.stack([self.vector(w, allow_unknown=allow_unknown) for w in words])


class StaticProvider(EmbeddingProvider):
    """Dictionary-backed provider, mainly for tests and imported exports."""

    name = "static"

    def __init__(self, mapping: dict[str, np.ndarray], dim: int,
                 unknown: np.ndarray | None = None):
        super().__init__(dim)
        self._mapping = {w: np.asarray(v, dtype=np.float64) for w, v in mapping.items()}
        if unknown is None:
            unknown = _mean_direction(list(self._mapping.values()), dim)
        self._unknown = np.asarray(unknown, dtype=np.float64)

    def _lookup(self, word: str) -> np.ndarray | None:
        return self._mapping.get(word)

    @property
    def unknown_vector(self) -> np.ndarray:
        return self._unknown


def _mean_direction(vectors: list[np.ndarray], dim: int) -> np.ndarray:
    """Unit-norm mean of `vectors`; first basis vector if degenerate."""
    if vectors:
        mean = np.mean(np.stack(vectors), axis=0)
        norm = float(np.linalg.norm(mean))
        if norm > 1e-12:
            return mean / norm
    fallback = np.zeros(dim)
    fallback[0] = 1.0
    return fallback


class SkipGramProvider(EmbeddingProvider):
    """Unit-norm skip-gram vectors over a fixed word table."""

    name = "skipgram"

    def __init__(self, table: WordTable, matrix: np.ndarray):
        super().__init__(int(matrix.shape[1]))
        self.table = table
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self._unknown = _mean_direction([row for row in self.matrix], self.dim)

    def _lookup(self, word: str) -> np.ndarray | None:
        idx = self.table.index.get(word)
        if idx is None:
            return None
        return self.matrix[idx]

    @property
    def unknown_vector(self) -> np.ndarray:
        return self._unknown


def _sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-x))


def train_builtin_embeddings(table: WordTable, sentences: list[list[str]],
                             dim: int = 64, window: int = 2, negatives: int = 5,
                             epochs: int = 5, lr: float = 0.025,
                             min_lr: float = 1e-4, seed: int = 7) -> SkipGramProvider:
    """Train skip-gram vectors with negative sampling.

    `sentences` are template token sequences in stream order (already
    normalized via :func:`normalize_word`).  Training is single-threaded
    and seeded, so results are reproducible bit-for-bit.  Vectors are
    L2-normalized before being wrapped in a provider.
    """
    if len(table) < 2:
        raise InsufficientCorpus(
            f"need at least 2 distinct words, got {len(table)}")
    rng = np.random.default_rng(seed)
    vocab = len(table)
    w_in = (rng.random((vocab, dim)) - 0.5) / dim
    w_out = np.zeros((vocab, dim))

    counts = np.zeros(vocab)
    encoded: list[list[int]] = []
    for sentence in sentences:
        ids = [table.index[w] for w in sentence if w in table.index]
        if ids:
            encoded.append(ids)
            for i in ids:
                counts[i] += 1
    if not encoded:
        raise InsufficientCorpus("no sentences intersect the word table")

    # Unigram^0.75 negative-sampling distribution.
    noise = np.maximum(counts, 1.0) ** 0.75
    noise /= noise.sum()
    cumulative = np.cumsum(noise)

    pairs = sum(
        1
        for ids in encoded
        for center in range(len(ids))
        for _ in range(max(0, min(len(ids), center + window + 1) - max(0, center - window) - 1))
    )
    total_steps = max(1, pairs * epochs)
    step = 0
    for _ in range(epochs):
        for ids in encoded:
            for center_pos, center in enumerate(ids):
                lo = max(0, center_pos - window)
                hi = min(len(ids), center_pos + window + 1)
                for ctx_pos in range(lo, hi):
                    if ctx_pos == center_pos:
                        continue
                    context = ids[ctx_pos]
                    rate = max(min_lr, lr * (1.0 - step / total_steps))
                    step += 1
                    v = w_in[center]
                    grad_v = np.zeros(dim)
                    # Positive sample.
                    g = _sigmoid(w_out[context] @ v) - 1.0
                    grad_v += g * w_out[context]
                    w_out[context] -= rate * g * v
                    # Negative samples.
                    draws = np.searchsorted(cumulative, rng.random(negatives))
                    for neg in draws:
                        if neg == context:
                            continue
                        g = _sigmoid(w_out[neg] @ v)
                        grad_v += g * w_out[neg]
                        w_out[neg] -= rate * g * v
                    w_in[center] -= rate * grad_v

    norms = np.linalg.norm(w_in, axis=1, keepdims=True)
    for i in range(vocab):
        if norms[i, 0] <= 1e-12:
            w_in[i] = 0.0
            w_in[i, i % dim] = 1.0
            norms[i, 0] = 1.0
    return SkipGramProvider(table, w_in / norms)


# --- template vectors --------------------------------------------------------


def word_weights(vectors: np.ndarray) -> np.ndarray:
    """Per-word weights: mean cosine similarity to the other words.

    For a single word the weight is fixed at 1.0.  Raises
    :class:`ZeroVector` when any row has zero norm, since cosine
    similarity is undefined there.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if n == 0:
        raise NoLiterals("cannot weight an empty word list")
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms <= 0.0):
        raise ZeroVector("zero-norm word vector in weight computation")
    if n == 1:
        return np.ones(1)
    unit = vectors / norms[:, None]
    cosine = unit @ unit.T
    return (cosine.sum(axis=1) - 1.0) / (n - 1)


def template_vector(template: Template, provider: EmbeddingProvider,
                    weighted_mean: bool = True,
                    allow_unknown: bool = False) -> np.ndarray:
    """Similarity-weighted template vector.

    Word vectors are scaled by their weight and combined with a
    weight-averaged mean.  If the weights sum to (nearly) zero the
    weighted mean is undefined; the uniform mean of the scaled vectors is
    returned instead and the degradation is logged.  Passing
    ``weighted_mean=False`` selects the uniform mean unconditionally.
    """
    words = template_words(template)
    if not words:
        raise NoLiterals(f"template {template.id} has no usable literal words")
    vectors = provider.vectors(words, allow_unknown=allow_unknown)
    weights = word_weights(vectors)
    scaled = weights[:, None] * vectors
    total = float(weights.sum())
    if not weighted_mean:
        return scaled.mean(axis=0)
    if abs(total) <= WEIGHT_EPS:
        log.warning(
            "template %d: word weights sum to %.3g; falling back to uniform mean",
            template.id, total)
        return scaled.mean(axis=0)
    return (weights[:, None] * scaled).sum(axis=0) / total


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; zero-norm inputs score 0 against everything."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= 0.0 or nb <= 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def nearest_template(query: np.ndarray, library: dict[int, np.ndarray]) -> tuple[int, float]:
    """Library template most similar to `query` by cosine.

    Ties resolve to the smallest template id.  Raises
    :class:`EmptyLibrary` when there is nothing to compare against.
    """
    if not library:
        raise EmptyLibrary("no template vectors to search")
    best_id = -1
    best_sim = -np.inf
    for tid in sorted(library):
        sim = cosine(query, library[tid])
        if sim > best_sim:
            best_id, best_sim = tid, sim
    return best_id, float(best_sim)


# --- import/export -----------------------------------------------------------


def export_embeddings(provider: EmbeddingProvider, words: list[str]) -> dict:
    """JSON-ready embedding dump: {version, dim, words, vectors}."""
    matrix = provider.vectors(words, allow_unknown=True)
    return {
        "version": EMBEDDING_EXPORT_VERSION,
        "dim": provider.dim,
        "words": list(words),
        "vectors": [[float(x) for x in row] for row in matrix],
    }


def import_embeddings(payload: dict) -> StaticProvider:
    dim = int(payload["dim"])
    words = payload["words"]
    vectors = payload["vectors"]
    if len(words) != len(vectors):
        raise ValueError("words and vectors disagree in length")
    mapping = {}
    for word, row in zip(words, vectors):
        if len(row) != dim:
            raise ValueError(f"vector for {word!r} has dim {len(row)}, want {dim}")
        mapping[word] = np.asarray(row, dtype=np.float64)
    return StaticProvider(mapping, dim)


class SubprocessProvider(EmbeddingProvider):
    """Adapter for external embedding models.

    Speaks a one-line-JSON protocol over the child's stdin/stdout:
    request ``{"words": [...]}`` and response ``{"vectors": [[...], ...]}``
    with one vector per requested word, in order.
    """

    name = "subprocess"

    def __init__(self, command: list[str], dim: int):
        super().__init__(dim)
        self._proc = subprocess.Popen(
            command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, bufsize=1)
        self._served: list[np.ndarray] = []

    def _lookup(self, word: str) -> np.ndarray | None:
        request = json.dumps({"words": [word]})
        self._proc.stdin.write(request + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise RuntimeError("embedding subprocess closed its output")
        response = json.loads(line)
        vectors = response["vectors"]
        if len(vectors) != 1 or len(vectors[0]) != self.dim:
            raise ValueError(
                f"embedding subprocess returned shape "
                f"{len(vectors)}x{len(vectors[0]) if vectors else 0}, want 1x{self.dim}")
        vec = np.asarray(vectors[0], dtype=np.float64)
        self._served.append(vec)
        return vec

    @property
    def unknown_vector(self) -> np.ndarray:
        return _mean_direction(self._served, self.dim)

    def close(self) -> None:
        if self._proc.stdin:
            self._proc.stdin.close()
        self._proc.wait(timeout=10)

    def __enter__(self) -> "SubprocessProvider":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
