"""Teacher-forced fitness family for comparing a pruned candidate against
the full model.

All scores are computed at answer-token positions of prompt/answer pairs,
with both models conditioned on the same ground-truth prefix, so there is
no trajectory dependence.  The expected-acceptance score at one context is
the vocabulary overlap sum(min(p, q)), which equals one minus the total
variation distance and also equals the expected value of the speculative
acceptance test min(1, p/q) under a proposal drawn from q.  Scores average
over answer positions within a sample, then over samples, so every sample
contributes equally regardless of answer length.  Higher is better for
every kind: KL and NLL are stored negated.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import CoverageError, DataError, StalenessError, ValidationError
from .hashing import content_hash
from .model import MoEModel, spec_hash, teacher_forced_distributions, validate_sequence

_LOG_FLOOR = 1e-300
_CACHE_MAGIC = b"MPLC\x01"


class FitnessKind(str, Enum):
    ESAP = "esap"
    SAP = "sap"
    KL = "kl"
    NLL = "nll"
    SPEC_DEC = "specdec"


@dataclass(frozen=True)
class FitnessValue:
    value: float
    kind: FitnessKind

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "kind", FitnessKind(self.kind))
        if not np.isfinite(self.value):
            raise ValidationError(f"{self.kind.value} fitness is not finite")
        if self.kind in (FitnessKind.ESAP, FitnessKind.SAP, FitnessKind.SPEC_DEC):
            if not -1e-9 <= self.value <= 1 + 1e-9:
                raise ValidationError(f"{self.kind.value} fitness {self.value} outside [0, 1]")
        elif self.value > 1e-9:
            raise ValidationError(f"{self.kind.value} fitness {self.value} must be non-positive (stored negated)")


@dataclass(frozen=True)
class SearchSample:
    prompt: tuple[int, ...]
    answer: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "answer", tuple(int(t) for t in self.answer))
        if not self.answer:
            raise DataError("sample has an empty answer")
        if not self.prompt:
            raise DataError("sample has an empty prompt")

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.prompt + self.answer


def dataset_content_hash(samples) -> str:
    return content_hash([{"prompt": list(s.prompt), "answer": list(s.answer)} for s in samples])


def answer_contexts(sample: SearchSample) -> tuple[int, ...]:
    """Positions of the concatenation whose next token is an answer token."""
    start = len(sample.prompt) - 1
    return tuple(range(start, start + len(sample.answer)))


def acceptance_prob(p: float, q: float) -> float:
    """Speculative acceptance of a proposal with target mass p and draft mass q."""
    if p < 0:
        raise ValidationError(f"target probability must be non-negative, got {p}")
    if q <= 0:
        raise ValidationError("a zero-probability token cannot be proposed")
    return min(1.0, p / q)


def _check_pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.ndim != 1 or q.ndim != 1 or p.shape != q.shape:
        raise ValidationError(f"distribution shapes {p.shape} and {q.shape} do not match")
    return p, q


def esap_at_context(p, q) -> float:
    """Expected speculative acceptance at one context: sum(min(p, q))."""
    p, q = _check_pair(p, q)
    return float(np.minimum(p, q).sum())


def tv_distance(p, q) -> float:
    """Total variation distance; complements esap_at_context to exactly 1."""
    p, q = _check_pair(p, q)
    return float(0.5 * np.abs(p - q).sum())


def sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> int:
    cdf = np.cumsum(probs)
    return int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))


def _check_proposal(q: np.ndarray):
    if np.any(q < 0) or not np.isfinite(q).all() or abs(q.sum() - 1.0) > 1e-9:
        raise ValidationError("draft distribution is not a probability distribution")


def sap_at_context(p, q, rng: np.random.Generator) -> float:
    """Single-draw acceptance estimate: propose y ~ q, score min(1, p(y)/q(y))."""
    p, q = _check_pair(p, q)
    _check_proposal(q)
    y = sample_categorical(rng, q)
    return acceptance_prob(float(p[y]), float(q[y]))


def sap_draws(p, q, rng: np.random.Generator, draws: int) -> np.ndarray:
    """Vectorized batch of single-draw acceptance estimates (for MC studies)."""
    p, q = _check_pair(p, q)
    _check_proposal(q)
    cdf = np.cumsum(q)
    ys = np.searchsorted(cdf, rng.random(draws) * cdf[-1], side="right")
    return np.minimum(1.0, p[ys] / q[ys])


@dataclass(frozen=True, eq=False)
class LogitCache:
    """Full-model next-token distributions at every answer position.

    ``rows[i]`` is the (len(answer_i), V) matrix for sample i, in answer
    order.  The hashes tie the cache to the model spec and dataset that
    produced it; consumers refuse mismatched inputs.
    """

    model_spec_hash: str
    dataset_hash: str
    vocab_size: int
    rows: tuple[np.ndarray, ...]


def build_cache(model: MoEModel, samples) -> LogitCache:
    if not model.fully_active():
        raise ValidationError("logit caches must be built from the fully active model")
    spec = model.spec
    rows = []
    for i, sample in enumerate(samples):
        tokens = sample.tokens
        if len(tokens) > spec.max_seq_len:
            raise ValidationError(
                f"sample {i}: combined length {len(tokens)} exceeds max_seq_len {spec.max_seq_len}"
            )
        probs = teacher_forced_distributions(model, tokens)
        block = probs[np.asarray(answer_contexts(sample))].copy()
        block.setflags(write=False)
        rows.append(block)
    return LogitCache(
        model_spec_hash=spec_hash(spec),
        dataset_hash=dataset_content_hash(samples),
        vocab_size=spec.vocab_size,
        rows=tuple(rows),
    )


def save_cache(cache: LogitCache, path) -> None:
    header = {
        "model_spec_hash": cache.model_spec_hash,
        "dataset_hash": cache.dataset_hash,
        "vocab_size": cache.vocab_size,
        "num_samples": len(cache.rows),
        "positions_per_sample": [int(r.shape[0]) for r in cache.rows],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for block in cache.rows:
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_cache(path) -> LogitCache:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CACHE_MAGIC))
        if magic != _CACHE_MAGIC:
            raise ValidationError(f"{path}: not a logit cache file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        vocab = int(header["vocab_size"])
        counts = [int(c) for c in header["positions_per_sample"]]
        if len(counts) != int(header["num_samples"]):
            raise ValidationError(f"{path}: header sample counts disagree")
        payload = fh.read()
    expected = sum(counts) * vocab * 8
    if len(payload) != expected:
        raise ValidationError(f"{path}: payload holds {len(payload)} bytes, header implies {expected}")
    flat = np.frombuffer(payload, dtype="<f8").reshape(-1, vocab)
    rows = []
    offset = 0
    for c in counts:
        block = flat[offset : offset + c].astype(np.float64)
        block.setflags(write=False)
        rows.append(block)
        offset += c
    return LogitCache(
        model_spec_hash=str(header["model_spec_hash"]),
        dataset_hash=str(header["dataset_hash"]),
        vocab_size=vocab,
        rows=tuple(rows),
    )


def _context_scores(kind: FitnessKind, p_rows, q_rows, answer_ids, rng) -> np.ndarray:
    if kind is FitnessKind.ESAP:
        return np.minimum(p_rows, q_rows).sum(axis=1)
    if kind is FitnessKind.SAP:
        return np.array([sap_at_context(p, q, rng) for p, q in zip(p_rows, q_rows)])
    if kind is FitnessKind.KL:
        logp = np.log(np.maximum(p_rows, _LOG_FLOOR))
        logq = np.log(np.maximum(q_rows, _LOG_FLOOR))
        return (p_rows * (logp - logq)).sum(axis=1)
    # NLL at the true next token
    hits = q_rows[np.arange(len(answer_ids)), answer_ids]
    return -np.log(np.maximum(hits, _LOG_FLOOR))


def dataset_fitness(
    full_cache: LogitCache,
    candidate: MoEModel,
    dataset,
    kind: FitnessKind,
    rng: np.random.Generator | None = None,
) -> FitnessValue:
    """Two-level mean of per-context scores: within each sample over its
    answer positions, then across samples.  The cache supplies the full
    model's distributions; only the candidate is run."""
    kind = FitnessKind(kind)
    if kind is FitnessKind.SPEC_DEC:
        raise ValidationError("specdec fitness needs the decoding harness, not the teacher-forced cache")
    if full_cache.model_spec_hash != spec_hash(candidate.spec):
        raise StalenessError("logit cache was built for a different model spec")
    if full_cache.dataset_hash != dataset_content_hash(dataset):
        raise StalenessError("logit cache was built for a different dataset")
    if len(full_cache.rows) != len(dataset):
        raise CoverageError(f"cache has {len(full_cache.rows)} sample blocks, dataset has {len(dataset)}")
    if rng is None:
        rng = np.random.default_rng(0)

    sample_means = []
    for i, sample in enumerate(dataset):
        p_rows = full_cache.rows[i]
        if p_rows.shape[0] != len(sample.answer):
            raise CoverageError(
                f"sample {i}: cache holds {p_rows.shape[0]} positions, answer has {len(sample.answer)}"
            )
        validate_sequence(candidate.spec, sample.tokens)
        q_all = teacher_forced_distributions(candidate, sample.tokens)
        q_rows = q_all[np.asarray(answer_contexts(sample))]
        answer_ids = np.asarray(sample.answer)
        sample_means.append(_context_scores(kind, p_rows, q_rows, answer_ids, rng).mean())

    value = float(np.mean(sample_means))
    if kind in (FitnessKind.KL, FitnessKind.NLL):
        value = -value
    return FitnessValue(value=value, kind=kind)
