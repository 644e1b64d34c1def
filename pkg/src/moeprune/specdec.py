"""True speculative decoding with the pruned candidate drafting for the
full model.

Per round the draft samples a block of tokens autoregressively, the target
scores every proposed position in one pass, and each token is accepted
with probability min(1, p/q).  The first rejection is replaced by a draw
from the residual distribution norm(max(0, p - q)); a fully accepted block
earns one bonus token sampled from the target.  This is the standard
rejection-correction scheme, so emitted tokens are distributed exactly as
target-only sampling, and the per-token acceptance rate is the quantity
the teacher-forced expected-acceptance score approximates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ValidationError
from .fitness import FitnessKind, FitnessValue, sample_categorical
from .model import MoEModel, teacher_forced_distributions, validate_sequence


@dataclass(frozen=True)
class SpecDecConfig:
    prompts: tuple[tuple[int, ...], ...]
    block_size: int = 4
    max_new_tokens: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "prompts", tuple(tuple(int(t) for t in p) for p in self.prompts))
        if not self.prompts:
            raise DataError("speculative decoding needs at least one prompt")
        if self.block_size < 1:
            raise ValidationError(f"block_size must be >= 1, got {self.block_size}")
        if self.max_new_tokens < 1:
            raise ValidationError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")


@dataclass(frozen=True)
class PromptStats:
    prompt_index: int
    proposals: int
    accepted: int
    acceptance_rate: float


@dataclass(frozen=True)
class AcceptanceReport:
    proposals: int
    accepted: int
    acceptance_rate: float
    per_prompt: tuple[PromptStats, ...]

    def to_json(self) -> dict:
        return {
            "proposals": self.proposals,
            "accepted": self.accepted,
            "acceptance_rate": self.acceptance_rate,
            "per_prompt": [
                {
                    "prompt_index": s.prompt_index,
                    "proposals": s.proposals,
                    "accepted": s.accepted,
                    "acceptance_rate": s.acceptance_rate,
                }
                for s in self.per_prompt
            ],
        }


def _rate(accepted: int, proposals: int) -> float:
    return accepted / proposals if proposals else 0.0


def speculative_step(p: np.ndarray, q: np.ndarray, rng: np.random.Generator) -> tuple[int, bool]:
    """One accept-or-correct step at a fixed context.

    Proposes y ~ q and accepts with probability min(1, p(y)/q(y)); on
    rejection resamples from the residual norm(max(0, p - q)).  A residual
    that is numerically all zero (only reachable when p = q up to rounding)
    falls back to sampling from p.
    """
    y = sample_categorical(rng, q)
    if rng.random() < min(1.0, p[y] / q[y]):
        return y, True
    residual = np.maximum(p - q, 0.0)
    total = residual.sum()
    if total <= 0.0:
        return sample_categorical(rng, p), False
    return sample_categorical(rng, residual / total), False


def spec_decode(target: MoEModel, draft: MoEModel, config: SpecDecConfig):
    """Decode every prompt; returns (sequences, AcceptanceReport).

    Proposals are counted per drafted token, matching the per-token
    acceptance that the teacher-forced proxy estimates.
    """
    if target.spec.vocab_size != draft.spec.vocab_size:
        raise ValidationError("target and draft must share a vocabulary")
    if target.spec.max_seq_len != draft.spec.max_seq_len:
        raise ValidationError("target and draft must share max_seq_len")
    max_len = target.spec.max_seq_len
    rng = np.random.default_rng(config.seed)
    sequences = []
    stats = []
    for idx, prompt in enumerate(config.prompts):
        validate_sequence(target.spec, prompt)
        seq = list(prompt)
        proposals = accepted = produced = 0
        while produced < config.max_new_tokens and len(seq) < max_len:
            block = min(config.block_size, max_len - len(seq))
            drafted = []
            q_rows = []
            for _ in range(block):
                q = teacher_forced_distributions(draft, seq + drafted)[-1]
                drafted.append(sample_categorical(rng, q))
                q_rows.append(q)
            p_all = teacher_forced_distributions(target, seq + drafted)
            start = len(seq) - 1
            rejected_at = None
            for j in range(block):
                proposals += 1
                p, q = p_all[start + j], q_rows[j]
                y = drafted[j]
                if rng.random() < min(1.0, p[y] / q[y]):
                    accepted += 1
                    continue
                residual = np.maximum(p - q, 0.0)
                total = residual.sum()
                if total <= 0.0:
                    replacement = sample_categorical(rng, p)
                else:
                    replacement = sample_categorical(rng, residual / total)
                seq.extend(drafted[:j])
                seq.append(replacement)
                produced += j + 1
                rejected_at = j
                break
            if rejected_at is None:
                seq.extend(drafted)
                produced += block
                if len(seq) < max_len:
                    seq.append(sample_categorical(rng, p_all[start + block]))
                    produced += 1
        sequences.append(tuple(seq))
        stats.append(
            PromptStats(
                prompt_index=idx,
                proposals=proposals,
                accepted=accepted,
                acceptance_rate=_rate(accepted, proposals),
            )
        )
    total_proposals = sum(s.proposals for s in stats)
    total_accepted = sum(s.accepted for s in stats)
    report = AcceptanceReport(
        proposals=total_proposals,
        accepted=total_accepted,
        acceptance_rate=_rate(total_accepted, total_proposals),
        per_prompt=tuple(stats),
    )
    return sequences, report


def specdec_fitness(target: MoEModel, draft: MoEModel, config: SpecDecConfig) -> FitnessValue:
    """Empirical acceptance rate as a drop-in (and expensive) search fitness."""
    _, report = spec_decode(target, draft, config)
    return FitnessValue(value=report.acceptance_rate, kind=FitnessKind.SPEC_DEC)
