"""Per-expert importance scores and layer-wise pruning orders.

Four criteria, accumulated in one forward pass over a calibration set:

* frequency: how many tokens routed the expert into the selected set,
* seer: soft count, the full-softmax router probability summed over all
  tokens (unselected experts included),
* ean: mean L2 norm of the expert's output over the tokens that selected
  it (zero if never selected),
* reap: mean of gate weight times output norm over selected tokens.

ean and reap use selected-token means rather than sums, so they measure
per-activation strength rather than doubling as frequency counters.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DataError, ValidationError
from .model import MoEModel, _softmax, expert_forward, forward_trace, route_batch


class Criterion(str, Enum):
    FREQUENCY = "frequency"
    SEER = "seer"
    EAN = "ean"
    REAP = "reap"


@dataclass(frozen=True)
class CalibrationSet:
    sequences: tuple[tuple[int, ...], ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(tuple(int(t) for t in s) for s in self.sequences))
        if not self.sequences:
            raise DataError("calibration set is empty")


@dataclass(frozen=True, eq=False)
class ImportanceScores:
    criterion: Criterion
    scores: tuple[np.ndarray, ...]
    token_count: int

    def __post_init__(self):
        arrays = []
        for layer, s in enumerate(self.scores):
            arr = np.asarray(s, dtype=np.float64).copy()
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"layer {layer} has non-finite importance scores")
            arr.setflags(write=False)
            arrays.append(arr)
        object.__setattr__(self, "scores", tuple(arrays))
        object.__setattr__(self, "criterion", Criterion(self.criterion))
        if self.token_count <= 0:
            raise ValidationError(f"token_count must be positive, got {self.token_count}")

    def to_json(self) -> dict:
        return {
            "criterion": self.criterion.value,
            "token_count": self.token_count,
            "scores": [list(map(float, s)) for s in self.scores],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ImportanceScores":
        try:
            return cls(Criterion(obj["criterion"]), tuple(obj["scores"]), int(obj["token_count"]))
        except KeyError as exc:
            raise ValidationError(f"importance scores missing field: {exc}") from exc


@dataclass(frozen=True)
class PruningOrder:
    """Per-layer permutation of expert ids, ascending importance."""

    pi: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        normalized = tuple(tuple(int(j) for j in layer) for layer in self.pi)
        object.__setattr__(self, "pi", normalized)
        for layer, perm in enumerate(self.pi):
            if sorted(perm) != list(range(len(perm))):
                raise ValidationError(f"layer {layer}: {perm} is not a permutation of 0..{len(perm) - 1}")

    def to_json(self) -> dict:
        return {"pi": [list(layer) for layer in self.pi]}

    @classmethod
    def from_json(cls, obj: dict) -> "PruningOrder":
        try:
            return cls(tuple(tuple(layer) for layer in obj["pi"]))
        except KeyError as exc:
            raise ValidationError(f"pruning order missing field: {exc}") from exc


def calibrate(model: MoEModel, data: CalibrationSet, criterion: Criterion) -> ImportanceScores:
    """Accumulate one criterion's per-expert scores over the calibration set."""
    criterion = Criterion(criterion)
    if not model.fully_active():
        raise ValidationError("calibration requires a fully active model")
    if not data.sequences:
        raise DataError("calibration set is empty")

    counts = [n for n in model.spec.experts_per_layer]
    freq = [np.zeros(n) for n in counts]
    seer = [np.zeros(n) for n in counts]
    norm_sum = [np.zeros(n) for n in counts]
    gate_norm_sum = [np.zeros(n) for n in counts]
    sel_count = [np.zeros(n) for n in counts]
    token_count = 0

    for seq in data.sequences:
        _, moe_inputs = forward_trace(model, seq)
        token_count += len(seq)
        for layer, states in enumerate(moe_inputs):
            experts, gates, logits, _ = route_batch(model, layer, states)
            np.add.at(freq[layer], experts.ravel(), 1.0)
            seer[layer] += _softmax(logits, axis=-1).sum(axis=0)
            if criterion in (Criterion.EAN, Criterion.REAP):
                for e in np.unique(experts):
                    rows, cols = np.nonzero(experts == e)
                    norms = np.linalg.norm(expert_forward(model, layer, int(e), states[rows]), axis=1)
                    sel_count[layer][e] += rows.size
                    norm_sum[layer][e] += norms.sum()
                    gate_norm_sum[layer][e] += (gates[rows, cols] * norms).sum()

    if criterion is Criterion.FREQUENCY:
        scores = freq
    elif criterion is Criterion.SEER:
        scores = seer
    elif criterion is Criterion.EAN:
        scores = [np.divide(s, c, out=np.zeros_like(s), where=c > 0) for s, c in zip(norm_sum, sel_count)]
    else:
        scores = [np.divide(s, c, out=np.zeros_like(s), where=c > 0) for s, c in zip(gate_norm_sum, sel_count)]
    return ImportanceScores(criterion=criterion, scores=tuple(scores), token_count=token_count)


def make_order(scores: ImportanceScores) -> PruningOrder:
    """Stable ascending sort per layer; ties go to the lower expert index."""
    pi = tuple(tuple(int(j) for j in np.argsort(s, kind="stable")) for s in scores.scores)
    return PruningOrder(pi=pi)
