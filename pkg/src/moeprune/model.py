"""Deterministic toy sparse mixture-of-experts transformer.

The architecture is a stack of pre-normalized blocks, each a single-head
causal self-attention sublayer followed by a routed expert FFN sublayer,
with residual connections around both, between a token+position embedding
and an unembedding projection.  Routing selects the ``fanout`` experts with
the largest router logits among the *active* experts of a layer and mixes
their outputs with a softmax over the selected logits.

Everything runs in float64 and all parameters come from a single seeded
PCG64 stream, so two builds from the same spec are bit-identical across
platforms.  Models are immutable once built: pruning produces a new model
value that shares the weight arrays and differs only in its active masks.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FeasibilityError, ValidationError
from .hashing import content_hash

_NORM_EPS = 1e-12

_SPEC_KEYS = (
    "layers",
    "experts_per_layer",
    "fanout",
    "hidden_dim",
    "expert_hidden_dim",
    "vocab_size",
    "max_seq_len",
    "weight_seed",
    "weight_scale",
)


def _per_layer(value, layers: int, name: str) -> tuple[int, ...]:
    if isinstance(value, (int, np.integer)):
        out = (int(value),) * layers
    else:
        out = tuple(int(v) for v in value)
    if len(out) != layers:
        raise ValidationError(f"{name}: expected {layers} entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and initialization of a toy sparse-MoE transformer.

    ``experts_per_layer`` and ``fanout`` accept a single int (uniform across
    layers) or one value per layer; both are normalized to per-layer tuples.
    """

    layers: int
    experts_per_layer: int | tuple[int, ...]
    fanout: int | tuple[int, ...]
    hidden_dim: int
    expert_hidden_dim: int
    vocab_size: int
    max_seq_len: int
    weight_seed: int
    weight_scale: float

    def __post_init__(self):
        if self.layers < 1:
            raise ValidationError(f"layers: must be >= 1, got {self.layers}")
        object.__setattr__(
            self, "experts_per_layer", _per_layer(self.experts_per_layer, self.layers, "experts_per_layer")
        )
        object.__setattr__(self, "fanout", _per_layer(self.fanout, self.layers, "fanout"))
        for i, (n, k) in enumerate(zip(self.experts_per_layer, self.fanout)):
            if n < 1:
                raise ValidationError(f"experts_per_layer: experts_per_layer[{i}]={n} must be >= 1")
            if k < 1 or k > n:
                raise ValidationError(
                    f"fanout: fanout[{i}]={k} must satisfy 1 <= fanout <= experts_per_layer[{i}]={n}"
                )
        if self.hidden_dim < 1:
            raise ValidationError(f"hidden_dim: must be >= 1, got {self.hidden_dim}")
        if self.expert_hidden_dim < 1:
            raise ValidationError(f"expert_hidden_dim: must be >= 1, got {self.expert_hidden_dim}")
        if self.vocab_size < 2:
            raise ValidationError(f"vocab_size: must be >= 2, got {self.vocab_size}")
        if self.max_seq_len < 1:
            raise ValidationError(f"max_seq_len: must be >= 1, got {self.max_seq_len}")
        if not (0 <= int(self.weight_seed) < 2**64):
            raise ValidationError(f"weight_seed: must be a non-negative 64-bit integer, got {self.weight_seed}")
        if not (float(self.weight_scale) > 0 and np.isfinite(self.weight_scale)):
            raise ValidationError(f"weight_scale: must be a positive finite real, got {self.weight_scale}")
        object.__setattr__(self, "weight_scale", float(self.weight_scale))

    def to_json(self) -> dict:
        return {
            "layers": self.layers,
            "experts_per_layer": list(self.experts_per_layer),
            "fanout": list(self.fanout),
            "hidden_dim": self.hidden_dim,
            "expert_hidden_dim": self.expert_hidden_dim,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "weight_seed": self.weight_seed,
            "weight_scale": self.weight_scale,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelSpec":
        if not isinstance(obj, dict):
            raise ValidationError("model spec must be a JSON object")
        missing = [k for k in _SPEC_KEYS if k not in obj]
        if missing:
            raise ValidationError(f"model spec missing fields: {', '.join(missing)}")
        unknown = [k for k in obj if k not in _SPEC_KEYS]
        if unknown:
            raise ValidationError(f"model spec has unknown fields: {', '.join(unknown)}")
        return cls(**{k: obj[k] for k in _SPEC_KEYS})


def spec_hash(spec: ModelSpec) -> str:
    return content_hash(spec.to_json())


@dataclass(frozen=True, eq=False)
class LayerWeights:
    attn_q: np.ndarray  # (d, d)
    attn_k: np.ndarray
    attn_v: np.ndarray
    attn_o: np.ndarray
    router: np.ndarray  # (n, d)
    ff_in: np.ndarray  # (n, dh, d)
    ff_in_bias: np.ndarray  # (n, dh)
    ff_out: np.ndarray  # (n, d, dh)
    ff_out_bias: np.ndarray  # (n, d)


@dataclass(frozen=True, eq=False)
class MoEModel:
    """Built model: immutable weights plus per-layer active-expert masks."""

    spec: ModelSpec
    embedding: np.ndarray  # (V, d)
    positions: np.ndarray  # (max_seq_len, d)
    layers: tuple[LayerWeights, ...]
    unembed: np.ndarray  # (d, V)
    active_masks: tuple[np.ndarray, ...]

    def fully_active(self) -> bool:
        return all(m.all() for m in self.active_masks)


def build_model(spec: ModelSpec) -> MoEModel:
    """Instantiate a model with all experts active.

    Draw order (one PCG64 stream seeded with ``weight_seed``): embedding,
    positions, then per layer attention q/k/v/o, router, expert input map
    and bias, expert output map and bias, and finally the unembedding.
    """
    rng = np.random.default_rng(spec.weight_seed)

    def draw(*shape):
        arr = rng.normal(0.0, spec.weight_scale, size=shape)
        arr.setflags(write=False)
        return arr

    d, dh = spec.hidden_dim, spec.expert_hidden_dim
    embedding = draw(spec.vocab_size, d)
    positions = draw(spec.max_seq_len, d)
    layers = []
    for n in spec.experts_per_layer:
        layers.append(
            LayerWeights(
                attn_q=draw(d, d),
                attn_k=draw(d, d),
                attn_v=draw(d, d),
                attn_o=draw(d, d),
                router=draw(n, d),
                ff_in=draw(n, dh, d),
                ff_in_bias=draw(n, dh),
                ff_out=draw(n, d, dh),
                ff_out_bias=draw(n, d),
            )
        )
    unembed = draw(d, spec.vocab_size)
    masks = []
    for n in spec.experts_per_layer:
        m = np.ones(n, dtype=bool)
        m.setflags(write=False)
        masks.append(m)
    return MoEModel(
        spec=spec,
        embedding=embedding,
        positions=positions,
        layers=tuple(layers),
        unembed=unembed,
        active_masks=tuple(masks),
    )


def parameter_checksum(model: MoEModel) -> str:
    """SHA-256 over every parameter array in build order (masks excluded)."""
    digest = hashlib.sha256()
    arrays = [model.embedding, model.positions]
    for lw in model.layers:
        arrays += [lw.attn_q, lw.attn_k, lw.attn_v, lw.attn_o, lw.router, lw.ff_in, lw.ff_in_bias, lw.ff_out, lw.ff_out_bias]
    arrays.append(model.unembed)
    for arr in arrays:
        digest.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return digest.hexdigest()


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _rmsnorm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS)


def _silu(x: np.ndarray) -> np.ndarray:
    # numerically stable x * sigmoid(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = x[pos] / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = x[~pos] * ex / (1.0 + ex)
    return out


def _check_layer(model: MoEModel, layer: int) -> int:
    if not (0 <= layer < model.spec.layers):
        raise ValidationError(f"layer index {layer} out of range [0, {model.spec.layers})")
    return layer


def validate_sequence(spec: ModelSpec, seq) -> np.ndarray:
    ids = np.asarray(list(seq), dtype=np.int64)
    if ids.size == 0:
        raise DataError("token sequence is empty")
    if ids.size > spec.max_seq_len:
        raise ValidationError(f"sequence length {ids.size} exceeds max_seq_len {spec.max_seq_len}")
    bad = np.flatnonzero((ids < 0) | (ids >= spec.vocab_size))
    if bad.size:
        raise ValidationError(f"token id {ids[bad[0]]} at position {bad[0]} outside vocabulary [0, {spec.vocab_size})")
    return ids


def route_batch(model: MoEModel, layer: int, states: np.ndarray):
    """Top-k routing for a batch of hidden states.

    Returns ``(experts, gates, logits, active)`` where ``experts`` is the
    (T, k) matrix of selected expert ids, ``gates`` the (T, k) softmax over
    the selected logits, ``logits`` the (T, A) router logits over the active
    experts listed in ``active``.  Ties go to the lower expert index.
    """
    _check_layer(model, layer)
    lw = model.layers[layer]
    active = np.flatnonzero(model.active_masks[layer])
    k = model.spec.fanout[layer]
    if active.size < k:
        raise FeasibilityError(f"layer {layer} has {active.size} active experts, fewer than fanout {k}")
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[-1] != model.spec.hidden_dim:
        raise ValidationError(f"hidden state has dimension {states.shape[-1]}, expected {model.spec.hidden_dim}")
    logits = states @ lw.router[active].T
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    gates = _softmax(np.take_along_axis(logits, order, axis=1), axis=-1)
    experts = active[order]
    return experts, gates, logits, active


def route(model: MoEModel, layer: int, h: np.ndarray):
    """Route a single hidden state: (selected expert ids, full gate vector)."""
    experts, gates, _, _ = route_batch(model, layer, h)
    full = np.zeros(model.spec.experts_per_layer[layer])
    full[experts[0]] = gates[0]
    return experts[0].copy(), full


def expert_forward(model: MoEModel, layer: int, expert: int, states: np.ndarray) -> np.ndarray:
    """One expert FFN: affine, smooth gating nonlinearity, affine."""
    lw = model.layers[_check_layer(model, layer)]
    hidden = _silu(states @ lw.ff_in[expert].T + lw.ff_in_bias[expert])
    return hidden @ lw.ff_out[expert].T + lw.ff_out_bias[expert]


def moe_forward(model: MoEModel, layer: int, h: np.ndarray) -> np.ndarray:
    """Mixture output for a single hidden state; only selected experts run."""
    selected, gates = route(model, layer, h)
    out = np.zeros(model.spec.hidden_dim)
    for e in selected:
        out += gates[e] * expert_forward(model, layer, int(e), h)
    return out


def _moe_block(model: MoEModel, layer: int, states: np.ndarray) -> np.ndarray:
    experts, gates, _, _ = route_batch(model, layer, states)
    out = np.zeros_like(states)
    for e in np.unique(experts):
        rows, cols = np.nonzero(experts == e)
        vals = expert_forward(model, layer, int(e), states[rows])
        out[rows] += gates[rows, cols, None] * vals
    return out


def _attention(lw: LayerWeights, x: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    q = x @ lw.attn_q.T
    k = x @ lw.attn_k.T
    v = x @ lw.attn_v.T
    scores = (q @ k.T) / np.sqrt(d)
    t = len(x)
    scores[np.triu_indices(t, 1)] = -np.inf
    return (_softmax(scores, axis=-1) @ v) @ lw.attn_o.T


def forward_trace(model: MoEModel, seq):
    """Teacher-forced forward pass that also records each layer's MoE input.

    Returns ``(probs, moe_inputs)``: ``probs`` is the (T, V) matrix of
    next-token distributions and ``moe_inputs`` the list of (T, d) states
    entering each layer's expert sublayer (after the pre-norm), which is
    what the routers and experts actually see.
    """
    ids = validate_sequence(model.spec, seq)
    t = ids.size
    h = model.embedding[ids] + model.positions[:t]
    moe_inputs = []
    for layer, lw in enumerate(model.layers):
        h = h + _attention(lw, _rmsnorm(h))
        x = _rmsnorm(h)
        moe_inputs.append(x)
        h = h + _moe_block(model, layer, x)
    logits = _rmsnorm(h) @ model.unembed
    return _softmax(logits, axis=-1), moe_inputs


def teacher_forced_distributions(model: MoEModel, seq) -> np.ndarray:
    """Next-token distribution at every position, conditioning on the true prefix."""
    probs, _ = forward_trace(model, seq)
    return probs


def apply_allocation(model: MoEModel, order, alloc) -> MoEModel:
    """New model whose layer-``l`` active set drops the first ``alloc[l]``
    experts of the pruning order.  The input model is untouched; weights are
    shared.  Applying to an already-pruned model intersects the masks."""
    pi = getattr(order, "pi", order)
    spec = model.spec
    if len(pi) != spec.layers:
        raise ValidationError(f"pruning order covers {len(pi)} layers, model has {spec.layers}")
    alloc = tuple(int(r) for r in alloc)
    if len(alloc) != spec.layers:
        raise FeasibilityError(f"allocation has {len(alloc)} entries, model has {spec.layers} layers")
    masks = []
    for layer, r in enumerate(alloc):
        n = spec.experts_per_layer[layer]
        k = spec.fanout[layer]
        if sorted(pi[layer]) != list(range(n)):
            raise ValidationError(f"pruning order for layer {layer} is not a permutation of 0..{n - 1}")
        if not (0 <= r <= n - k):
            raise FeasibilityError(f"layer {layer}: removing {r} of {n} experts leaves fewer than fanout {k}")
        mask = model.active_masks[layer].copy()
        mask[list(pi[layer][:r])] = False
        if int(mask.sum()) < k:
            raise FeasibilityError(f"layer {layer}: combined pruning leaves fewer than fanout {k} experts")
        mask.setflags(write=False)
        masks.append(mask)
    return dataclasses.replace(model, active_masks=tuple(masks))
