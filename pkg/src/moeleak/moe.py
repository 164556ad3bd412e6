"""Toy decoder-only Mixture-of-Experts model with instrumented routing.

The model exists to produce ground-truth execution footprints: the per-layer
expert load of a prefill pass and the per-token expert sequence of decoding.
Weights come from a seeded PRNG; nothing is trained.

Each layer does::

    u_t = rms_norm(h_t + w * mean(x_1..x_t))    # causal mean of input embeddings
    phi = W_gate @ u_t                          # affinity, no bias
    S_t = top-k mask of phi                     # ties -> lower expert index
    g   = softmax(phi) restricted to S_t
    h_t = u_t + sum_i g_i * expert_i(u_t)

Experts are run one after another in ascending index order, skipping experts
with no routed tokens, which is what the timing channels observe.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np


class ConfigError(ValueError):
    """Raised for an inconsistent model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_experts: int = 16
    top_k: int = 2
    hidden_dim: int = 64
    expert_dim: int = 128
    vocab_size: int = 4096
    seed: int = 0
    # abstract time units per linear phase: base_cost + tokens * per_token_cost
    base_cost: int = 12
    per_token_cost: int = 2
    # strength of the causal mean mixed into each layer input; larger values
    # make routing depend more on context than on the current token
    context_weight: float = 0.3

    @property
    def expert_linear_dims(self) -> tuple[int, int]:
        """(h_i, h_j): the wide expert dimension and the narrow model dimension."""
        return (self.expert_dim, self.hidden_dim)

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.num_experts < 1:
            raise ConfigError("num_experts must be >= 1")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(
                f"top_k must satisfy 1 <= k <= M, got k={self.top_k}, M={self.num_experts}"
            )
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        if self.expert_dim <= self.hidden_dim:
            raise ConfigError("expert_dim must exceed hidden_dim (down-projection is narrower)")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.base_cost < 0 or self.per_token_cost <= 0:
            raise ConfigError("cost model needs base_cost >= 0 and per_token_cost > 0")


PRESETS = {
    "toy": ModelConfig(),
    "lite-shape": ModelConfig(num_layers=26, num_experts=64, top_k=6, hidden_dim=32, expert_dim=64),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; known: {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class ExpertSelection:
    mask: np.ndarray        # (M,) uint8, exactly k ones
    active_set: np.ndarray  # sorted expert indices
    gates: np.ndarray       # (M,) float, zero outside active_set


@dataclass(frozen=True)
class ScheduleEntry:
    expert: int
    token_count: int
    durations: tuple[int, int, int]  # up, gate, down phases


# One layer's sequential expert loop.
LayerSchedule = list[ScheduleEntry]


@dataclass
class ExpertFootprint:
    """Ground-truth execution footprint.

    ``kind == "load"``: ``load`` has shape (L, M), counts of prompt tokens per expert.
    ``kind == "sequence"``: ``sequences`` has shape (T, L, M), one 0/1 mask per
    decoded token and layer.
    """

    kind: str
    load: np.ndarray | None = None
    sequences: np.ndarray | None = None

    @classmethod
    def from_load(cls, load) -> "ExpertFootprint":
        return cls("load", load=np.asarray(load, dtype=np.int64))

    @classmethod
    def from_sequences(cls, seq) -> "ExpertFootprint":
        return cls("sequence", sequences=np.asarray(seq, dtype=np.uint8))

    @property
    def num_layers(self) -> int:
        arr = self.load if self.kind == "load" else self.sequences
        return arr.shape[-2]

    @property
    def num_experts(self) -> int:
        arr = self.load if self.kind == "load" else self.sequences
        return arr.shape[-1]

    def __eq__(self, other):
        if not isinstance(other, ExpertFootprint) or self.kind != other.kind:
            return NotImplemented
        a, b = (self.load, other.load) if self.kind == "load" else (self.sequences, other.sequences)
        return a.shape == b.shape and bool(np.array_equal(a, b))


def silu(x):
    return x / (1.0 + np.exp(-x))


def rms_norm(x, eps=1e-6):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def select_experts(phi, k: int) -> ExpertSelection:
    """Top-k routing with softmax gates over the selected experts."""
    phi = np.asarray(phi, dtype=np.float64)
    m = phi.shape[-1]
    if not 1 <= k <= m:
        raise ValueError(f"k={k} must be in [1, {m}]")
    # stable sort on -phi keeps the lower index first among ties
    active = np.sort(np.argsort(-phi, kind="stable")[:k])
    mask = np.zeros(m, dtype=np.uint8)
    mask[active] = 1
    sel = phi[active]
    w = np.exp(sel - sel.max())
    gates = np.zeros(m)
    gates[active] = w / w.sum()
    return ExpertSelection(mask=mask, active_set=active, gates=gates)


def _topk_batch(phi, k):
    """Vectorised top-k for a (N, M) affinity matrix; returns (mask, gates)."""
    n, m = phi.shape
    order = np.argsort(-phi, axis=1, kind="stable")[:, :k]
    mask = np.zeros((n, m), dtype=np.uint8)
    rows = np.arange(n)[:, None]
    mask[rows, order] = 1
    sel = phi[rows, order]
    w = np.exp(sel - sel.max(axis=1, keepdims=True))
    gates = np.zeros((n, m))
    gates[rows, order] = w / w.sum(axis=1, keepdims=True)
    return mask, gates


@dataclass
class DecodeState:
    """Per-request cache: running sum of token embeddings for the context mixer."""

    context_sum: np.ndarray  # (d,)
    count: int
    tokens: list[int] = field(default_factory=list)

    def copy(self) -> "DecodeState":
        return DecodeState(self.context_sum.copy(), self.count, list(self.tokens))


class PrefillResult(NamedTuple):
    first_token: int
    footprint: ExpertFootprint
    schedules: list[LayerSchedule]
    state: DecodeState


class TeacherForcedTrace(NamedTuple):
    footprint: ExpertFootprint  # (T, L, M) sequences
    labels: np.ndarray          # (T,) token fed at each step


class MoEModel:
    """Immutable toy MoE decoder. Build with :func:`build_model`."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        c = config
        rng = np.random.default_rng(c.seed)
        d, h, m = c.hidden_dim, c.expert_dim, c.num_experts
        self.embed = rng.standard_normal((c.vocab_size, d))
        self.w_gate = rng.standard_normal((c.num_layers, m, d)) / np.sqrt(d)
        self.w_up = rng.standard_normal((c.num_layers, m, d, h)) / np.sqrt(d)
        self.w_gate_proj = rng.standard_normal((c.num_layers, m, d, h)) / np.sqrt(d)
        self.w_down = rng.standard_normal((c.num_layers, m, h, d)) / np.sqrt(h)
        self.w_out = rng.standard_normal((c.vocab_size, d)) / np.sqrt(d)
        for arr in (self.embed, self.w_gate, self.w_up, self.w_gate_proj, self.w_down, self.w_out):
            arr.setflags(write=False)

    # -- single pieces -----------------------------------------------------

    def affinity(self, u, layer: int):
        u = np.asarray(u, dtype=np.float64)
        if u.shape[-1] != self.config.hidden_dim:
            raise ValueError(f"hidden state has {u.shape[-1]} entries, expected {self.config.hidden_dim}")
        return u @ self.w_gate[layer].T

    def expert(self, layer: int, i: int, u):
        up = u @ self.w_up[layer, i]
        gate = u @ self.w_gate_proj[layer, i]
        return (silu(gate) * up) @ self.w_down[layer, i]

    def phase_durations(self, token_count: int) -> tuple[int, int, int]:
        d = self.config.base_cost + token_count * self.config.per_token_cost
        return (d, d, d)

    def moe_layer_forward(self, u_batch, selections, layer: int, zero_experts: bool = False):
        """Apply one MoE layer given precomputed routing.

        ``selections`` is either a list of :class:`ExpertSelection` or a
        ``(mask, gates)`` pair of (N, M) arrays. Returns the new hidden states
        and the layer's execution schedule.
        """
        u_batch = np.atleast_2d(np.asarray(u_batch, dtype=np.float64))
        if isinstance(selections, tuple):
            mask, gates = selections
        else:
            if len(selections) != len(u_batch):
                raise ValueError("need exactly one selection per token")
            mask = np.stack([s.mask for s in selections])
            gates = np.stack([s.gates for s in selections])
        if u_batch.shape[1] != self.config.hidden_dim:
            raise ValueError("hidden dimension mismatch")
        out = u_batch.copy()
        schedule: LayerSchedule = []
        counts = mask.sum(axis=0)
        for i in np.flatnonzero(counts):
            rows = np.flatnonzero(mask[:, i])
            if not zero_experts:
                out[rows] += gates[rows, i, None] * self.expert(layer, int(i), u_batch[rows])
            n = int(counts[i])
            schedule.append(ScheduleEntry(int(i), n, self.phase_durations(n)))
        return out, schedule

    # -- full passes ---------------------------------------------------------

    def _check_tokens(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("token sequence must be a non-empty 1-D list of ids")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError("token id out of range for this model's vocabulary")
        return ids

    def _forward(self, ids, state: DecodeState | None = None):
        """Run all layers over ``ids`` continuing from ``state``.

        Returns final hidden states, per-layer masks (L, N, M), schedules, and
        the updated state.
        """
        c = self.config
        h = self.embed[ids]
        n = len(ids)
        if state is None:
            state = DecodeState(np.zeros(c.hidden_dim), 0)
        state = state.copy()
        masks = np.zeros((c.num_layers, n, c.num_experts), dtype=np.uint8)
        all_gates = np.zeros((c.num_layers, n, c.num_experts))
        schedules = []
        denom = (state.count + np.arange(1, n + 1))[:, None]
        csum = np.cumsum(h, axis=0) + state.context_sum
        state.context_sum = csum[-1].copy()
        # the context is the running mean of the input embeddings; mixing in
        # the running mean of each layer's own state instead compounds over
        # depth and collapses deep-layer routing onto a few experts
        context = c.context_weight * csum / denom
        for layer in range(c.num_layers):
            u = rms_norm(h + context)
            mask, gates = _topk_batch(self.affinity(u, layer), c.top_k)
            h, sched = self.moe_layer_forward(u, (mask, gates), layer)
            masks[layer] = mask
            all_gates[layer] = gates
            schedules.append(sched)
        state.count += n
        state.tokens.extend(int(t) for t in ids)
        return h, masks, all_gates, schedules, state

    def _next_token(self, h_last):
        logits = self.w_out @ rms_norm(h_last)
        return int(np.argmax(logits))

    def prefill(self, prompt) -> PrefillResult:
        ids = self._check_tokens(prompt)
        h, masks, _, schedules, state = self._forward(ids)
        load = masks.sum(axis=1).astype(np.int64)
        return PrefillResult(self._next_token(h[-1]), ExpertFootprint.from_load(load), schedules, state)

    def decode_step(self, state: DecodeState, last_token: int):
        """Feed one token; returns (next token, per-layer selections, new state)."""
        ids = self._check_tokens([last_token])
        h, masks, gates, _, new_state = self._forward(ids, state)
        sels = [
            ExpertSelection(mask=masks[l, 0], active_set=np.flatnonzero(masks[l, 0]), gates=gates[l, 0])
            for l in range(self.config.num_layers)
        ]
        return self._next_token(h[-1]), sels, new_state

    def generate(self, prompt, max_len: int, stop_token: int | None = None):
        """Greedy decoding; returns (response ids, Sequence footprint).

        The footprint has one entry per decode step, i.e. per generated token
        that was fed back into the model.
        """
        pre = self.prefill(prompt)
        tokens = [pre.first_token]
        seqs = []
        state = pre.state
        while len(tokens) < max_len and tokens[-1] != stop_token:
            nxt, sels, state = self.decode_step(state, tokens[-1])
            seqs.append(np.stack([s.mask for s in sels]))
            tokens.append(nxt)
        c = self.config
        seq = np.stack(seqs) if seqs else np.zeros((0, c.num_layers, c.num_experts), np.uint8)
        return tokens, ExpertFootprint.from_sequences(seq)

    def teacher_forced_trace(self, prompt, response) -> TeacherForcedTrace:
        """Expert sequences observed when each response token is fed as decode input.

        The causal mixer makes a single pass over prompt+response equivalent
        to prefill followed by one decode step per response token.
        """
        p = self._check_tokens(prompt)
        r = self._check_tokens(response)
        _, masks, _, _, _ = self._forward(np.concatenate([p, r]))
        seq = masks[:, len(p):, :].transpose(1, 0, 2)
        return TeacherForcedTrace(ExpertFootprint.from_sequences(seq), r.copy())


def build_model(config: ModelConfig) -> MoEModel:
    return MoEModel(config)
