"""
Model Core - Decoder-only transformer with GLU feed-forward blocks
Exposes hidden states, attention patterns, GLU activations and QK/OV circuits,
and applies interventions and steering as overlays without touching weights
"""

import logging
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from core import numerics
from core.errors import ArgumentError, LengthError, ShapeError, VocabularyError
from traces.trace import ActivationTrace, CaptureField

logger = logging.getLogger("VerifScope.Model")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters"""

    n_layers: int = 6
    d_model: int = 128
    n_heads: int = 4
    d_head: int = 32
    d_glu: int = 256
    vocab_size: int = 1099
    max_seq_len: int = 256
    norm_eps: float = 1e-5

    def validate(self) -> "ModelConfig":
        counts = asdict(self)
        counts.pop("norm_eps")
        for name, value in counts.items():
            if int(value) < 1:
                raise ArgumentError(f"ModelConfig.{name} must be >= 1, got {value}")
        if self.n_heads * self.d_head != self.d_model:
            raise ArgumentError(
                f"n_heads * d_head must equal d_model ({self.n_heads} * {self.d_head} != {self.d_model})"
            )
        return self

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known).validate()


@dataclass(frozen=True, order=True)
class HeadId:
    """One attention head, rendered "L{layer}H{head}"."""

    layer: int
    head: int

    def __str__(self) -> str:
        return f"L{self.layer}H{self.head}"

    @classmethod
    def parse(cls, text: str) -> "HeadId":
        match = re.fullmatch(r"L(\d+)H(\d+)", text.strip())
        if not match:
            raise ArgumentError(f"Not a head id: {text!r}")
        return cls(int(match.group(1)), int(match.group(2)))

    def check(self, config: ModelConfig) -> None:
        if not (0 <= self.layer < config.n_layers and 0 <= self.head < config.n_heads):
            raise ArgumentError(f"Head {self} outside a model with {config.n_layers} layers x {config.n_heads} heads")


@dataclass(frozen=True)
class Steering:
    """Add alpha * unit(vector) to the residual stream after the listed blocks."""

    layers: Tuple[int, ...]
    vector: np.ndarray
    alpha: float
    start: int = 0  # first position that is steered


@dataclass
class ForwardOptions:
    """
    Per-call options of a forward pass or generation.

    plan is an intervention plan (anything with heads, glu_vectors and scale);
    plan_positions restricts it to a boolean mask over positions for forward(),
    gate decides per position during generate(); with neither, the plan is always on.
    """

    capture: FrozenSet[CaptureField] = frozenset()
    plan: Optional[object] = None
    plan_positions: Optional[np.ndarray] = None
    gate: Optional[Callable[[Sequence[int]], bool]] = None
    steer: Optional[Steering] = None


def expected_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Tensor names and shapes of a model with this configuration."""
    d, h, k, g = config.d_model, config.n_heads, config.d_head, config.d_glu
    shapes = {
        "embed": (d, config.vocab_size),
        "pos": (config.max_seq_len, d),
    }
    for layer in range(config.n_layers):
        p = f"layers.{layer}."
        shapes.update({
            p + "attn_norm": (d,),
            p + "w_q": (h, k, d),
            p + "w_k": (h, k, d),
            p + "w_v": (h, k, d),
            p + "w_o": (h, d, k),
            p + "glu_norm": (d,),
            p + "w_gate": (g, d),
            p + "w_up": (g, d),
            p + "w_out": (g, d),
        })
    shapes["final_norm"] = (d,)
    return shapes


class Weights:
    """
    All learned tensors of a model, keyed by name.
    The unembedding is embed.T (tied).
    """

    def __init__(self, config: ModelConfig, tensors: Dict[str, np.ndarray]):
        self.config = config.validate()
        shapes = expected_shapes(config)
        missing = sorted(set(shapes) - set(tensors))
        if missing:
            raise ShapeError(f"Missing tensors: {', '.join(missing)}")
        for name, shape in shapes.items():
            if tuple(tensors[name].shape) != shape:
                raise ShapeError(f"Tensor {name} has shape {tensors[name].shape}, expected {shape}")
        self.tensors = {name: tensors[name] for name in shapes}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def layer(self, layer: int, name: str) -> np.ndarray:
        return self.tensors[f"layers.{layer}.{name}"]

    @property
    def dtype(self):
        return self.tensors["embed"].dtype

    def items(self):
        return self.tensors.items()

    def copy(self) -> "Weights":
        return Weights(self.config, {n: t.copy() for n, t in self.tensors.items()})

    def astype(self, dtype) -> "Weights":
        return Weights(self.config, {n: t.astype(dtype) for n, t in self.tensors.items()})

    def zeros_like(self) -> "Weights":
        return Weights(self.config, {n: np.zeros_like(t) for n, t in self.tensors.items()})

    def with_tensors(self, replacements: Dict[str, np.ndarray]) -> "Weights":
        """Copy with some tensors replaced (used for weight surgery)."""
        tensors = dict(self.tensors)
        tensors.update(replacements)
        return Weights(self.config, tensors)

    def equals(self, other: "Weights") -> bool:
        """Bit-exact comparison."""
        return all(
            self.tensors[n].dtype == other.tensors[n].dtype
            and np.array_equal(self.tensors[n].view(np.uint8), other.tensors[n].view(np.uint8))
            for n in self.tensors
        )


def init_weights(config: ModelConfig, seed: int) -> Weights:
    """Scaled-uniform initialisation with gain 1/sqrt(d); norm scales start at one."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(config.d_model)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith("norm"):
            tensors[name] = np.ones(shape, dtype=numerics.DTYPE)
        else:
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(numerics.DTYPE)
    return Weights(config, tensors)


@dataclass
class LayerCache:
    """Intermediates of one block kept for the backward pass"""

    x_in: np.ndarray
    h: np.ndarray
    inv1: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    pattern: np.ndarray
    z: np.ndarray
    head_factor: Optional[np.ndarray]
    x_mid: np.ndarray
    h2: np.ndarray
    inv2: np.ndarray
    gate: np.ndarray
    up: np.ndarray
    glu_factor: Optional[np.ndarray]


@dataclass
class ForwardCache:
    tokens: List[int]
    layers: List[LayerCache] = field(default_factory=list)
    x_final: Optional[np.ndarray] = None
    hf: Optional[np.ndarray] = None
    invf: Optional[np.ndarray] = None


class DecodeState:
    """Private key/value cache of one generation"""

    def __init__(self, n_layers: int):
        self.keys: List[Optional[np.ndarray]] = [None] * n_layers
        self.values: List[Optional[np.ndarray]] = [None] * n_layers
        self.length = 0


class TransformerModel:
    """
    Pre-norm decoder-only transformer: x += Attn(norm(x)); x += GLU(norm(x));
    logits = embed.T @ final_norm(x). Learned absolute positions, no biases.
    """

    def __init__(self, weights: Weights):
        self.weights = weights
        self.config = weights.config
        self.scale = 1.0 / math.sqrt(self.config.d_head)

    # ------------------------------------------------------------------
    # Building blocks
    # ------------------------------------------------------------------

    def _norm(self, x: np.ndarray, name: str):
        return numerics.rms_norm(x, self.weights[name], self.config.norm_eps)

    def _project(self, layer: int, h: np.ndarray):
        """q, k, v for rows h (n, d), each (H, n, d_head)."""
        w = self.weights
        q = np.matmul(h[None, :, :], w.layer(layer, "w_q").transpose(0, 2, 1))
        k = np.matmul(h[None, :, :], w.layer(layer, "w_k").transpose(0, 2, 1))
        v = np.matmul(h[None, :, :], w.layer(layer, "w_v").transpose(0, 2, 1))
        return q, k, v

    def _attend(self, q: np.ndarray, keys: np.ndarray, values: np.ndarray, start: int):
        """Causal attention of query rows at absolute positions start.. over all keys."""
        n, total = q.shape[1], keys.shape[1]
        scores = np.matmul(q, keys.transpose(0, 2, 1)) * q.dtype.type(self.scale)
        query_pos = start + np.arange(n)[:, None]
        masked = np.arange(total)[None, :] > query_pos
        scores = np.where(masked[None, :, :], -np.inf, scores).astype(q.dtype, copy=False)
        pattern = numerics.softmax_rows(scores)
        return pattern, np.matmul(pattern, values)

    def _head_outputs(self, layer: int, z: np.ndarray) -> np.ndarray:
        """Per-head writes to the residual stream, (H, n, d)."""
        return np.matmul(z, self.weights.layer(layer, "w_o").transpose(0, 2, 1))

    def attention_head_forward(self, x: np.ndarray, head: HeadId):
        """
        Output and pattern of one head on (already normalised) layer input states

        Args:
            x: Layer input states, (T, d)
            head: Which head

        Returns:
            (output states (T, d), pattern (T, T))
        """
        head.check(self.config)
        x = np.asarray(x, dtype=self.weights.dtype)
        if x.shape[0] > self.config.max_seq_len:
            raise LengthError(f"Sequence of {x.shape[0]} exceeds max_seq_len {self.config.max_seq_len}")
        q, k, v = self._project(head.layer, x)
        pattern, z = self._attend(q, k, v, 0)
        out = self._head_outputs(head.layer, z)
        return out[head.head], pattern[head.head]

    def glu_forward(self, layer: int, x: np.ndarray):
        """
        GLU block on (already normalised) input

        Returns:
            (output, activations M) with M = silu(W_gate x) * (W_up x) and
            output = sum_j m_j v_j over rows v_j of W_out
        """
        x = np.asarray(x, dtype=self.weights.dtype)
        if x.shape[-1] != self.config.d_model:
            raise ShapeError(f"glu_forward expects d={self.config.d_model}, got {x.shape}")
        gate = x @ self.weights.layer(layer, "w_gate").T
        up = x @ self.weights.layer(layer, "w_up").T
        m = numerics.silu(gate) * up
        return m @ self.weights.layer(layer, "w_out"), m

    def glu_block(self, layer: int, resid_mid: np.ndarray):
        """GLU sublayer including its pre-norm, as applied inside forward()."""
        h2, _ = self._norm(resid_mid, f"layers.{layer}.glu_norm")
        return self.glu_forward(layer, h2)

    def final_normed(self, x: np.ndarray) -> np.ndarray:
        return self._norm(x, "final_norm")[0]

    def unembed(self, x: np.ndarray) -> np.ndarray:
        """Project (already normalised) states onto the vocabulary with embed.T."""
        return x @ self.weights["embed"]

    def ov_circuit(self, head: HeadId) -> np.ndarray:
        """W_O W_V, a d x d matrix."""
        head.check(self.config)
        return self.weights.layer(head.layer, "w_o")[head.head] @ self.weights.layer(head.layer, "w_v")[head.head]

    def qk_circuit(self, head: HeadId) -> np.ndarray:
        """W_Q^T W_K, a d x d matrix."""
        head.check(self.config)
        return self.weights.layer(head.layer, "w_q")[head.head].T @ self.weights.layer(head.layer, "w_k")[head.head]

    @property
    def heads(self) -> List[HeadId]:
        return [HeadId(l, h) for l in range(self.config.n_layers) for h in range(self.config.n_heads)]

    # ------------------------------------------------------------------
    # Overlays
    # ------------------------------------------------------------------

    def _overlay_scales(self, plan) -> Dict[int, Tuple[Optional[np.ndarray], Optional[np.ndarray]]]:
        """Per layer: multipliers for head outputs (H,) and GLU neurons (d_glu,)."""
        if plan is None or getattr(plan, "is_noop", False):
            return {}
        dtype = self.weights.dtype
        scales: Dict[int, list] = {}
        for head in plan.heads:
            head.check(self.config)
            entry = scales.setdefault(head.layer, [None, None])
            if entry[0] is None:
                entry[0] = np.ones(self.config.n_heads, dtype=dtype)
            entry[0][head.head] = plan.scale
        for vec in plan.glu_vectors:
            entry = scales.setdefault(vec.layer, [None, None])
            if entry[1] is None:
                entry[1] = np.ones(self.config.d_glu, dtype=dtype)
            entry[1][vec.row] = plan.scale
        return {layer: (e[0], e[1]) for layer, e in scales.items()}

    @staticmethod
    def _gated(scale: np.ndarray, active: Optional[np.ndarray]) -> np.ndarray:
        """Broadcast a per-unit scale over positions; inactive positions get 1."""
        if active is None:
            return scale[:, None] if scale.ndim == 1 else scale
        return np.where(active[None, :], scale[:, None], scale.dtype.type(1.0))

    # ------------------------------------------------------------------
    # Forward
    # ------------------------------------------------------------------

    def _check_tokens(self, tokens: Sequence[int], start: int = 0) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            bad = int(ids[(ids < 0) | (ids >= self.config.vocab_size)][0])
            raise VocabularyError(f"Token id {bad} outside vocabulary of size {self.config.vocab_size}")
        if start + ids.size > self.config.max_seq_len:
            raise LengthError(f"Sequence of {start + ids.size} tokens exceeds max_seq_len {self.config.max_seq_len}")
        return ids

    def _run(
        self,
        ids: np.ndarray,
        start: int,
        opts: ForwardOptions,
        active: Optional[np.ndarray],
        state: Optional[DecodeState] = None,
        cache: Optional[ForwardCache] = None,
        trace: Optional[ActivationTrace] = None,
    ) -> np.ndarray:
        """Process rows at absolute positions start..start+n-1; returns their final states."""
        w = self.weights
        overlay = self._overlay_scales(opts.plan)
        steer = opts.steer
        steer_rows = None
        if steer is not None:
            unit = np.asarray(steer.vector, dtype=np.float64)
            n = np.linalg.norm(unit)
            unit = (unit / n if n > 0 else unit).astype(w.dtype)
            steer_delta = (w.dtype.type(steer.alpha) * unit)
            positions = start + np.arange(len(ids))
            steer_rows = positions >= steer.start

        x = w["embed"][:, ids].T + w["pos"][start:start + len(ids)]
        for layer in range(self.config.n_layers):
            p = f"layers.{layer}."
            x_in = x
            h, inv1 = self._norm(x, p + "attn_norm")
            q, k, v = self._project(layer, h)
            if state is not None and state.keys[layer] is not None:
                keys = np.concatenate([state.keys[layer], k], axis=1)
                values = np.concatenate([state.values[layer], v], axis=1)
            else:
                keys, values = k, v
            if state is not None:
                state.keys[layer], state.values[layer] = keys, values
            pattern, z = self._attend(q, keys, values, start)
            out_h = self._head_outputs(layer, z)
            head_scale, glu_scale = overlay.get(layer, (None, None))
            head_factor = None
            if head_scale is not None:
                head_factor = self._gated(head_scale, active)
                out_h = out_h * head_factor[:, :, None]
            x = x + np.sum(out_h, axis=0)
            x_mid = x
            h2, inv2 = self._norm(x, p + "glu_norm")
            gate = h2 @ w.layer(layer, "w_gate").T
            up = h2 @ w.layer(layer, "w_up").T
            m = numerics.silu(gate) * up
            glu_factor = None
            m_eff = m
            if glu_scale is not None:
                glu_factor = self._gated(glu_scale, active).T
                m_eff = m * glu_factor
            x = x + m_eff @ w.layer(layer, "w_out")
            if steer_rows is not None and layer in steer.layers:
                x = x + np.where(steer_rows[:, None], steer_delta[None, :], w.dtype.type(0.0))
            if cache is not None:
                cache.layers.append(LayerCache(
                    x_in=x_in, h=h, inv1=inv1, q=q, k=k, v=v, pattern=pattern, z=z,
                    head_factor=head_factor, x_mid=x_mid, h2=h2, inv2=inv2, gate=gate, up=up,
                    glu_factor=glu_factor,
                ))
            if trace is not None:
                if trace.hidden is not None:
                    trace.hidden[layer] = x
                    trace.resid_mid[layer] = x_mid
                if trace.attention is not None:
                    trace.attention[layer] = pattern
                if trace.glu is not None:
                    trace.glu[layer] = m
        if state is not None:
            state.length = start + len(ids)
        return x

    def _empty_trace(self, ids: np.ndarray, capture: FrozenSet[CaptureField]) -> ActivationTrace:
        c, t, dtype = self.config, len(ids), self.weights.dtype
        trace = ActivationTrace(tokens=[int(i) for i in ids])
        if CaptureField.HIDDEN_STATES in capture:
            trace.hidden = np.zeros((c.n_layers, t, c.d_model), dtype=dtype)
            trace.resid_mid = np.zeros((c.n_layers, t, c.d_model), dtype=dtype)
        if CaptureField.ATTENTION_PATTERNS in capture:
            trace.attention = np.zeros((c.n_layers, c.n_heads, t, t), dtype=dtype)
        if CaptureField.GLU_ACTIVATIONS in capture:
            trace.glu = np.zeros((c.n_layers, t, c.d_glu), dtype=dtype)
        return trace

    def forward(self, tokens: Sequence[int], opts: Optional[ForwardOptions] = None):
        """
        Full forward pass over a token sequence

        Args:
            tokens: Token ids
            opts: Capture selection, intervention plan and steering

        Returns:
            (logits (T, V), ActivationTrace or None)
        """
        opts = opts or ForwardOptions()
        ids = self._check_tokens(tokens)
        if opts.steer is not None:
            for layer in opts.steer.layers:
                if not 0 <= layer < self.config.n_layers:
                    raise ArgumentError(f"Steering layer {layer} outside model depth {self.config.n_layers}")
        active = None if opts.plan_positions is None else np.asarray(opts.plan_positions, dtype=bool)
        trace = self._empty_trace(ids, opts.capture) if opts.capture else None
        x = self._run(ids, 0, opts, active, trace=trace)
        logits = self.unembed(self.final_normed(x))
        return logits, trace

    def forward_with_cache(self, tokens: Sequence[int]):
        """Forward pass keeping every intermediate needed by manual backpropagation."""
        ids = self._check_tokens(tokens)
        cache = ForwardCache(tokens=[int(i) for i in ids])
        x = self._run(ids, 0, ForwardOptions(), None, cache=cache)
        hf, invf = self._norm(x, "final_norm")
        cache.x_final, cache.hf, cache.invf = x, hf, invf
        return self.unembed(hf), cache

    def generate(
        self,
        prompt: Sequence[int],
        max_new: int,
        opts: Optional[ForwardOptions] = None,
        stop_token: Optional[int] = None,
    ) -> List[int]:
        """
        Greedy decoding with a private key/value cache

        Args:
            prompt: Prompt token ids
            max_new: Maximum number of generated tokens
            opts: Plan (gated per position by opts.gate) and steering
            stop_token: Token that ends generation (kept in the output)

        Returns:
            Prompt followed by the generated tokens
        """
        opts = opts or ForwardOptions()
        tokens = [int(t) for t in prompt]
        if max_new <= 0:
            return tokens
        if len(tokens) + max_new > self.config.max_seq_len:
            raise LengthError(
                f"Prompt of {len(tokens)} tokens plus {max_new} new exceeds max_seq_len {self.config.max_seq_len}"
            )
        if opts.steer is not None:
            for layer in opts.steer.layers:
                if not 0 <= layer < self.config.n_layers:
                    raise ArgumentError(f"Steering layer {layer} outside model depth {self.config.n_layers}")
        ids = self._check_tokens(tokens)
        state = DecodeState(self.config.n_layers)
        active = None
        if opts.plan is not None and opts.gate is not None:
            active = np.array([opts.gate(tokens[: i + 1]) for i in range(len(tokens))], dtype=bool)
        x = self._run(ids, 0, opts, active, state=state)
        for _ in range(max_new):
            logits = self.unembed(self.final_normed(x[-1:]))
            nxt = int(np.argmax(logits[0]))
            tokens.append(nxt)
            if stop_token is not None and nxt == stop_token:
                break
            if len(tokens) >= self.config.max_seq_len:
                break
            step_active = None
            if opts.plan is not None and opts.gate is not None:
                step_active = np.array([opts.gate(tokens)], dtype=bool)
            x = self._run(np.array([nxt]), state.length, opts, step_active, state=state)
        return tokens
