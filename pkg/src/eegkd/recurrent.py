"""Stacked (bi)directional LSTM student with hand-written BPTT.

Gate blocks inside ``W`` (4H x D), ``U`` (4H x H) and ``b`` (4H) are ordered
``[i, f, g, o]``. Parameters live in one ordered ``dict`` so the optimizer and
the checkpoint writer can treat them uniformly; names are::

    l{layer}.{fw|bw}.{W|U|b}, head.W, head.b

Recurrent dropout is variational: one Bernoulli mask per sequence, layer and
direction, applied to the hidden state entering the recurrent product and
reused at every timestep.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError, NumericError, ShapeError, StateError
from .numerics import DTYPE, sigmoid

DIRECTIONS = ("fw", "bw")


@dataclass(frozen=True)
class StackConfig:
    depth: int = 2
    hidden: int = 64
    bidirectional: bool = True
    recurrent_dropout: float = 0.5
    num_classes: int = 40
    input_channels: int = 128

    def __post_init__(self):
        if self.depth not in (1, 2, 3, 4):
            raise DomainError(f"depth must be in 1..4, got {self.depth}")
        if self.hidden < 1 or self.num_classes < 1 or self.input_channels < 1:
            raise DomainError("hidden, num_classes and input_channels must be positive")
        if not 0.0 <= self.recurrent_dropout < 1.0:
            raise DomainError(f"recurrent_dropout must be in [0, 1), got {self.recurrent_dropout}")

    @property
    def directions(self) -> tuple[str, ...]:
        return DIRECTIONS if self.bidirectional else DIRECTIONS[:1]

    @property
    def feature_dim(self) -> int:
        return self.hidden * len(self.directions)

    def layer_input_dim(self, layer: int) -> int:
        return self.input_channels if layer == 0 else self.feature_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> StackConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


@dataclass
class LstmCellParams:
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    @property
    def hidden(self) -> int:
        return self.U.shape[1]


@dataclass
class LstmStack:
    config: StackConfig
    params: dict[str, np.ndarray]

    def cell(self, layer: int, direction: str) -> LstmCellParams:
        p = f"l{layer}.{direction}."
        return LstmCellParams(self.params[p + "W"], self.params[p + "U"], self.params[p + "b"])

    @property
    def head_W(self) -> np.ndarray:
        return self.params["head.W"]

    @property
    def head_b(self) -> np.ndarray:
        return self.params["head.b"]

    def copy(self) -> LstmStack:
        return LstmStack(self.config, {k: v.copy() for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def param_shapes(config: StackConfig) -> dict[str, tuple[int, ...]]:
    H = config.hidden
    shapes = {}
    for layer in range(config.depth):
        D = config.layer_input_dim(layer)
        for d in config.directions:
            shapes[f"l{layer}.{d}.W"] = (4 * H, D)
            shapes[f"l{layer}.{d}.U"] = (4 * H, H)
            shapes[f"l{layer}.{d}.b"] = (4 * H,)
    shapes["head.W"] = (config.feature_dim, config.num_classes)
    shapes["head.b"] = (config.num_classes,)
    return shapes


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


def init_stack(config: StackConfig, seed: int) -> LstmStack:
    """Glorot-uniform weights, zero biases except the forget gate (1.0)."""
    rng = np.random.default_rng(seed)
    H = config.hidden
    params = {}
    for name, shape in param_shapes(config).items():
        kind = name.rsplit(".", 1)[1]
        if name == "head.W":
            params[name] = _glorot(rng, shape[0], shape[1], shape)
        elif kind in ("W", "U"):
            params[name] = _glorot(rng, shape[1], shape[0], shape)
        else:
            b = np.zeros(shape, dtype=DTYPE)
            if name != "head.b":
                b[H:2 * H] = 1.0
            params[name] = b
    return LstmStack(config, params)


def apply_recurrent_dropout(h, mask, p: float) -> np.ndarray:
    """Inverted dropout: keep where ``mask`` is 1 and rescale by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {p}")
    return np.asarray(h, dtype=DTYPE) * np.asarray(mask, dtype=DTYPE) / (1.0 - p)


def _cell_step(z_x, h_in, c_prev, U, H):
    z = z_x + h_in @ U.T
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = sigmoid(z[..., 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return o * tc, c, (i, f, g, o, tc)


def cell_forward(x_t, h_prev, c_prev, p: LstmCellParams):
    """One LSTM step. Returns ``(h, c, gate_cache)`` where the cache is
    ``(i, f, g, o, tanh(c))``."""
    x_t = np.asarray(x_t, dtype=DTYPE)
    h_prev = np.asarray(h_prev, dtype=DTYPE)
    c_prev = np.asarray(c_prev, dtype=DTYPE)
    H = p.hidden
    if x_t.shape[-1] != p.W.shape[1] or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ShapeError(
            f"cell expects input {p.W.shape[1]} / state {H}, got "
            f"{x_t.shape[-1]} / {h_prev.shape[-1]} / {c_prev.shape[-1]}"
        )
    if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(h_prev)) and np.all(np.isfinite(c_prev))):
        raise NumericError("non-finite input to LSTM cell")
    return _cell_step(x_t @ p.W.T + p.b, h_prev, c_prev, p.U, H)


@dataclass
class _DirectionCache:
    x: np.ndarray        # (B, T, D) input in processing order
    h_in: np.ndarray     # (B, T, H) masked/scaled previous hidden state fed to U
    c_prev: np.ndarray   # (B, T, H)
    gates: np.ndarray    # (B, T, 4H) post-activation i, f, g, o
    tanh_c: np.ndarray   # (B, T, H)
    scale: np.ndarray    # (B, H) mask / (1 - p), ones when dropout is off


@dataclass
class ForwardTrace:
    config: StackConfig
    caches: list[dict[str, _DirectionCache]] = field(default_factory=list)
    features: np.ndarray | None = None
    logits: np.ndarray | None = None
    single: bool = False


def _run_direction(x, p: LstmCellParams, scale, keep: bool):
    B, T, _ = x.shape
    H = p.hidden
    zx = (x.reshape(B * T, -1) @ p.W.T).reshape(B, T, 4 * H) + p.b
    h = np.zeros((B, H), dtype=DTYPE)
    c = np.zeros((B, H), dtype=DTYPE)
    out = np.empty((B, T, H), dtype=DTYPE)
    if keep:
        h_in_all = np.empty((B, T, H), dtype=DTYPE)
        c_prev_all = np.empty((B, T, H), dtype=DTYPE)
        gates = np.empty((B, T, 4 * H), dtype=DTYPE)
        tanh_c = np.empty((B, T, H), dtype=DTYPE)
    for t in range(T):
        h_in = h * scale
        c_prev = c
        h, c, (i, f, g, o, tc) = _cell_step(zx[:, t], h_in, c_prev, p.U, H)
        out[:, t] = h
        if keep:
            h_in_all[:, t] = h_in
            c_prev_all[:, t] = c_prev
            gates[:, t, :H] = i
            gates[:, t, H:2 * H] = f
            gates[:, t, 2 * H:3 * H] = g
            gates[:, t, 3 * H:] = o
            tanh_c[:, t] = tc
    cache = _DirectionCache(x, h_in_all, c_prev_all, gates, tanh_c, scale) if keep else None
    return out, cache


def dropout_scales(config: StackConfig, batch: int, seed) -> list[dict[str, np.ndarray]]:
    """Draw the per-sequence recurrent dropout scales for a training pass."""
    p = config.recurrent_dropout
    rng = np.random.default_rng(seed)
    scales = []
    for _ in range(config.depth):
        per_dir = {}
        for d in config.directions:
            if p > 0:
                mask = (rng.random((batch, config.hidden)) >= p).astype(DTYPE)
                per_dir[d] = apply_recurrent_dropout(np.ones_like(mask), mask, p)
            else:
                per_dir[d] = np.ones((batch, config.hidden), dtype=DTYPE)
        scales.append(per_dir)
    return scales


def forward_batch(x, stack: LstmStack, training: bool = False, seed=0, *, return_sequence: bool = False):
    """Run a batch ``x`` of shape (B, T, C).

    Returns ``(logits, features, trace)``; ``trace`` is None unless training.
    With ``return_sequence`` the final layer's per-timestep outputs (B, T, F)
    are returned in place of the trace.
    """
    cfg = stack.config
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3 or x.shape[2] != cfg.input_channels:
        raise ShapeError(f"expected (batch, timesteps, {cfg.input_channels}) input, got {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError("signal has no timesteps")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite values in input signal")
    B = x.shape[0]
    H = cfg.hidden
    if training:
        scales = dropout_scales(cfg, B, seed)
    else:
        ones = np.ones((B, H), dtype=DTYPE)
        scales = [{d: ones for d in cfg.directions} for _ in range(cfg.depth)]
    trace = ForwardTrace(cfg) if training else None
    layer_in = x
    for layer in range(cfg.depth):
        outs = []
        caches = {}
        for d in cfg.directions:
            seq = layer_in if d == "fw" else layer_in[:, ::-1]
            out, cache = _run_direction(seq, stack.cell(layer, d), scales[layer][d], training)
            outs.append(out if d == "fw" else out[:, ::-1])
            caches[d] = cache
        if training:
            trace.caches.append(caches)
        layer_in = np.concatenate(outs, axis=2) if len(outs) > 1 else outs[0]
    # forward half: last timestep; backward half: its final state sits at t=0
    features = layer_in[:, -1, :H]
    if cfg.bidirectional:
        features = np.concatenate([features, layer_in[:, 0, H:]], axis=1)
    logits = features @ stack.head_W + stack.head_b
    if training:
        trace.features = features
        trace.logits = logits
    if return_sequence:
        return logits, features, layer_in
    return logits, features, trace


def stack_forward(signal, stack: LstmStack, training: bool = False, seed=0):
    """Forward one (timesteps x channels) signal. Returns ``(logits, features, trace)``."""
    signal = np.asarray(signal, dtype=DTYPE)
    if signal.ndim != 2 or signal.shape[1] != stack.config.input_channels:
        raise ShapeError(
            f"signal has shape {signal.shape}, stack expects {stack.config.input_channels} channels"
        )
    logits, features, trace = forward_batch(signal[None], stack, training, seed)
    if trace is not None:
        trace.single = True
    return logits[0], features[0], trace


def sequence_outputs(signal, stack: LstmStack) -> np.ndarray:
    """Final-layer per-timestep outputs (timesteps x feature_dim), inference mode."""
    _, _, seq = forward_batch(np.asarray(signal, dtype=DTYPE)[None], stack, return_sequence=True)
    return seq[0]


def _backward_direction(cache: _DirectionCache, d_out, p: LstmCellParams):
    """BPTT through one direction. ``d_out`` is (B, T, H) in processing order."""
    B, T, H = d_out.shape
    gates = cache.gates
    dz_all = np.empty((B, T, 4 * H), dtype=DTYPE)
    dh_next = np.zeros((B, H), dtype=DTYPE)
    dc_next = np.zeros((B, H), dtype=DTYPE)
    for t in range(T - 1, -1, -1):
        i = gates[:, t, :H]
        f = gates[:, t, H:2 * H]
        g = gates[:, t, 2 * H:3 * H]
        o = gates[:, t, 3 * H:]
        tc = cache.tanh_c[:, t]
        dh = d_out[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dz_all[:, t]
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * cache.c_prev[:, t] * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = (dz @ p.U) * cache.scale
    flat = dz_all.reshape(B * T, 4 * H)
    dW = flat.T @ cache.x.reshape(B * T, -1)
    dU = flat.T @ cache.h_in.reshape(B * T, H)
    db = flat.sum(axis=0)
    dx = (flat @ p.W).reshape(B, T, -1)
    return dW, dU, db, dx


def stack_backward(trace: ForwardTrace | None, grad_logits, stack: LstmStack) -> dict[str, np.ndarray]:
    """Exact parameter gradients given dLoss/dlogits, reusing the trace's masks."""
    if trace is None or trace.logits is None:
        raise StateError("stack_backward needs a trace from a training-mode forward pass")
    cfg = stack.config
    if cfg != trace.config:
        raise StateError("trace was produced by a different stack configuration")
    g = np.asarray(grad_logits, dtype=DTYPE)
    if g.ndim == 1:
        g = g[None]
    if g.shape != trace.logits.shape:
        raise ShapeError(f"grad_logits shape {g.shape} does not match logits {trace.logits.shape}")
    H = cfg.hidden
    grads = {}
    grads["head.W"] = trace.features.T @ g
    grads["head.b"] = g.sum(axis=0)
    d_feat = g @ stack.head_W.T
    B, T = trace.caches[0]["fw"].x.shape[:2]
    # gradient w.r.t. the current layer's per-timestep outputs, original time order
    d_layer = np.zeros((B, T, cfg.feature_dim), dtype=DTYPE)
    d_layer[:, -1, :H] = d_feat[:, :H]
    if cfg.bidirectional:
        d_layer[:, 0, H:] = d_feat[:, H:]
    for layer in range(cfg.depth - 1, -1, -1):
        d_in = None
        for k, d in enumerate(cfg.directions):
            part = d_layer[:, :, k * H:(k + 1) * H]
            cache = trace.caches[layer][d]
            if d == "bw":
                part = part[:, ::-1]
            dW, dU, db, dx = _backward_direction(cache, part, stack.cell(layer, d))
            grads[f"l{layer}.{d}.W"] = dW
            grads[f"l{layer}.{d}.U"] = dU
            grads[f"l{layer}.{d}.b"] = db
            if d == "bw":
                dx = dx[:, ::-1]
            d_in = dx if d_in is None else d_in + dx
        d_layer = d_in
    return {name: grads[name] for name in stack.params}
