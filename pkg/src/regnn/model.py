"""Recursive graph network over a text graph.

Every layer reads only layer ``l-1`` state: neighbour attention produces an
aggregate per node, an LSTM-style cell turns it into the next hidden state,
and a graph-level node pools the previous layer through a softmax over
per-node gates. All node rows are processed together; the per-node
functions (:func:`aggregate`, :func:`update_node`) run the same code on a
single row.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, IngestionError, NumericError, VocabLookupError
from .tensor import Tensor
from .textgraph import MAX_TOKENS, TextGraph

MAGIC = b"REGNN1"
INIT_SCHEME = "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero"

_UPDATE = ("W_i", "W_f", "W_o", "W_u")
_GATE_BIAS = ("b_i", "b_f", "b_o", "b_u")
_GRAPH_GATES = (("W_g", "b_g"), ("W_fg", "b_fg"), ("W_og", "b_og"))


@dataclass(frozen=True)
class AblationFlags:
    """Which mechanisms are switched on; all on is the full model."""

    lstm: bool = True
    attention: bool = True
    global_node: bool = True

    @property
    def tag(self) -> str:
        off = [name for name, on in (("lstm", self.lstm), ("attention", self.attention), ("global", self.global_node)) if not on]
        return "full" if not off else "no-" + "-no-".join(off)


FULL = AblationFlags()


@dataclass
class ModelConfig:
    vocab_size: int
    n_labels: int
    hidden: int = 300
    task: str = "single"
    positions: bool = True
    max_positions: int = MAX_TOKENS
    variant: AblationFlags = field(default_factory=AblationFlags)
    shared_layers: bool = True
    layers: int = 6
    max_labels: int = 8

    def __post_init__(self):
        if isinstance(self.variant, dict):
            self.variant = AblationFlags(**self.variant)
        if self.task not in ("single", "multi"):
            raise ConfigError(f"task must be 'single' or 'multi', got {self.task!r}")
        if self.task == "single" and self.n_labels < 2:
            raise ConfigError("a single-label head needs at least 2 classes")
        for name in ("vocab_size", "n_labels", "hidden", "layers", "max_labels", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams:
    """Named parameter tensors plus the configuration that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def __iter__(self):
        return iter(self.tensors.values())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def layer(self, l: int) -> dict[str, Tensor]:
        """Parameter view for layer ``l`` (1-based); identical for every layer when shared."""
        if self.config.shared_layers:
            return self.tensors
        suffix = f"@{l}"
        view = dict(self.tensors)
        for name, t in self.tensors.items():
            if name.endswith(suffix):
                view[name[: -len(suffix)]] = t
        return view

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.tensors.items()},
        )

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def check_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"parameter {name} is not finite")


def _shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.hidden
    v = cfg.variant
    parts = 4 if v.global_node else 3
    shapes: dict[str, tuple[int, ...]] = {"E_word": (cfg.vocab_size, d)}
    if cfg.positions:
        shapes["E_pos"] = (cfg.max_positions, d)
    layer: dict[str, tuple[int, ...]] = {}
    gates = _UPDATE if v.lstm else ("W_u",)
    for w, b in zip(_UPDATE, _GATE_BIAS):
        if w in gates:
            layer[w] = (parts * d, d)
            layer[b] = (d,)
    layer["W_n"] = (parts * d, d)
    layer["b_n"] = (d,)
    layer["u_n"] = (d,)
    layer["W_a"] = (d, d)
    layer["u_a"] = (d,)
    if v.global_node:
        for w, b in _GRAPH_GATES:
            layer[w] = (2 * d, d)
            layer[b] = (d,)
    if cfg.shared_layers:
        shapes.update(layer)
    else:
        for l in range(1, cfg.layers + 1):
            shapes.update({f"{k}@{l}": s for k, s in layer.items()})
    k = cfg.n_labels
    if cfg.task == "single":
        shapes["W_out"] = (d, k)
    else:
        shapes["E_lab"] = (k + 2, d)
        for w, b in zip(_UPDATE, _GATE_BIAS):
            shapes["dec_" + w] = (2 * d, d)
            shapes["dec_" + b] = (d,)
        shapes["W_att"] = (d, d)
        shapes["W_dec"] = (2 * d, k + 1)
        shapes["b_dec"] = (k + 1,)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """Uniform ``±1/sqrt(fan_in)`` weights, zero biases."""
    tensors = {}
    for name, shape in _shapes(config).items():
        base = name.split("@")[0]
        if base.startswith("b_") or base.startswith("dec_b_"):
            data = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 and not base.startswith("E_") else config.hidden
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return ModelParams(config, tensors)


@dataclass
class LayerState:
    """Node and graph-level state after layer ``layer``.

    ``g``/``cg`` are ``None`` when the graph-level node is ablated. The
    attention fields record what produced this state, for diagnostics.
    """

    H: Tensor
    C: Tensor
    g: Tensor | None
    cg: Tensor | None
    layer: int
    neighbor_scores: np.ndarray | None = None
    pool_scores: np.ndarray | None = None
    gate_weights: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.H.shape[0]


def _row_of(g: Tensor, rows: int) -> Tensor:
    return T.tile_rows(g, rows)


def _pick(t: Tensor, rows) -> Tensor:
    return t if rows is None else T.gather(t, rows)


def embed(graph: TextGraph, params: ModelParams) -> tuple[Tensor, Tensor | None]:
    """Word embeddings ``X`` and position embeddings of the graph's nodes."""
    ids = np.asarray(graph.token_ids, dtype=np.intp)
    vocab = params["E_word"].shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise VocabLookupError(f"token id outside vocabulary of size {vocab}")
    X = T.gather(params["E_word"], ids)
    P = None
    if params.config.positions:
        pos = np.minimum(np.asarray(graph.positions, dtype=np.intp), params.config.max_positions - 1)
        P = T.gather(params["E_pos"], pos)
    return X, P


def _aggregate_rows(rows, state: LayerState, X: Tensor, P: Tensor | None, graph: TextGraph, p: dict, variant: AblationFlags):
    idx, mask = graph.padded()
    if rows is not None:
        idx, mask = idx[rows], mask[rows]
    r, k = idx.shape
    H = state.H
    if variant.attention:
        PH = T.add(H, P) if P is not None else H
        left = [_pick(PH, rows), _pick(X, rows)]
        if variant.global_node:
            left.append(_row_of(state.g, r))
        d = H.shape[1]
        Wn = p["W_n"]
        width = Wn.shape[0]
        W_left = T.gather(Wn, slice(0, width - d))
        W_right = T.gather(Wn, slice(width - d, width))
        A = T.add(T.matmul(T.concat(left, axis=1), W_left), p["b_n"])
        B = T.matmul(PH, W_right)
        pre = T.add(T.reshape(A, (r, 1, d)), T.gather(B, idx))
        alpha = T.matmul(T.tanh(pre), p["u_n"])
        scores = T.softmax(alpha, axis=1, mask=mask)
    else:
        deg = mask.sum(axis=1, keepdims=True)
        scores = T.Tensor(np.where(mask, 1.0 / np.maximum(deg, 1), 0.0).astype(H.dtype))
    N = T.total(T.mul(T.reshape(scores, (r, k, 1)), T.gather(H, idx)), axis=1)
    return N, scores.data


def _update_rows(rows, state: LayerState, X: Tensor, N: Tensor, p: dict, variant: AblationFlags):
    r = state.size if rows is None else len(rows)
    parts = [_pick(state.H, rows), _pick(X, rows)]
    if variant.global_node:
        parts.append(_row_of(state.g, r))
    parts.append(N)
    z = T.concat(parts, axis=1)

    def lin(w, b):
        return T.add(T.matmul(z, p[w]), p[b])

    if not variant.lstm:
        h = T.tanh(lin("W_u", "b_u"))
        return h, h
    i = T.sigmoid(lin("W_i", "b_i"))
    f = T.sigmoid(lin("W_f", "b_f"))
    o = T.sigmoid(lin("W_o", "b_o"))
    u = T.tanh(lin("W_u", "b_u"))
    c = T.add(T.mul(f, _pick(state.C, rows)), T.mul(i, u))
    h = T.mul(o, T.tanh(c))
    return h, c


def attentive_pool(H: Tensor, p: dict) -> tuple[Tensor, np.ndarray]:
    """Attention-weighted mean of the rows of ``H``; returns ``(h_bar (d,), scores (m,))``."""
    alpha = T.matmul(T.tanh(T.matmul(H, p["W_a"])), p["u_a"])
    scores = T.softmax(alpha)
    hbar = T.reshape(T.matmul(T.reshape(scores, (1, -1)), H), (-1,))
    return hbar, scores.data


def _global_step(state: LayerState, p: dict):
    H, C = state.H, state.C
    m = H.shape[0]
    hbar, pool = attentive_pool(H, p)
    g = T.reshape(state.g, (1, -1))
    gq = T.concat([g, T.reshape(hbar, (1, -1))], axis=1)
    fg = T.sigmoid(T.add(T.matmul(gq, p["W_g"]), p["b_g"]))
    o = T.sigmoid(T.add(T.matmul(gq, p["W_og"]), p["b_og"]))
    fi = T.sigmoid(T.add(T.matmul(T.concat([_row_of(state.g, m), H], axis=1), p["W_fg"]), p["b_fg"]))
    F = T.softmax(T.concat([fi, fg], axis=0), axis=0)
    cells = T.concat([C, T.reshape(state.cg, (1, -1))], axis=0)
    cg = T.total(T.mul(F, cells), axis=0)
    gnew = T.mul(T.reshape(o, (-1,)), T.tanh(cg))
    return gnew, cg, pool, F.data


def _check_variant(params: ModelParams, variant: AblationFlags) -> None:
    has_global = "W_g" in params or "W_g@1" in params
    if variant.global_node != has_global:
        raise ConfigError("variant.global_node does not match the parameter shapes")
    if variant.lstm and not ("W_i" in params or "W_i@1" in params):
        raise ConfigError("LSTM variant requested but parameters were built without gates")


def init_states(graph: TextGraph, params: ModelParams, variant: AblationFlags | None = None) -> LayerState:
    """Layer-0 state: ``h = x``, zero cells, graph node from one global update."""
    variant = variant or params.config.variant
    _check_variant(params, variant)
    if graph.size < 1:
        raise ContractError("graph has no nodes")
    X, _ = embed(graph, params)
    d = X.shape[1]
    dt = X.dtype
    C = X if not variant.lstm else Tensor(np.zeros_like(X.data))
    state = LayerState(X, C, None, None, 0)
    if variant.global_node:
        state.g = Tensor(np.zeros(d, dtype=dt))
        state.cg = Tensor(np.zeros(d, dtype=dt))
        state.g, state.cg, state.pool_scores, state.gate_weights = _global_step(state, params.layer(1))
    return state


def aggregate(i: int, state: LayerState, graph: TextGraph, params: ModelParams, variant: AblationFlags | None = None, layer: int = 1) -> Tensor:
    """Attention-pooled neighbour state of node ``i``, shape ``(d,)``; zero if isolated."""
    variant = variant or params.config.variant
    X, P = embed(graph, params)
    N, _ = _aggregate_rows(np.array([i]), state, X, P, graph, params.layer(layer), variant)
    return T.reshape(N, (-1,))


def update_node(i: int, state: LayerState, N_i: Tensor, graph: TextGraph, params: ModelParams, variant: AblationFlags | None = None, layer: int = 1):
    """Next ``(h_i, c_i)`` for node ``i`` given its aggregate ``N_i``."""
    variant = variant or params.config.variant
    for t in (state.H, state.C, N_i):
        if not np.all(np.isfinite(t.data)):
            raise NumericError("non-finite input to update_node")
    X, _ = embed(graph, params)
    h, c = _update_rows(np.array([i]), state, X, T.reshape(N_i, (1, -1)), params.layer(layer), variant)
    return T.reshape(h, (-1,)), T.reshape(c, (-1,))


def update_global(state: LayerState, params: ModelParams, layer: int = 1):
    """Next ``(g, c_g)`` from the previous layer's node and graph state."""
    g, cg, _, _ = _global_step(state, params.layer(layer))
    return g, cg


def layer_step(state: LayerState, X: Tensor, P: Tensor | None, graph: TextGraph, params: ModelParams, variant: AblationFlags) -> LayerState:
    l = state.layer + 1
    p = params.layer(l)
    rows = None
    N, nscores = _aggregate_rows(rows, state, X, P, graph, p, variant)
    H, C = _update_rows(rows, state, X, N, p, variant)
    new = LayerState(H, C, None, None, l, neighbor_scores=nscores)
    if variant.global_node:
        new.g, new.cg, new.pool_scores, new.gate_weights = _global_step(state, p)
    return new


def forward(graph: TextGraph, params: ModelParams, L: int | None = None, variant: AblationFlags | None = None):
    """Run ``L`` layers; returns ``(final_state, [state_0, ..., state_L])``."""
    L = params.config.layers if L is None else L
    if L < 1:
        raise ConfigError("L must be >= 1")
    if not params.config.shared_layers and L > params.config.layers:
        raise ConfigError(f"per-layer parameters exist for {params.config.layers} layers, asked for {L}")
    variant = variant or params.config.variant
    state = init_states(graph, params, variant)
    X, P = embed(graph, params)
    states = [state]
    for _ in range(L):
        state = layer_step(state, X, P, graph, params, variant)
        states.append(state)
    return state, states


def graph_vector(state: LayerState, params: ModelParams) -> Tensor:
    """What the heads read: ``g^L``, or attentive pooling of ``H^L`` without a graph node."""
    if state.g is not None:
        return state.g
    hbar, _ = attentive_pool(state.H, params.layer(max(state.layer, 1)))
    return hbar


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    """Write ``REGNN1``, a length-prefixed JSON header, then float32 LE tensors."""
    names = params.names()
    header = {
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "model": params.config.to_dict(),
        "init": INIT_SCHEME,
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for n in names:
        buf.write(np.ascontiguousarray(params[n].data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise IngestionError(f"{path}: not a REGNN1 checkpoint")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    tensors = {}
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
        tensors[spec["name"]] = Tensor(arr, requires_grad=True, name=spec["name"])
    if off != len(raw):
        raise IngestionError(f"{path}: {len(raw) - off} trailing bytes")
    return ModelParams(ModelConfig(**header["model"]), tensors), header
