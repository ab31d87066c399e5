"""GALR blocks and the local/global variant matrix.

A block maps a segmented tensor ``(..., S, K, D)`` to one of the same shape.
Its local layer models each segment along K; its global layer models each
position k across the S segments.  Either layer can be recurrent (Bi-LSTM) or
attentive (multi-head self-attention), giving four variants; the GALR
combination is recurrent-local / attentive-global.

Parameters are nested dicts of :class:`~galr.tensor.Tensor`; the separator
flattens them into dotted names.

Low-dimension global layer: the written update ``T = C_inv(G) + L_hat`` would
skip the attention output entirely, so this module applies ``C_inv`` to the
post-attention tensor ``G_hat`` instead.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import (
    Tensor,
    add,
    concat,
    dropout,
    layer_norm,
    linear,
    matmul,
    mul,
    reshape,
    sigmoid,
    softmax,
    stack,
    tanh,
    transpose,
)

KINDS = ("recurrent", "attentive")


@dataclass(frozen=True)
class BlockVariant:
    local: str = "recurrent"
    global_: str = "attentive"
    use_lowdim: bool = False

    def __post_init__(self):
        if self.local not in KINDS or self.global_ not in KINDS:
            raise ConfigError(f"block layers must be one of {KINDS}, got local={self.local!r} global={self.global_!r}")
        if self.use_lowdim and self.global_ != "attentive":
            raise ConfigError("the low-dimension representation only applies to an attentive global layer")

    @property
    def label(self) -> str:
        return f"local-{self.local}/global-{self.global_}"


GALR = BlockVariant("recurrent", "attentive")
DPRNN = BlockVariant("recurrent", "recurrent")


_pe_cache: dict = {}


def positional_encoding(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal table of shape (length, dim); even features sin, odd features cos."""
    key = (dim, np.dtype(dtype).str)
    table = _pe_cache.get(key)
    if table is None or table.shape[0] < length:
        rows = max(length, 64 if table is None else 2 * table.shape[0])
        pos = np.arange(rows, dtype=np.float64)[:, None]
        rate = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
        full = np.zeros((rows, dim))
        full[:, 0::2] = np.sin(pos / rate)
        full[:, 1::2] = np.cos(pos / rate)[:, : dim // 2]
        table = full.astype(dtype)
        table.flags.writeable = False
        _pe_cache[key] = table
    return table[:length]


def _uniform(rng, shape, bound, dtype):
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _const(value, shape, dtype):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------- recurrent


def init_bilstm(rng, input_dim: int, hidden: int, dtype=np.float32) -> dict:
    bound = 1.0 / math.sqrt(hidden)
    params = {}
    for direction in ("fwd", "bwd"):
        bias = np.zeros(4 * hidden, dtype=dtype)
        bias[hidden : 2 * hidden] = 1.0
        params[direction] = {
            "w_ih": _uniform(rng, (4 * hidden, input_dim), bound, dtype),
            "w_hh": _uniform(rng, (4 * hidden, hidden), bound, dtype),
            "bias": Tensor(bias, requires_grad=True),
        }
    return params


def _lstm_direction(xw: Tensor, w_hh: Tensor, order) -> list:
    hidden = w_hh.shape[1]
    h = c = None
    outputs = [None] * xw.shape[1]
    for t in order:
        gates = xw[:, t]
        if h is not None:
            gates = add(gates, linear(h, w_hh))
        i = sigmoid(gates[:, :hidden])
        f = sigmoid(gates[:, hidden : 2 * hidden])
        g = tanh(gates[:, 2 * hidden : 3 * hidden])
        o = sigmoid(gates[:, 3 * hidden :])
        c = mul(i, g) if c is None else add(mul(f, c), mul(i, g))
        h = mul(o, tanh(c))
        outputs[t] = h
    return outputs


def bilstm_forward(seq: Tensor, params: dict) -> Tensor:
    """Bidirectional LSTM over axis 1 of ``(N, T, D)``; returns ``(N, T, 2H)`` as [forward, backward].

    Gates are ordered input, forget, cell, output; the state starts at zero.
    """
    steps = seq.shape[1]
    halves = []
    for direction, order in (("fwd", range(steps)), ("bwd", range(steps - 1, -1, -1))):
        p = params[direction]
        xw = linear(seq, p["w_ih"], p["bias"])
        halves.append(stack(_lstm_direction(xw, p["w_hh"], order), axis=1))
    return concat(halves, axis=-1)


def init_recurrent_layer(rng, dim: int, hidden: int, dtype=np.float32) -> dict:
    return {
        "lstm": init_bilstm(rng, dim, hidden, dtype),
        "proj_weight": _uniform(rng, (dim, 2 * hidden), 1.0 / math.sqrt(2 * hidden), dtype),
        "proj_bias": _const(0.0, (dim,), dtype),
        "norm_gain": _const(1.0, (dim,), dtype),
        "norm_bias": _const(0.0, (dim,), dtype),
    }


def _recurrent(x: Tensor, p: dict) -> Tensor:
    """LN(R·BiLSTM(x) + Y) along axis -2 of ``(..., T, D)``."""
    steps, dim = x.shape[-2:]
    seq = reshape(x, (-1, steps, dim))
    y = linear(bilstm_forward(seq, p["lstm"]), p["proj_weight"], p["proj_bias"])
    y = layer_norm(y, p["norm_gain"], p["norm_bias"])
    return reshape(y, x.shape)


def _swap_segments(x: Tensor) -> Tensor:
    nd = x.ndim
    return transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def local_layer(t: Tensor, p: dict) -> Tensor:
    """Bi-LSTM inside every segment, projected to D, normalized, plus the block input."""
    return add(_recurrent(t, p), t)


def global_recurrent_layer(lhat: Tensor, p: dict) -> Tensor:
    """DPRNN-style inter-segment Bi-LSTM: the local layer run along S for each k."""
    return add(_swap_segments(_recurrent(_swap_segments(lhat), p)), lhat)


# ---------------------------------------------------------------- attentive


def init_attention(rng, dim: int, heads: int, dtype=np.float32) -> dict:
    if heads < 1 or dim % heads:
        raise ConfigError(f"feature dim D={dim} is not divisible by the number of heads J={heads}")
    bound = 1.0 / math.sqrt(dim)
    params = {"norm_in_gain": _const(1.0, (dim,), dtype), "norm_in_bias": _const(0.0, (dim,), dtype)}
    for role in ("query", "key", "value"):
        params[f"w_{role}"] = _uniform(rng, (dim, dim), bound, dtype)
        params[f"b_{role}"] = _const(0.0, (dim,), dtype)
        # rows [j*D/J, (j+1)*D/J) hold head j's (D/J x D) map
        params[f"w_{role}_heads"] = _uniform(rng, (dim, dim), bound, dtype)
    params["w_attn"] = _uniform(rng, (dim, dim), bound, dtype)
    params["norm_out_gain"] = _const(1.0, (dim,), dtype)
    params["norm_out_bias"] = _const(0.0, (dim,), dtype)
    return params


def attention_sublayer(x, p, heads, *, dropout_rate=0.0, rng=None, training=False,
                       probe=None, positional=True) -> Tensor:
    """Multi-head self-attention along axis -2 of ``(..., L, D)``.

    Computes ``G = LN_D(x) + P`` and returns ``LN(G + Dropout(A))``.  Every
    leading axis is an independent sequence sharing the same weights.
    ``probe``, when a list, receives the softmax weights ``(..., J, L, L)``.
    """
    length, dim = x.shape[-2:]
    if dim % heads:
        raise ConfigError(f"feature dim D={dim} is not divisible by the number of heads J={heads}")
    head_dim = dim // heads
    lead = x.shape[:-2]
    nl = len(lead)
    g = layer_norm(x, p["norm_in_gain"], p["norm_in_bias"])
    if positional:
        g = add(g, Tensor(positional_encoding(length, dim, x.dtype)))

    def project(role):
        return linear(linear(g, p[f"w_{role}"], p[f"b_{role}"]), p[f"w_{role}_heads"])

    q = mul(project("query"), 1.0 / math.sqrt(head_dim))
    split = lead + (length, heads, head_dim)
    qh = transpose(reshape(q, split), tuple(range(nl)) + (nl + 1, nl, nl + 2))
    kt = transpose(reshape(project("key"), split), tuple(range(nl)) + (nl + 1, nl + 2, nl))
    vh = transpose(reshape(project("value"), split), tuple(range(nl)) + (nl + 1, nl, nl + 2))
    weights = softmax(matmul(qh, kt), axis=-1)
    if probe is not None:
        probe.append(weights.data)
    a = transpose(matmul(weights, vh), tuple(range(nl)) + (nl + 1, nl, nl + 2))
    a = linear(reshape(a, x.shape), p["w_attn"])
    a = dropout(a, dropout_rate, rng, training)
    return layer_norm(add(g, a), p["norm_out_gain"], p["norm_out_bias"])


def global_attention_layer(lhat: Tensor, p: dict, heads: int, **kw) -> Tensor:
    """Attention across segments, weights tied over all K positions; residual to ``lhat``."""
    return add(_swap_segments(attention_sublayer(_swap_segments(lhat), p, heads, **kw)), lhat)


def local_attention_layer(t: Tensor, p: dict, heads: int, **kw) -> Tensor:
    """Attention along K inside each segment, weights tied over segments; residual to ``t``."""
    return add(attention_sublayer(t, p, heads, **kw), t)


def init_lowdim(rng, segment_size: int, low_dim: int, dtype=np.float32) -> dict:
    if not 1 <= low_dim <= segment_size:
        raise ConfigError(f"low dimension Q={low_dim} must lie in [1, K={segment_size}]")
    return {
        "map_weight": _uniform(rng, (low_dim, segment_size), 1.0 / math.sqrt(segment_size), dtype),
        "map_bias": _const(0.0, (low_dim,), dtype),
        "inv_weight": _uniform(rng, (segment_size, low_dim), 1.0 / math.sqrt(low_dim), dtype),
        "inv_bias": _const(0.0, (segment_size,), dtype),
    }


def lowdim_global_layer(lhat: Tensor, p: dict, heads: int, **kw) -> Tensor:
    """Global attention over Q affine mixtures of the K positions, mapped back to K."""
    if lhat.shape[-2] != p["map_weight"].shape[1]:
        raise ConfigError(f"segment size {lhat.shape[-2]} does not match C_map input {p['map_weight'].shape[1]}")
    nd = lhat.ndim
    lead = tuple(range(nd - 3))
    x = transpose(lhat, lead + (nd - 3, nd - 1, nd - 2))  # (..., S, D, K)
    y = linear(x, p["map_weight"], p["map_bias"])  # (..., S, D, Q)
    y = transpose(y, lead + (nd - 1, nd - 3, nd - 2))  # (..., Q, S, D)
    gh = attention_sublayer(y, p["attention"], heads, **kw)
    z = transpose(gh, lead + (nd - 2, nd - 1, nd - 3))  # (..., S, D, Q)
    z = linear(z, p["inv_weight"], p["inv_bias"])  # (..., S, D, K)
    return add(transpose(z, lead + (nd - 3, nd - 1, nd - 2)), lhat)


# ---------------------------------------------------------------- block


def init_block(rng, variant: BlockVariant, dim: int, hidden: int, heads: int,
               segment_size: int, low_dim: int = 0, dtype=np.float32) -> dict:
    if variant.local == "recurrent":
        local = init_recurrent_layer(rng, dim, hidden, dtype)
    else:
        local = init_attention(rng, dim, heads, dtype)
    if variant.global_ == "recurrent":
        glob = init_recurrent_layer(rng, dim, hidden, dtype)
    elif variant.use_lowdim:
        glob = init_lowdim(rng, segment_size, low_dim, dtype)
        glob["attention"] = init_attention(rng, dim, heads, dtype)
    else:
        glob = init_attention(rng, dim, heads, dtype)
    return {"local": local, "global": glob}


def galr_block(t: Tensor, p: dict, variant: BlockVariant, heads: int, *, dropout_rate=0.0,
               rng=None, training=False, probes=None) -> Tensor:
    """Local layer then global layer; ``probes`` maps "local"/"global" to lists for softmax capture."""
    probes = probes or {}
    kw = dict(dropout_rate=dropout_rate, rng=rng, training=training)
    if variant.local == "recurrent":
        lhat = local_layer(t, p["local"])
    else:
        lhat = local_attention_layer(t, p["local"], heads, probe=probes.get("local"), **kw)
    if variant.global_ == "recurrent":
        return global_recurrent_layer(lhat, p["global"])
    if variant.use_lowdim:
        return lowdim_global_layer(lhat, p["global"], heads, probe=probes.get("global"), **kw)
    return global_attention_layer(lhat, p["global"], heads, probe=probes.get("global"), **kw)


# ---------------------------------------------------------------- path length


def dependency_graph(variant: BlockVariant, segments: int, segment_size: int) -> dict:
    """Position graph of one block: node ``(stage, s, k)``, edges ``(target, hops, kind)``.

    Stage 0 is the block input, 1 the local output, 2 the global output.
    Residual connections are zero-hop edges; a recurrent step costs one hop
    per position travelled and an attention layer one hop between any two
    positions of its sequence.
    """
    S, K = segments, segment_size
    graph = {(st, s, k): [] for st in range(3) for s in range(S) for k in range(K)}

    def link(stage, kind, along_k):
        for s in range(S):
            for k in range(K):
                src = (stage, s, k)
                graph[src].append(((stage + 1, s, k), 0, "residual"))
                if kind == "recurrent":
                    for step in (-1, 1):
                        if along_k and 0 <= k + step < K:
                            graph[src].append(((stage, s, k + step), 1, "recurrent"))
                        if not along_k and 0 <= s + step < S:
                            graph[src].append(((stage, s + step, k), 1, "recurrent"))
                    graph[src].append(((stage + 1, s, k), 0, "recurrent"))
                elif along_k:
                    graph[src].extend(((stage + 1, s, kk), 1, "attention") for kk in range(K) if kk != k)
                elif variant.use_lowdim:
                    graph[src].extend(((stage + 1, ss, kk), 1, "attention")
                                      for ss in range(S) for kk in range(K) if (ss, kk) != (s, k))
                else:
                    graph[src].extend(((stage + 1, ss, k), 1, "attention") for ss in range(S) if ss != s)

    link(0, variant.local, along_k=True)
    link(1, variant.global_, along_k=False)
    return graph


def _shortest_from(graph, source):
    dist = {source: (0, 0)}
    queue = deque([source])
    while queue:
        node = queue.popleft()
        d, att = dist[node]
        for target, hops, kind in graph[node]:
            cand = (d + hops, att + (kind == "attention"))
            if target not in dist or cand < dist[target]:
                dist[target] = cand
                if hops == 0:
                    queue.appendleft(target)
                else:
                    queue.append(target)
    return dist


def path_lengths(variant: BlockVariant, segments: int, segment_size: int) -> dict:
    """Shortest (hops, attention hops) from every input position to every output position."""
    graph = dependency_graph(variant, segments, segment_size)
    result = {}
    for s in range(segments):
        for k in range(segment_size):
            dist = _shortest_from(graph, (0, s, k))
            for (stage, s2, k2), value in dist.items():
                if stage == 2:
                    result[(s, k), (s2, k2)] = value
    return result


def max_path_length(variant: BlockVariant, segments: int, segment_size: int) -> int:
    lengths = path_lengths(variant, segments, segment_size)
    if len(lengths) != (segments * segment_size) ** 2:
        raise UsageError("dependency graph is not fully connected")
    return max(hops for hops, _ in lengths.values())
