"""End-to-end separation model: encoder, segmentation, blocks, mask head, decoder."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .blocks import BlockVariant, galr_block, init_block
from .errors import ConfigError, DimensionError, InputError, UsageError
from .frontend import decode, encode, overlap_add, segment
from .tensor import (
    Tensor,
    linear,
    mul,
    no_grad,
    relu,
    reshape,
    resolve_dtype,
    sigmoid,
    tanh,
    transpose,
)


@dataclass(frozen=True)
class HyperParams:
    """Architecture settings; defaults are the lightest GALR configuration (1.5M parameters).

    ``Q = 0`` disables the low-dimension segment representation.  ``Q`` is
    ignored when the global layer is recurrent.
    """

    D: int = 64
    M: int = 16
    K: int = 100
    Q: int = 32
    H: int = 128
    J: int = 8
    N: int = 6
    C: int = 2
    local_model: str = "recurrent"
    global_model: str = "attentive"
    dropout: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("D", "M", "K", "H", "J", "N", "C"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.D % self.J:
            raise ConfigError(f"D={self.D} must be divisible by J={self.J}")
        if self.K % 2:
            raise ConfigError(f"K={self.K} must be even")
        if self.M % 2:
            raise ConfigError(f"M={self.M} must be even")
        if self.C < 2:
            raise ConfigError(f"C={self.C} must be at least 2")
        if not isinstance(self.Q, (int, np.integer)) or not (self.Q == 0 or 1 <= self.Q <= self.K):
            raise ConfigError(f"Q={self.Q!r} must be 0 (disabled) or within [1, K={self.K}]")
        if not 0.0 <= float(self.dropout) < 1.0:
            raise ConfigError(f"dropout={self.dropout} must lie in [0, 1)")
        self.variant  # validates the layer kinds

    @property
    def variant(self) -> BlockVariant:
        return BlockVariant(self.local_model, self.global_model,
                            use_lowdim=self.Q > 0 and self.global_model == "attentive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "HyperParams":
        return replace(self, **changes)


TOY = HyperParams(D=16, M=8, K=16, Q=8, H=16, J=4, N=2, C=2)


class ParamStore:
    """Ordered name -> Tensor map; names are dotted paths into the nested parameter tree."""

    def __init__(self, items=()):
        self._params = OrderedDict(items)

    @classmethod
    def from_tree(cls, tree: dict) -> "ParamStore":
        store = cls()

        def walk(node, prefix):
            for key, value in node.items():
                name = f"{prefix}{key}"
                if isinstance(value, dict):
                    walk(value, name + ".")
                else:
                    value.name = name
                    store._params[name] = value

        walk(tree, "")
        return store

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def numel(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t in self._params.items())

    def load_state_dict(self, arrays) -> None:
        missing = [n for n in self._params if n not in arrays]
        extra = [n for n in arrays if n not in self._params]
        if missing or extra:
            raise DimensionError(f"parameter names differ: missing={missing[:3]} unexpected={extra[:3]}")
        for name, t in self._params.items():
            value = np.asarray(arrays[name])
            if value.shape != t.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} != expected {t.shape}")
            t.data = value.astype(t.dtype, copy=True)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_mask_head(rng, dim: int, sources: int, dtype=np.float32) -> dict:
    head = {
        "proj_weight": _uniform(rng, (sources * dim, dim), dim, dtype),
        "proj_bias": _zeros((sources * dim,), dtype),
    }
    for gate in ("tanh", "sigmoid", "relu"):
        head[f"{gate}_weight"] = _uniform(rng, (dim, dim), dim, dtype)
        head[f"{gate}_bias"] = _zeros((dim,), dtype)
    return head


def mask_head(t: Tensor, p: dict, sources: int, n_frames: int) -> Tensor:
    """Turn block output ``(..., S, K, D)`` into C non-negative masks ``(..., C, I, D)``.

    A pointwise channel map D -> C·D gives C segmented tensors, each is
    overlap-added back to I frames, passed through the tanh/sigmoid gate and
    finally a ReLU-activated pointwise map.
    """
    segs, size, dim = t.shape[-3:]
    lead = t.shape[:-3]
    nl = len(lead)
    y = linear(t, p["proj_weight"], p["proj_bias"])
    y = reshape(y, lead + (segs, size, sources, dim))
    y = transpose(y, tuple(range(nl)) + (nl + 2, nl, nl + 1, nl + 3))
    y = overlap_add(y, size // 2, target_length=n_frames, offset=size // 2, frame_axis=-3)
    gated = mul(tanh(linear(y, p["tanh_weight"], p["tanh_bias"])),
                sigmoid(linear(y, p["sigmoid_weight"], p["sigmoid_bias"])))
    return relu(linear(gated, p["relu_weight"], p["relu_bias"]))


class SeparatorModel:
    """A GALR-family separator for C sources.

    ``forward`` maps mixtures ``(B, L)`` to estimates ``(B, C, L)``; ``separate``
    is the inference convenience wrapper for one waveform.
    """

    def __init__(self, hp: HyperParams | None = None, seed: int = 0, dtype="f32"):
        self.hp = hp or HyperParams()
        self.hp.validate()
        self.dtype = resolve_dtype(dtype)
        self.seed = seed
        init_seq, drop_seq = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(init_seq)
        self.dropout_rng = np.random.default_rng(drop_seq)
        h = self.hp
        dt = self.dtype
        self.tree = {
            "encoder": {"weight": _uniform(rng, (h.D, 1, h.M), h.M, dt)},
            "blocks": {
                str(n): init_block(rng, h.variant, h.D, h.H, h.J, h.K, h.Q, dt) for n in range(h.N)
            },
            "mask": init_mask_head(rng, h.D, h.C, dt),
            "decoder": {"weight": _uniform(rng, (h.M, h.D), h.D, dt)},
        }
        self.params = ParamStore.from_tree(self.tree)

    def _check_input(self, mixtures) -> np.ndarray:
        x = np.asarray(mixtures.data if isinstance(mixtures, Tensor) else mixtures)
        if x.ndim not in (1, 2):
            raise InputError(f"mixture must be (samples,) or (batch, samples), got shape {x.shape}")
        if x.shape[-1] < self.hp.M:
            raise InputError(f"mixture of {x.shape[-1]} samples is shorter than the window M={self.hp.M}")
        if not np.all(np.isfinite(x)):
            raise InputError("mixture contains non-finite samples")
        return x.astype(self.dtype, copy=False)

    def forward(self, mixtures, training: bool = False, probes=None) -> Tensor:
        """Estimate sources. ``probes`` maps block index -> {"local"/"global": list} for softmax capture."""
        x = self._check_input(mixtures)
        unbatched = x.ndim == 1
        if unbatched:
            x = x[None]
        h, tree = self.hp, self.tree
        enc = encode(x, tree["encoder"]["weight"])
        t = segment(enc, h.K).data
        for n in range(h.N):
            t = galr_block(t, tree["blocks"][str(n)], h.variant, h.J, dropout_rate=h.dropout,
                           rng=self.dropout_rng, training=training,
                           probes=(probes or {}).get(n))
        masks = mask_head(t, tree["mask"], h.C, enc.n_frames)
        feats = enc.features
        masked = mul(reshape(feats, (feats.shape[0], 1) + feats.shape[1:]), masks)
        est = decode(masked, tree["decoder"]["weight"], enc.original_length)
        if unbatched:
            est = reshape(est, est.shape[1:])
        return est

    __call__ = forward

    def separate(self, waveform) -> list:
        """Return the C estimated sources of one waveform as float arrays of its length."""
        x = self._check_input(getattr(waveform, "samples", waveform))
        if x.ndim != 1:
            raise InputError(f"separate() takes a single waveform, got shape {x.shape}")
        with no_grad():
            est = self.forward(x, training=False)
        return [est.data[c].copy() for c in range(self.hp.C)]

    def num_params(self) -> int:
        return self.params.numel()


def separate(waveform, model: SeparatorModel) -> list:
    return model.separate(waveform)


def attention_dump(model: SeparatorModel, waveform, block: int, head: int, layer: str = "global") -> np.ndarray:
    """Softmax matrices of one head in one block for a single waveform.

    For the global layer the result is ``(K or Q, S, S)``: one S x S matrix per
    cross-segment sequence, rows indexed by the target segment.
    """
    h = model.hp
    if not 0 <= block < h.N:
        raise UsageError(f"block index {block} outside [0, {h.N})")
    if not 0 <= head < h.J:
        raise UsageError(f"head index {head} outside [0, {h.J})")
    if layer not in ("local", "global"):
        raise UsageError(f"layer must be 'local' or 'global', got {layer!r}")
    kind = h.local_model if layer == "local" else h.global_model
    if kind != "attentive":
        raise UsageError(f"the {layer} layer of this model is {kind}, not attentive")
    probe = []
    x = np.asarray(getattr(waveform, "samples", waveform))
    if x.ndim != 1:
        raise InputError(f"attention_dump takes a single waveform, got shape {x.shape}")
    with no_grad():
        model.forward(x[None], training=False, probes={block: {layer: probe}})
    return probe[0][0, :, head]


def _recurrent_layer_params(D, H):
    return 2 * (4 * H * D + 4 * H * H + 4 * H) + D * 2 * H + D + 2 * D


def _attention_params(D):
    return 7 * D * D + 7 * D


def lowdim_params(K: int, Q: int) -> int:
    return Q * (K + 1) + K * (Q + 1)


def block_params(h: HyperParams) -> int:
    variant = h.variant
    total = _recurrent_layer_params(h.D, h.H) if variant.local == "recurrent" else _attention_params(h.D)
    if variant.global_ == "recurrent":
        total += _recurrent_layer_params(h.D, h.H)
    else:
        total += _attention_params(h.D) + (lowdim_params(h.K, h.Q) if variant.use_lowdim else 0)
    return total


def count_params(h: HyperParams) -> int:
    """Trainable scalar count from closed-form sizes of every component."""
    encoder = h.D * h.M
    decoder = h.M * h.D
    mask = h.C * h.D * h.D + h.C * h.D + 3 * (h.D * h.D + h.D)
    return encoder + decoder + mask + h.N * block_params(h)


def count_param_tensors(h: HyperParams) -> int:
    variant = h.variant
    per_layer = {"recurrent": 10, "attentive": 14}
    block = per_layer[variant.local] + per_layer[variant.global_] + (4 if variant.use_lowdim else 0)
    return 1 + 1 + 8 + h.N * block
