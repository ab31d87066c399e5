"""Waveform <-> feature-space transforms.

Layout convention: the feature axis is always last.  An encoded signal is
``(..., I, D)`` (frames, features) and a segmented one ``(..., S, K, D)``
(segments, positions within a segment, features).  Any leading axes are
batch axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InputError, UsageError
from .tensor import Tensor, conv1d, linear, record_op, relu, transpose

SAMPLE_RATE = 8000


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __len__(self):
        return len(self.samples)


@dataclass
class EncodedSignal:
    features: Tensor
    original_length: int
    hop: int

    @property
    def n_frames(self) -> int:
        return self.features.shape[-2]


@dataclass
class SegmentTensor:
    data: Tensor
    valid_length: int

    @property
    def n_segments(self) -> int:
        return self.data.shape[-3]

    @property
    def segment_size(self) -> int:
        return self.data.shape[-2]

    @property
    def hop(self) -> int:
        return self.segment_size // 2


def n_frames(length: int, window: int) -> int:
    """Frames at hop ``window // 2`` once the tail is zero-padded to a whole frame."""
    if length < window:
        raise InputError(f"signal of {length} samples is shorter than the window ({window})")
    hop = window // 2
    return -(-(length - window) // hop) + 1


def n_segments(frames: int, segment_size: int) -> int:
    return -(-2 * frames // segment_size) + 1


def _samples(waveform) -> np.ndarray:
    if isinstance(waveform, Waveform):
        return np.asarray(waveform.samples)
    if isinstance(waveform, Tensor):
        return waveform.data
    return np.asarray(waveform)


def encode(waveform, basis: Tensor, activation: bool = True) -> EncodedSignal:
    """Frame the waveform at half overlap and apply the learned basis plus ReLU.

    ``waveform`` is ``(L,)`` or ``(B, L)``; ``basis`` is ``(D, 1, M)``.
    ``activation=False`` skips the ReLU, which only tests want.
    """
    x = _samples(waveform)
    window = basis.shape[-1]
    if window % 2:
        raise UsageError(f"window length M must be even, got {window}")
    if x.ndim not in (1, 2):
        raise InputError(f"waveform must be 1-D or (batch, samples), got shape {x.shape}")
    length = x.shape[-1]
    frames = n_frames(length, window)
    hop = window // 2
    padded = np.zeros(x.shape[:-1] + ((frames - 1) * hop + window,), dtype=basis.dtype)
    padded[..., :length] = x
    inp = Tensor(padded[None] if x.ndim == 1 else padded[:, None, :])
    y = conv1d(inp, basis, stride=hop)
    if activation:
        y = relu(y)
    y = transpose(y, (1, 0) if x.ndim == 1 else (0, 2, 1))
    return EncodedSignal(y, length, hop)


def segment(encoded, segment_size: int) -> SegmentTensor:
    """Split ``(..., I, D)`` into ``S = ceil(2I/K) + 1`` half-overlapping segments of length K.

    K/2 zeros go in front, enough zeros at the back to fill the last segment.
    """
    x = encoded.features if isinstance(encoded, EncodedSignal) else encoded
    if segment_size < 2 or segment_size % 2:
        raise UsageError(f"segment size K must be an even integer >= 2, got {segment_size}")
    if x.ndim < 2:
        raise DimensionError(f"segment expects (..., frames, features), got {x.shape}")
    hop = segment_size // 2
    frames, feat = x.shape[-2], x.shape[-1]
    pre = x.shape[:-2]
    segments = n_segments(frames, segment_size)
    total = (segments + 1) * hop
    padded = np.zeros(pre + (total, feat), dtype=x.dtype)
    padded[..., hop : hop + frames, :] = x.data
    blocks = padded.reshape(pre + (segments + 1, hop, feat))
    out = np.concatenate([blocks[..., :-1, :, :], blocks[..., 1:, :, :]], axis=-2)

    def bw(g, grads):
        gb = np.zeros(pre + (segments + 1, hop, feat), dtype=g.dtype)
        gb[..., :-1, :, :] += g[..., :hop, :]
        gb[..., 1:, :, :] += g[..., hop:, :]
        grads.add(x, gb.reshape(pre + (total, feat))[..., hop : hop + frames, :])

    return SegmentTensor(record_op("segment", out, (x,), bw), frames)


def overlap_add(
    frames,
    hop: int,
    normalize: bool = False,
    target_length: int | None = None,
    offset: int = 0,
    frame_axis: int = -2,
) -> Tensor:
    """Sum half-overlapping frames back into a sequence.

    ``frames`` has the frame index at ``frame_axis`` and the within-frame
    position right after it; trailing axes ride along.  With ``normalize`` each
    output position is divided by the number of frames covering it.  The
    result is cropped to ``[offset, offset + target_length)``.
    """
    if isinstance(frames, SegmentTensor):
        seg = frames
        return overlap_add(seg.data, seg.hop, normalize, seg.valid_length if target_length is None else target_length,
                           seg.hop if offset == 0 else offset, frame_axis=-3)
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    axis = frame_axis % x.ndim
    if axis + 1 >= x.ndim:
        raise DimensionError(f"frame axis {frame_axis} leaves no within-frame axis in shape {x.shape}")
    count, width = x.shape[axis], x.shape[axis + 1]
    if width != 2 * hop:
        raise UsageError(f"inconsistent hop: frames of length {width} need hop {width / 2}, got {hop}")
    pre, post = x.shape[:axis], x.shape[axis + 2 :]
    p, c = math.prod(pre), math.prod(post)
    full_len = (count + 1) * hop
    length = full_len - offset if target_length is None else min(target_length, full_len - offset)
    if offset < 0 or length < 0:
        raise UsageError(f"crop [{offset}, {offset}+{target_length}) outside overlap-add output of {full_len}")
    xr = x.data.reshape(p, count, 2, hop, c)
    blocks = np.zeros((p, count + 1, hop, c), dtype=x.dtype)
    blocks[:, :-1] += xr[:, :, 0]
    blocks[:, 1:] += xr[:, :, 1]
    if normalize:
        cover = np.full(count + 1, 2, dtype=x.dtype)
        cover[0] = cover[-1] = 1
        blocks /= cover[None, :, None, None]
    out = blocks.reshape(p, full_len, c)[:, offset : offset + length]
    out = np.ascontiguousarray(out).reshape(pre + (length,) + post)

    def bw(g, grads):
        gfull = np.zeros((p, full_len, c), dtype=g.dtype)
        gfull[:, offset : offset + length] = g.reshape(p, length, c)
        gb = gfull.reshape(p, count + 1, hop, c)
        if normalize:
            gb = gb / cover[None, :, None, None]
        gx = np.empty((p, count, 2, hop, c), dtype=g.dtype)
        gx[:, :, 0] = gb[:, :-1]
        gx[:, :, 1] = gb[:, 1:]
        grads.add(x, gx.reshape(x.shape))

    return record_op("overlap_add", out, (x,), bw)


def decode(masked: Tensor, basis: Tensor, original_length: int, normalize: bool = False) -> Tensor:
    """Map each ``(…, I, D)`` frame to M samples with ``basis`` (M, D) and overlap-add at hop M/2."""
    if masked.shape[-1] != basis.shape[1]:
        raise DimensionError(f"decode: features {masked.shape} do not match basis {basis.shape}")
    window = basis.shape[0]
    frames = linear(masked, basis)
    return overlap_add(frames, window // 2, normalize=normalize, target_length=original_length)
