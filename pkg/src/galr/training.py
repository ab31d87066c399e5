"""SI-SNR objective, permutation-invariant training, optimizer and training loop."""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, TrainingDivergedError, UsageError
from .frontend import SAMPLE_RATE
from .tensor import (
    Tensor,
    add,
    backward,
    div,
    getitem,
    log,
    mean,
    mul,
    neg,
    no_grad,
    reset_tape,
    reshape,
    sub,
    tsum,
    where,
)

CLAMP_DB = 30.0
MAX_PIT_SOURCES = 5


# ---------------------------------------------------------------- SI-SNR


def si_snr(estimate, target, zero_mean: bool = False, clamp: float | None = None):
    """Scale-invariant SNR in dB over the last axis (float64, unclamped by default).

    An all-zero estimate gives ``-inf``; an exact (scaled) reconstruction ``+inf``.
    """
    e = np.asarray(estimate, dtype=np.float64)
    s = np.asarray(target, dtype=np.float64)
    if e.shape[-1:] != s.shape[-1:]:
        raise UsageError(f"estimate {e.shape} and target {s.shape} differ in length")
    try:
        e, s = np.broadcast_arrays(e, s)
    except ValueError:
        raise UsageError(f"estimate {e.shape} and target {s.shape} do not broadcast") from None
    if zero_mean:
        e = e - e.mean(axis=-1, keepdims=True)
        s = s - s.mean(axis=-1, keepdims=True)
    energy = np.sum(s * s, axis=-1)
    if np.any(energy == 0):
        raise InputError("SI-SNR target is all zeros")
    proj = (np.sum(e * s, axis=-1) / energy)[..., None] * s
    num = np.sum(proj * proj, axis=-1)
    den = np.sum((e - proj) ** 2, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        db = 10.0 * np.log10(num / den)
    db = np.where(num == 0, -np.inf, db)
    if clamp is not None:
        db = np.clip(db, -clamp, clamp)
    return float(db) if np.ndim(db) == 0 else db


def si_snr_loss_terms(estimate: Tensor, target, zero_mean: bool = False, clamp: float = CLAMP_DB,
                      eps: float = 1e-8) -> Tensor:
    """Differentiable SI-SNR in dB, clamped to ``[-clamp, clamp]``.

    ``estimate`` and ``target`` broadcast against each other; ``eps`` (relative
    to the target energy) keeps exact reconstructions finite before the clamp.
    """
    s = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=estimate.dtype)
    e = estimate
    if zero_mean:
        e = sub(e, mean(e, axis=-1, keepdims=True))
        s = s - s.mean(axis=-1, keepdims=True)
    energy = np.sum(s * s, axis=-1, keepdims=True)
    if np.any(energy == 0):
        raise InputError("SI-SNR target is all zeros")
    st = Tensor(s)
    proj = mul(div(tsum(mul(e, st), axis=-1, keepdims=True), Tensor(energy)), st)
    res = sub(e, proj)
    tiny = Tensor(np.asarray(eps * energy[..., 0], dtype=s.dtype))
    ratio = div(add(tsum(mul(proj, proj), axis=-1), tiny), add(tsum(mul(res, res), axis=-1), tiny))
    db = mul(log(ratio), 10.0 / math.log(10.0))
    silent = np.sum(e.data * e.data, axis=-1) == 0
    if np.any(silent):
        db = where(~silent, db, -clamp)
    inside = (db.data > -clamp) & (db.data < clamp)
    if not np.all(inside):
        db = where(inside, db, np.clip(db.data, -clamp, clamp))
    return db


# ---------------------------------------------------------------- PIT


def _best_permutations(pairwise: np.ndarray, perms) -> np.ndarray:
    sources = pairwise.shape[-1]
    rows = np.arange(sources)
    scores = np.stack([pairwise[:, rows, list(p)].mean(axis=-1) for p in perms], axis=-1)
    return np.argmax(scores, axis=-1)


def pit_loss(estimates: Tensor, targets, zero_mean: bool = False, clamp: float = CLAMP_DB):
    """Mean negative SI-SNR under the best estimate-to-target assignment.

    ``estimates`` is ``(C, L)`` or ``(B, C, L)``; returns ``(loss, perm)`` where
    ``perm[i]`` is the target matched to estimate ``i`` (a list of such tuples
    for batched input).  The gradient flows through the chosen pairs only.
    """
    tgt = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if estimates.ndim not in (2, 3) or tgt.shape != estimates.shape:
        raise UsageError(f"estimates {estimates.shape} and targets {tgt.shape} must share shape (B?, C, L)")
    unbatched = estimates.ndim == 2
    est = reshape(estimates, (1,) + estimates.shape) if unbatched else estimates
    tgt = tgt[None] if unbatched else tgt
    batch, sources, length = est.shape
    if sources > MAX_PIT_SOURCES:
        raise UsageError(f"PIT enumerates C! assignments; C={sources} exceeds {MAX_PIT_SOURCES}")
    pairwise = si_snr_loss_terms(reshape(est, (batch, sources, 1, length)), tgt[:, None, :, :],
                                 zero_mean=zero_mean, clamp=clamp)
    perms = list(itertools.permutations(range(sources)))
    best = _best_permutations(pairwise.data, perms)
    chosen = [perms[k] for k in best]
    index = (np.repeat(np.arange(batch), sources), np.tile(np.arange(sources), batch),
             np.concatenate([np.asarray(p) for p in chosen]))
    loss = neg(mean(getitem(pairwise, index)))
    return loss, (chosen[0] if unbatched else chosen)


def pit_si_snr(estimates, targets, zero_mean: bool = False):
    """Raw (unclamped) per-source SI-SNR under the best assignment, plus that assignment."""
    est = np.asarray(estimates, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    if est.shape != tgt.shape or est.ndim != 2:
        raise UsageError(f"estimates {est.shape} and targets {tgt.shape} must both be (C, L)")
    sources = est.shape[0]
    pairwise = si_snr(est[:, None, :], tgt[None, :, :], zero_mean)
    perms = list(itertools.permutations(range(sources)))
    perm = perms[int(_best_permutations(pairwise[None], perms)[0])]
    return pairwise[np.arange(sources), list(perm)], perm


def si_snr_improvement(estimates, sources, mixture, zero_mean: bool = False) -> float:
    """Mean SI-SNR gain of the best-assigned estimates over the unprocessed mixture."""
    scores, _ = pit_si_snr(estimates, sources, zero_mean)
    baseline = si_snr(np.broadcast_to(mixture, np.shape(sources)), sources, zero_mean)
    return float(np.mean(scores - baseline))


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    clip_norm: float | None = 5.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def clip_grad_norm(grads, max_norm):
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, norm before clipping)."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        grads = [g * g.dtype.type(scale) for g in grads]
    return grads, norm


def adam_step(params, grads, state: OptimState) -> float:
    """One clipped Adam update with decoupled weight decay, in place. Returns the pre-clip norm."""
    params = list(params)
    grads = [np.zeros_like(p.data) if g is None else np.asarray(g) for p, g in zip(params, grads)]
    if len(grads) != len(params):
        raise UsageError(f"{len(grads)} gradients for {len(params)} parameters")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise UsageError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    grads, norm = clip_grad_norm(grads, state.clip_norm)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= (state.lr * update).astype(p.dtype, copy=False)
    return norm


def lr_schedule(epoch: int, initial: float = 1e-3, decay: float = 0.96, every: int = 2) -> float:
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    return initial * decay ** (epoch // every)


# ---------------------------------------------------------------- synthetic data


@dataclass
class MixtureExample:
    mixture: np.ndarray
    sources: np.ndarray
    snr_db: float | tuple
    sample_rate: int = SAMPLE_RATE


SYNTHETIC_KINDS = ("disjoint_band_noise", "sinusoid_pair")


def source_bands(n_sources: int, sample_rate: int = SAMPLE_RATE):
    """Disjoint frequency bands (Hz) with equal-width guard gaps between them."""
    edges = np.linspace(100.0, 0.475 * sample_rate, 2 * n_sources)
    return [(edges[2 * c], edges[2 * c + 1]) for c in range(n_sources)]


def _band_noise(rng, length, lo, hi, sample_rate):
    spectrum = np.fft.rfft(rng.standard_normal(length))
    freqs = np.fft.rfftfreq(length, 1.0 / sample_rate)
    spectrum[(freqs < lo) | (freqs > hi)] = 0
    return np.fft.irfft(spectrum, length)


def _sinusoids(rng, length, lo, hi, sample_rate):
    t = np.arange(length) / sample_rate
    out = np.zeros(length)
    for _ in range(rng.integers(1, 4)):
        freq = rng.uniform(lo, hi)
        out += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    envelope = 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.5, 4.0) * t + rng.uniform(0, 2 * np.pi))
    return out * envelope


def gen_synthetic(seed: int, n: int, length_s: float = 1.0, kind: str = "disjoint_band_noise",
                  snr_range=(0.0, 5.0), sample_rate: int = SAMPLE_RATE, n_sources: int = 2):
    """Yield ``n`` seeded mixtures of band-disjoint synthetic sources.

    Each source is scaled to unit peak, then sources 1.. are rescaled so their
    energy sits ``snr_db`` below source 0.  A common gain brings the mixture
    peak to 0.9; the stored mixture is the exact sum of the stored sources.
    """
    if n < 1:
        raise UsageError(f"need at least one example, got n={n}")
    if kind not in SYNTHETIC_KINDS:
        raise UsageError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    lo_snr, hi_snr = snr_range
    if lo_snr > hi_snr:
        raise UsageError(f"snr_range {snr_range} is not ordered")
    length = int(round(length_s * sample_rate))
    make = _band_noise if kind == "disjoint_band_noise" else _sinusoids
    rng = np.random.default_rng(seed)
    bands = source_bands(n_sources, sample_rate)
    for _ in range(n):
        raw = [make(rng, length, lo, hi, sample_rate) for lo, hi in bands]
        raw = [r / np.max(np.abs(r)) for r in raw]
        snrs = rng.uniform(lo_snr, hi_snr, size=n_sources - 1)
        ref = np.sum(raw[0] ** 2)
        scaled = [raw[0]] + [r * math.sqrt(ref / np.sum(r ** 2) * 10 ** (-snr / 10)) for r, snr in zip(raw[1:], snrs)]
        sources = np.stack(scaled)
        sources *= 0.9 / np.max(np.abs(sources.sum(axis=0)))
        mixture = sources.sum(axis=0)
        snr = float(snrs[0]) if n_sources == 2 else tuple(float(x) for x in snrs)
        yield MixtureExample(mixture, sources, snr, sample_rate)


# ---------------------------------------------------------------- training loop


class EarlyStopping:
    """Signals a stop once ``patience`` consecutive values fail to improve on the best."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    model: object
    history: list
    best_val_loss: float
    stopped_early: bool
    epochs_run: int


def _stack(examples):
    return (np.stack([ex.mixture for ex in examples]), np.stack([ex.sources for ex in examples]))


def evaluate(model, examples, batch_size: int = 4, zero_mean: bool = False) -> dict:
    """Unclamped PIT SI-SNR loss and SI-SNRi averaged over ``examples``."""
    losses, gains = [], []
    examples = list(examples)
    with no_grad():
        for start in range(0, len(examples), batch_size):
            mix, src = _stack(examples[start : start + batch_size])
            est = model.forward(mix, training=False).data
            for b in range(len(mix)):
                scores, _ = pit_si_snr(est[b], src[b], zero_mean)
                losses.append(-float(np.mean(scores)))
                gains.append(si_snr_improvement(est[b], src[b], mix[b], zero_mean))
    return {"loss": float(np.mean(losses)), "si_snri": float(np.mean(gains))}


def jsonl_logger(stream):
    """Return a callback writing each metrics record as one JSON line."""

    def emit(record):
        stream.write(json.dumps(record) + "\n")
        stream.flush()

    return emit


def train(model, train_data, val_data=None, epochs: int = 10, batch_size: int = 4, seed: int = 0,
          patience: int = 10, lr: float = 1e-3, weight_decay: float = 1e-6, clip_norm: float = 5.0,
          zero_mean: bool = False, log=None, max_seconds: float | None = None,
          restore_best: bool = True) -> TrainResult:
    """PIT SI-SNR training with Adam, stepwise lr decay and early stopping.

    Deterministic for a fixed ``seed`` (and model seed) in single-threaded
    execution.  ``log`` receives one dict per epoch and split.  A non-finite
    loss aborts with :class:`TrainingDivergedError`.
    """
    train_data = list(train_data)
    val_data = list(val_data) if val_data is not None else None
    if not train_data:
        raise UsageError("training set is empty")
    if epochs < 1 or batch_size < 1:
        raise UsageError(f"epochs and batch_size must be >= 1, got {epochs}, {batch_size}")
    rng = np.random.default_rng(seed)
    params = list(model.params)
    state = OptimState(lr=lr, weight_decay=weight_decay, clip_norm=clip_norm)
    stopper = EarlyStopping(patience)
    history = []
    best_state = None
    stopped = False
    started = time.monotonic()
    epoch = -1
    for epoch in range(epochs):
        state.lr = lr_schedule(epoch, lr)
        order = rng.permutation(len(train_data))
        losses, norms = [], []
        for step, start in enumerate(range(0, len(order), batch_size)):
            mix, src = _stack([train_data[i] for i in order[start : start + batch_size]])
            model.params.zero_grad()
            loss, _ = pit_loss(model.forward(mix, training=True), src, zero_mean=zero_mean)
            value = loss.item()
            if not math.isfinite(value):
                reset_tape()
                raise TrainingDivergedError(
                    f"loss became {value} at epoch {epoch} step {step} (lr={state.lr:.3g}, "
                    f"last grad norm={norms[-1] if norms else float('nan'):.3g})")
            backward(loss)
            norms.append(adam_step(params, [p.grad for p in params], state))
            losses.append(value)
        record = {"epoch": epoch, "split": "train", "loss": float(np.mean(losses)), "lr": state.lr,
                  "grad_norm": float(np.mean(norms))}
        history.append(record)
        if log:
            log(record)
        if val_data:
            metrics = evaluate(model, val_data, batch_size, zero_mean)
            record = {"epoch": epoch, "split": "val", **metrics}
            history.append(record)
            if log:
                log(record)
            monitored = metrics["loss"]
        else:
            monitored = history[-1]["loss"]
        if monitored < stopper.best:
            best_state = model.params.state_dict()
        if stopper.update(monitored):
            stopped = True
            break
        if max_seconds is not None and time.monotonic() - started > max_seconds:
            break
    if restore_best and best_state is not None:
        model.params.load_state_dict(best_state)
    return TrainResult(model, history, stopper.best, stopped, epoch + 1)
