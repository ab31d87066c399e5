"""Finite-difference verification of the autodiff engine.

Analytic gradients of ``sum(R * f(x))`` (``R`` a fixed random probe) are
compared with float64 central differences.  The error of one input is
``max|analytic - numeric| / max(max|analytic|, max|numeric|)``, i.e.
relative to the gradient's own scale, which stays meaningful when single
entries are near zero.  A gradient that vanishes identically (below
``ZERO_GRAD``; the key bias of attention is one, since it shifts every
score of a softmax row equally) is judged by its absolute error instead.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import (
    GALR,
    attention_sublayer,
    bilstm_forward,
    galr_block,
    init_attention,
    init_bilstm,
    init_block,
    init_lowdim,
    init_recurrent_layer,
    local_layer,
    lowdim_global_layer,
)
from .frontend import decode, encode, overlap_add, segment
from .separator import TOY, HyperParams, SeparatorModel, init_mask_head, mask_head
from .training import pit_loss, si_snr_loss_terms

STEP = 1e-5
ZERO_GRAD = 1e-7


def _scalarize(out: T.Tensor, probe: np.ndarray) -> T.Tensor:
    return T.tsum(T.mul(out, T.Tensor(probe)))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float = 0.0) -> float:
    """``scale`` lets a sampled comparison use the full gradient's magnitude."""
    scale = max(scale, np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    err = float(np.max(np.abs(analytic - numeric), initial=0.0))
    return err if scale < ZERO_GRAD else err / scale


def check(fn, arrays, seed: int = 0, step: float = STEP, max_entries: int | None = None) -> float:
    """Max relative error over all inputs of ``fn(*tensors) -> Tensor``.

    ``max_entries`` limits how many coordinates per input are perturbed
    (chosen at random); the analytic gradient is still computed in full.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with T.default_dtype("f64"):
        T.reset_tape()
        leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*leaves)
        probe = rng.standard_normal(out.shape)
        T.backward(_scalarize(out, probe))
        analytic = [np.zeros_like(a) if t.grad is None else np.asarray(t.grad) for a, t in zip(arrays, leaves)]

        def value(vals):
            with T.no_grad():
                return float(np.sum(fn(*[T.Tensor(v) for v in vals]).data * probe))

        worst = 0.0
        for i, a in enumerate(arrays):
            flat = np.arange(a.size)
            if max_entries is not None and a.size > max_entries:
                flat = rng.choice(a.size, size=max_entries, replace=False)
            numeric = np.zeros(len(flat))
            for j, idx in enumerate(flat):
                vals = [x.copy() for x in arrays]
                v = vals[i].reshape(-1)
                v[idx] = a.reshape(-1)[idx] + step
                up = value(vals)
                v[idx] = a.reshape(-1)[idx] - step
                down = value(vals)
                numeric[j] = (up - down) / (2 * step)
            worst = max(worst, relative_error(analytic[i].reshape(-1)[flat], numeric, scale=np.max(np.abs(analytic[i]))))
    return worst


def _with_params(build):
    """Split a parameter tree into arrays so every weight takes part in the check."""
    tree = build()
    names, arrays = [], []

    def walk(node, prefix):
        for k, v in node.items():
            if isinstance(v, dict):
                walk(v, prefix + (k,))
            else:
                names.append(prefix + (k,))
                arrays.append(v.data.astype(np.float64))

    walk(tree, ())

    def rebuild(tensors):
        out = {}
        for path, t in zip(names, tensors):
            node = out
            for k in path[:-1]:
                node = node.setdefault(k, {})
            node[path[-1]] = t
        return out

    return arrays, rebuild


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def op_cases(seed: int = 0) -> dict:
    """name -> (fn, arrays) for every differentiable primitive and layer."""
    rng = np.random.default_rng(seed)
    n = rng.standard_normal
    cases = {
        "add": (T.add, [n((3, 4)), n((4,))]),
        "sub": (T.sub, [n((3, 4)), n((3, 1))]),
        "mul": (T.mul, [n((3, 4)), n((1, 4))]),
        "div": (T.div, [n((3, 4)), rng.uniform(0.5, 2.0, (3, 4))]),
        "neg": (T.neg, [n((5,))]),
        "tanh": (T.tanh, [n((3, 4))]),
        "sigmoid": (T.sigmoid, [n((3, 4))]),
        "relu": (T.relu, [_away_from_zero(rng, (3, 4))]),
        "exp": (T.exp, [n((3, 4))]),
        "log": (T.log, [rng.uniform(0.5, 3.0, (3, 4))]),
        "where": (lambda a, b: T.where(np.array([True, False, True]), a, b), [n((2, 3)), n((2, 3))]),
        "sum": (lambda a: T.tsum(a, axis=1, keepdims=True), [n((3, 4, 2))]),
        "mean": (lambda a: T.mean(a, axis=(0, 2)), [n((3, 4, 2))]),
        "matmul": (T.matmul, [n((2, 3, 4)), n((2, 4, 5))]),
        "linear": (T.linear, [n((2, 3, 4)), n((5, 4)), n((5,))]),
        "reshape": (lambda a: T.reshape(a, (4, 6)), [n((2, 3, 4))]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [n((2, 3, 4))]),
        "getitem": (lambda a: a[1:, ::2], [n((3, 5))]),
        "getitem_fancy": (lambda a: T.getitem(a, (np.array([0, 2, 0]), np.array([1, 1, 3]))), [n((3, 4))]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [n((2, 3)), n((2, 2))]),
        "stack": (lambda a, b: T.stack([a, b], axis=0), [n((2, 3)), n((2, 3))]),
        "softmax": (lambda a: T.softmax(a, axis=-1), [n((3, 5))]),
        "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [n((3, 6)), n((6,)), n((6,))]),
        "layer_norm_2axes": (lambda x, g, b: T.layer_norm(x, g, b, axes=(-2, -1)), [n((2, 3, 4)), n((3, 4)), n((3, 4))]),
        "conv1d": (lambda x, w, b: T.conv1d(x, w, stride=2, bias=b), [n((2, 3, 11)), n((4, 3, 4)), n((4,))]),
        "dropout": (lambda x: T.dropout(x, 0.3, np.random.default_rng(5), True), [n((4, 5))]),
        "segment": (lambda x: segment(x, 4).data, [n((2, 7, 3))]),
        "overlap_add": (lambda x: overlap_add(x, 2, target_length=9, offset=1, frame_axis=-3), [n((2, 5, 4, 3))]),
        "overlap_add_normalized": (lambda x: overlap_add(x, 3, normalize=True), [n((4, 6))]),
        "encode": (lambda w: encode(np.linspace(-1, 1, 23), w).features, [np.abs(n((5, 1, 6))) + 0.1]),
        "decode": (lambda x, w: decode(x, w, 17), [n((2, 5, 3)), n((6, 3))]),
    }
    mix = n((2, 2, 40))
    cases["si_snr_loss"] = (lambda e: si_snr_loss_terms(e, mix, clamp=1e6), [n((2, 2, 40))])
    cases["pit_loss"] = (lambda e: pit_loss(e, mix[0])[0], [n((2, 40))])

    D, H, J, K, Q = 8, 5, 2, 6, 3
    seq = n((3, 4, D))
    arrays, rebuild = _with_params(lambda: init_bilstm(rng, D, H))
    cases["bilstm"] = (lambda x, *p, rebuild=rebuild: bilstm_forward(x, rebuild(p)), [seq] + arrays)
    grid = n((3, K, D))
    arrays, rebuild = _with_params(lambda: init_recurrent_layer(rng, D, H))
    cases["local_recurrent_layer"] = (lambda x, *p, rebuild=rebuild: local_layer(x, rebuild(p)), [grid] + arrays)
    arrays, rebuild = _with_params(lambda: init_attention(rng, D, J))
    cases["attention"] = (lambda x, *p, rebuild=rebuild: attention_sublayer(x, rebuild(p), J), [grid] + arrays)

    def build_lowdim():
        p = init_lowdim(rng, K, Q)
        p["attention"] = init_attention(rng, D, J)
        return p

    arrays, rebuild = _with_params(build_lowdim)
    cases["lowdim_global_layer"] = (lambda x, *p, rebuild=rebuild: lowdim_global_layer(x, rebuild(p), J), [grid] + arrays)
    arrays, rebuild = _with_params(lambda: init_block(rng, GALR, D, H, J, K, 0))
    cases["galr_block"] = (lambda x, *p, rebuild=rebuild: galr_block(x, rebuild(p), GALR, J), [grid] + arrays)
    arrays, rebuild = _with_params(lambda: init_mask_head(rng, D, 2))
    cases["mask_head"] = (lambda x, *p, rebuild=rebuild: mask_head(x, rebuild(p), 2, 7), [n((1, 3, 4, D))] + arrays)
    return cases


def run_op_suite(seed: int = 0, names=None) -> dict:
    results = {}
    for name, (fn, arrays) in op_cases(seed).items():
        if names is None or name in names:
            results[name] = check(fn, arrays, seed=seed)
    return results


TINY = HyperParams(D=8, M=4, K=8, Q=4, H=4, J=2, N=1, C=2, dropout=0.0)


def check_model(hp: HyperParams | None = None, samples: int = 200, seed: int = 0, max_entries: int = 6) -> float:
    """PIT loss of a whole model in f64 against a sample of every parameter tensor.

    Defaults to the toy configuration cut to one block, without dropout.
    """
    hp = hp or TOY.replace(N=1, dropout=0.0)
    model = SeparatorModel(hp, seed=seed, dtype="f64")
    rng = np.random.default_rng(seed)
    mixture = rng.standard_normal((1, samples))
    targets = rng.standard_normal((1, model.hp.C, samples))

    def loss():
        return pit_loss(model.forward(mixture), targets)[0]

    T.reset_tape()
    T.backward(loss())
    worst = 0.0
    for p in model.params:
        analytic = np.zeros(p.shape) if p.grad is None else np.asarray(p.grad).copy()
        p.grad = None
        base = p.data.copy()
        picks = rng.choice(p.size, size=min(max_entries, p.size), replace=False)
        numeric = np.zeros(len(picks))
        for j, idx in enumerate(picks):
            for sign in (1, -1):
                p.data = base.copy()
                p.data.reshape(-1)[idx] += sign * STEP
                with T.no_grad():
                    numeric[j] += sign * loss().item()
        p.data = base
        numeric /= 2 * STEP
        worst = max(worst, relative_error(analytic.reshape(-1)[picks], numeric, scale=np.max(np.abs(analytic))))
    return worst
