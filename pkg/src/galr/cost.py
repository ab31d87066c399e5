"""Closed-form cost model.

Every count here mirrors the ops the separator actually records, so the
numbers can be checked against :func:`galr.tensor.count_ops` (MACs, softmax
and layer-norm elements) and :func:`galr.tensor.tape_activation_elements`
(elements retained for backward).  FLOPs use the same weights as the
instrumented counter: 2 per MAC, 4 per softmax element, 8 per normalized
element.

``activations`` is the memory measure: the number of scalars the autodiff
tape keeps alive for the backward pass of one training-mode forward with a
single mixture.  Peak inference memory would not separate the variants,
since their local layers are identical and dominate.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

from .errors import UsageError
from .frontend import SAMPLE_RATE, n_frames, n_segments
from .separator import HyperParams, _attention_params, _recurrent_layer_params, lowdim_params

ARCHITECTURES = ("GALR", "DPRNN", "DPTNet")


@dataclass
class Cost:
    macs: int = 0
    softmax: int = 0
    layernorm: int = 0
    activations: int = 0
    params: int = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs + 4 * self.softmax + 8 * self.layernorm

    def __add__(self, other: "Cost") -> "Cost":
        return Cost(*(a + b for a, b in zip(astuple(self), astuple(other))))

    def scaled(self, n: int) -> "Cost":
        return Cost(*(n * a for a in astuple(self)))


def astuple(c: Cost):
    return (c.macs, c.softmax, c.layernorm, c.activations, c.params)


@dataclass
class CostReport:
    config: dict
    samples: int
    frames: int
    segments: int
    components: dict = field(default_factory=dict)
    mpl: str = ""

    @property
    def total(self) -> Cost:
        out = Cost()
        for c in self.components.values():
            out = out + c
        return out

    @property
    def flops(self) -> int:
        return self.total.flops

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    @property
    def params(self) -> int:
        return self.total.params

    @property
    def activations(self) -> int:
        return self.total.activations

    def rows(self):
        for name, c in list(self.components.items()) + [("total", self.total)]:
            yield {"component": name, "flops": c.flops, "macs": c.macs, "softmax": c.softmax,
                   "layernorm": c.layernorm, "activations": c.activations, "params": c.params}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["component", "flops", "macs", "softmax",
                                                 "layernorm", "activations", "params"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()

    def to_text(self) -> str:
        cfg = " ".join(f"{k}={v}" for k, v in self.config.items())
        lines = [f"config: {cfg}",
                 f"samples={self.samples} frames(I)={self.frames} segments(S)={self.segments} mpl={self.mpl}"]
        for row in self.rows():
            lines.append(f"{row['component']:<8} {row['flops'] / 1e9:10.4f} GFLOPs "
                         f"{row['params'] / 1e6:8.4f} M params {row['activations'] / 1e6:10.3f} M act")
        return "\n".join(lines)


# ------------------------------------------------------------ per-layer costs


def _lstm_direction(n: int, steps: int, dim: int, hidden: int) -> Cost:
    nh = n * hidden
    macs = n * steps * 4 * hidden * dim + (steps - 1) * n * 4 * hidden * hidden
    # input projection, first step (no recurrent term), later steps, stacked output
    act = 4 * n * steps * hidden + 15 * nh + (steps - 1) * 25 * nh + n * steps * hidden
    return Cost(macs=macs, activations=act)


def _recurrent(n: int, steps: int, dim: int, hidden: int) -> Cost:
    """Bi-LSTM over ``n`` sequences of ``steps`` positions, projection, LN, reshapes."""
    e = n * steps * dim
    c = _lstm_direction(n, steps, dim, hidden).scaled(2)
    c.macs += n * steps * dim * 2 * hidden
    c.layernorm += e
    # reshape in, concat, projection, LN, reshape out
    c.activations += e + n * steps * 2 * hidden + e + e + e
    c.params = _recurrent_layer_params(dim, hidden)
    return c


def _attention(n: int, length: int, dim: int, heads: int, training: bool, dropout: float) -> Cost:
    """Self-attention sublayer over ``n`` sequences of ``length`` positions."""
    x = n * length * dim
    scores = n * heads * length * length
    per_x = 21 + (1 if training and dropout > 0 else 0)
    return Cost(macs=7 * x * dim + 2 * n * length * length * dim, softmax=scores, layernorm=2 * x,
                activations=per_x * x + 2 * scores, params=_attention_params(dim))


def _local(h: HyperParams, batch: int, segs: int, training: bool) -> Cost:
    e = batch * segs * h.K * h.D
    if h.local_model == "recurrent":
        c = _recurrent(batch * segs, h.K, h.D, h.H)
    else:
        c = _attention(batch * segs, h.K, h.D, h.J, training, h.dropout)
    c.activations += e  # residual
    return c


def _global(h: HyperParams, batch: int, segs: int, training: bool) -> Cost:
    e = batch * segs * h.K * h.D
    if h.global_model == "recurrent":
        c = _recurrent(batch * h.K, segs, h.D, h.H)
        c.activations += 3 * e  # two transposes and the residual
        return c
    if not h.variant.use_lowdim:
        c = _attention(batch * h.K, segs, h.D, h.J, training, h.dropout)
        c.activations += 3 * e
        return c
    eq = batch * segs * h.Q * h.D
    c = _attention(batch * h.Q, segs, h.D, h.J, training, h.dropout)
    c.macs += 2 * batch * segs * h.D * h.Q * h.K
    # transpose, C_map, transpose | transpose, C_inv, transpose, residual
    c.activations += e + eq + eq + eq + e + e + e
    c.params += lowdim_params(h.K, h.Q)
    return c


def _geometry(h: HyperParams, samples: int):
    frames = n_frames(samples, h.M)
    return frames, n_segments(frames, h.K)


def flops_estimate(hp: HyperParams | None = None, input_seconds: float = 1.0,
                   sample_rate: int = SAMPLE_RATE, training: bool = True, batch: int = 1) -> CostReport:
    """Per-component FLOPs, parameters and retained activations for one forward pass.

    ``training`` only changes the activation count (dropout outputs are kept).
    """
    h = hp or HyperParams()
    samples = int(round(input_seconds * sample_rate))
    report = CostReport(config=h.to_dict(), samples=samples, frames=0, segments=0,
                        mpl=mpl("DPRNN" if h.global_model == "recurrent" else "GALR"))
    if samples < h.M:
        return report
    frames, segs = _geometry(h, samples)
    report.frames, report.segments = frames, segs
    b, D, K, C, M = batch, h.D, h.K, h.C, h.M
    bid = b * frames * D
    report.components["encoder"] = Cost(
        macs=bid * M, activations=3 * bid + b * segs * K * D, params=D * M)
    report.components["local"] = _local(h, b, segs, training).scaled(h.N)
    report.components["global"] = _global(h, b, segs, training).scaled(h.N)
    ecd = b * segs * K * C * D
    bcid = b * C * frames * D
    report.components["mask"] = Cost(
        macs=ecd * D + 3 * bcid * D,
        activations=3 * ecd + bcid + 7 * bcid,
        params=C * D * D + C * D + 3 * (D * D + D))
    report.components["decoder"] = Cost(
        macs=bcid * M,
        activations=bid + bcid + b * C * frames * M + b * C * samples,
        params=M * D)
    return report


def memory_estimate(hp: HyperParams | None = None, input_seconds: float = 1.0,
                    sample_rate: int = SAMPLE_RATE, training: bool = True) -> int:
    """Activation elements retained for backward; 0 for an input shorter than one frame."""
    return flops_estimate(hp, input_seconds, sample_rate, training).activations


# ------------------------------------------------------------ symbolic view


@dataclass(frozen=True)
class Term:
    path: str
    expression: str
    value: int


def complexity_terms(arch: str, dims: dict) -> list:
    """Leading-order per-block cost of each path, symbolic and instantiated.

    ``dims`` needs K, S, H, D and, for GALR, Q.
    """
    try:
        K, S, H, D = (int(dims[k]) for k in ("K", "S", "H", "D"))
    except KeyError as exc:
        raise UsageError(f"complexity_terms needs dimension {exc.args[0]}") from None
    if arch == "GALR":
        Q = int(dims.get("Q") or K)
        return [Term("local", "K*S*H^2", K * S * H * H), Term("global", "Q*S^2*D", Q * S * S * D)]
    if arch == "DPRNN":
        return [Term("local", "K*S*H^2", K * S * H * H), Term("global", "K*S*H^2", K * S * H * H)]
    if arch == "DPTNet":
        return [Term("local", "K*S*H^2 + K^2*S*D", K * S * H * H + K * K * S * D),
                Term("global", "K*S*H^2 + K*S^2*D", K * S * H * H + K * S * S * D)]
    raise UsageError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


def mpl(arch: str) -> str:
    """Asymptotic maximum path length between two positions."""
    if arch == "GALR":
        return "O(K)"
    if arch in ("DPRNN", "DPTNet"):
        # DPTNet's global path still runs an RNN across segments
        return "O(S+K)"
    raise UsageError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


def arch_hyperparams(arch: str, **dims) -> HyperParams:
    """HyperParams for a named architecture; DPTNet is not buildable here."""
    if arch == "GALR":
        return HyperParams(**dims)
    if arch == "DPRNN":
        dims.pop("Q", None)
        return HyperParams(global_model="recurrent", Q=0, **dims)
    raise UsageError(f"architecture {arch!r} has no runnable cost model; use GALR or DPRNN")


def report_dict(report: CostReport) -> dict:
    return {"config": report.config, "samples": report.samples, "frames": report.frames,
            "segments": report.segments, "mpl": report.mpl, "gflops": report.gflops,
            "components": {k: asdict(v) | {"flops": v.flops} for k, v in report.components.items()}}


def _fit_slope(xs, ys) -> float:
    lx = [math.log(x) for x in xs]
    ly = [math.log(y) for y in ys]
    mx, my = sum(lx) / len(lx), sum(ly) / len(ly)
    return sum((a - mx) * (b - my) for a, b in zip(lx, ly)) / sum((a - mx) ** 2 for a in lx)


def global_slope(arch: str, segments=(64, 128, 256, 512), **dims) -> float:
    """Log-log slope of the leading global-path term against S."""
    values = [next(t.value for t in complexity_terms(arch, dict(dims, S=s)) if t.path == "global")
              for s in segments]
    return _fit_slope(segments, values)
