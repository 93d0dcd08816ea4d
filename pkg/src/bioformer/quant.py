"""Calibration, quantization-aware fine-tuning and lowering to an integer graph.

Scheme: symmetric per-tensor int8 (zero point 0, codes in [-127, 127]),
int32 biases at ``s_in * s_w``, fixed-point requantization
(``multiplier * 2**-shift``, round half away from zero), integer softmax
(polynomial exponent) and integer layernorm (integer square root).

:class:`FakeQuantOps` evaluates each site on integer codes with the same
kernels the lowered graph uses, so the QAT forward and the integer model
agree; gradients pass straight through every rounding step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import WindowDataset
from .model import (BioformerConfig, CheckpointError, FloatOps, Params, check_params, class_row, conv_matrix,
                    forward_batch, load_checkpoint, save_checkpoint)
from .training import TrainConfig, run_epochs

log = logging.getLogger(__name__)

QAT_EPOCHS = 5
QAT_LR = 1e-5


class LoweringError(ValueError):
    pass


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


@dataclass
class SiteStats:
    min: float = math.inf
    max: float = -math.inf

    @property
    def maxabs(self) -> float:
        return max(abs(self.min), abs(self.max))

    def update(self, x: np.ndarray) -> None:
        if x.size:
            self.min = min(self.min, float(x.min()))
            self.max = max(self.max, float(x.max()))


@dataclass
class CalibrationStats:
    act: dict = field(default_factory=dict)  # site -> SiteStats
    weights: dict = field(default_factory=dict)  # param name -> max-abs
    n_batches: int = 0
    n_windows: int = 0

    def maxabs(self, site: str) -> float:
        return self.act[site].maxabs

    def scales(self, bits: int = 8) -> dict[str, float]:
        qmax = 2 ** (bits - 1) - 1
        out = {}
        for site, st in self.act.items():
            m = st.maxabs
            out[site] = (m if m > 0 and math.isfinite(m) else 1.0) / qmax
        return out


class CalibOps(FloatOps):
    """fp32 forward that records the range of every activation site."""

    def __init__(self, stats: CalibrationStats, trace: dict | None = None):
        self.stats = stats
        self.trace = trace

    def _rec(self, site, x):
        self.stats.act.setdefault(site, SiteStats()).update(x)
        if self.trace is not None:
            self.trace.setdefault(site, []).append(np.array(x, copy=True))
        return x

    def act(self, site, x):
        return self._rec(site, x)

    def linear(self, out_site, x, in_site, wname, w, b):
        return self._rec(out_site, super().linear(out_site, x, in_site, wname, w, b))

    def matmul(self, out_site, a, a_site, b, b_site, alpha=1.0):
        return self._rec(out_site, super().matmul(out_site, a, a_site, b, b_site, alpha))

    def layernorm(self, out_site, x, in_site, gname, gamma, beta, eps, const_row0=None):
        return self._rec(out_site, super().layernorm(out_site, x, in_site, gname, gamma, beta, eps))

    def add(self, out_site, a, a_site, b, b_site):
        return self._rec(out_site, super().add(out_site, a, a_site, b, b_site))


def calibrate(params: Params, windows: np.ndarray, cfg: BioformerConfig, batch_size: int = 256,
              stats: CalibrationStats | None = None, trace: dict | None = None) -> CalibrationStats:
    """Max-abs statistics per site from fp32 forward passes over ``windows``.

    Passing an existing ``stats`` extends it (ranges only ever grow).
    """
    windows = np.asarray(windows, dtype=np.float32)
    if windows.ndim == 2:
        windows = windows[None]
    if len(windows) == 0:
        raise ValueError("calibration needs at least one window")
    stats = stats if stats is not None else CalibrationStats()
    ops = CalibOps(stats, trace)
    for s in range(0, len(windows), batch_size):
        forward_batch(params, windows[s:s + batch_size], cfg, ops)
        stats.n_batches += 1
    stats.n_windows += len(windows)
    for k, v in params.items():
        stats.weights[k] = float(np.abs(v).max())
    return stats


# ---------------------------------------------------------------------------
# fake quantization (QAT forward)
# ---------------------------------------------------------------------------


def _codes(x, scale):
    return T.round_half_away(np.asarray(x, np.float64) / scale).astype(np.int64)


def _weight_scale(w, qmax):
    m = float(np.abs(w).max()) if w.size else 0.0
    return (m if m > 0 else 1.0) / qmax


def _exact_matmul(a, b):
    # integer codes in float64: exact while |acc| < 2**53
    return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(np.int64)


class FakeQuantOps(FloatOps):
    """Integer-exact simulation of the lowered graph on float tensors."""

    def __init__(self, scales: dict[str, float], bits: int = 8):
        self.bits = bits
        self.qmax = 2 ** (bits - 1) - 1
        self.scales = dict(scales)
        self.wscale: dict[str, float] = {}

    def scale(self, site):
        if site in self.wscale:
            return self.wscale[site]
        if site.endswith("probs"):
            return 1.0 / self.qmax
        try:
            return self.scales[site]
        except KeyError:
            raise LoweringError(f"no calibration statistics for site {site!r}") from None

    def _out(self, codes, site):
        return (codes * self.scale(site)).astype(np.float32)

    def act(self, site, x):
        return T.fake_quant(x, self.scale(site), self.bits)

    def weight(self, name, w):
        s = _weight_scale(w, self.qmax)
        self.wscale[name] = s
        return T.fake_quant(w, s, self.bits)

    def linear(self, out_site, x, in_site, wname, w, b):
        s_in, s_w, s_out = self.scale(in_site), self.wscale[wname], self.scale(out_site)
        acc = _exact_matmul(_codes(x, s_in), _codes(w, s_w)) + T.quantize_bias(b, s_in * s_w).q.astype(np.int64)
        m, sh = T.quantize_multiplier(s_in * s_w / s_out)
        return self._out(T.requantize(acc, m, sh, self.qmax), out_site)

    def matmul(self, out_site, a, a_site, b, b_site, alpha=1.0):
        s_a, s_b, s_out = self.scale(a_site), self.scale(b_site), self.scale(out_site)
        acc = _exact_matmul(_codes(a, s_a), _codes(b, s_b))
        m, sh = T.quantize_multiplier(s_a * s_b * alpha / s_out)
        return self._out(T.requantize(acc, m, sh, self.qmax), out_site)

    def softmax(self, out_site, x, in_site):
        consts = T.SoftmaxConsts.from_scale(self.scale(in_site))
        return self._out(T.int_softmax_codes(_codes(x, self.scale(in_site)), consts, self.qmax), out_site)

    def layernorm(self, out_site, x, in_site, gname, gamma, beta, eps, const_row0=None):
        s_in, s_out = self.scale(in_site), self.scale(out_site)
        s_g = _weight_scale(gamma, self.qmax)
        consts = T.LayerNormConsts.from_scale(s_in, x.shape[-1], eps)
        hat = T.int_layernorm_hat(_codes(x, s_in), consts)
        acc = hat * _codes(gamma, s_g) + T.quantize_bias(beta, s_g * 2.0**-consts.frac_bits).q.astype(np.int64)
        m, sh = T.quantize_multiplier(s_g * 2.0**-consts.frac_bits / s_out)
        codes = T.requantize(acc, m, sh, self.qmax)
        if const_row0 is not None:
            codes[:, 0] = folded_row(const_row0, gamma, beta, eps, s_out, self.qmax)
        return self._out(codes, out_site)

    def add(self, out_site, a, a_site, b, b_site):
        s_a, s_b, s_out = self.scale(a_site), self.scale(b_site), self.scale(out_site)
        codes = T.int_add(_codes(a, s_a), T.quantize_multiplier(s_a / s_out),
                          _codes(b, s_b), T.quantize_multiplier(s_b / s_out), self.qmax)
        return self._out(codes, out_site)


def folded_row(row, gamma, beta, eps, scale, qmax=T.QMAX) -> np.ndarray:
    """Normalized class row, computed once at lowering time and stored as codes."""
    y = T.layernorm(np.asarray(row, np.float32)[None], gamma, beta, eps)[0]
    return np.clip(_codes(y, scale), -qmax, qmax)


def fake_quant_forward(params: Params, windows: np.ndarray, cfg: BioformerConfig, stats: CalibrationStats,
                       bits: int = 8) -> np.ndarray:
    logits, _ = forward_batch(params, windows, cfg, FakeQuantOps(stats.scales(bits), bits))
    return logits


def qat_finetune(params: Params, dataset: WindowDataset, epochs: int, cfg: BioformerConfig,
                 stats: CalibrationStats, tcfg: TrainConfig = TrainConfig(), lr: float = QAT_LR,
                 bits: int = 8, metrics=None) -> Params:
    """Fine-tune through the fake-quant graph (straight-through gradients), constant ``lr``."""
    if epochs <= 0:
        return dict(params)
    ops = FakeQuantOps(stats.scales(bits), bits)
    return run_epochs(dict(params), dataset, cfg, tcfg, "qat", epochs, metrics,
                      lr_fn=lambda e, j, n: lr, ops=ops, rng_tag=3)


# ---------------------------------------------------------------------------
# lowering
# ---------------------------------------------------------------------------

INTEGER_OPS = frozenset({
    "im2col", "int_linear", "concat_cls", "int_add", "int_layernorm", "split_heads",
    "int_matmul", "int_softmax", "merge_heads", "int_relu", "select_cls",
})


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple
    output: str
    consts: tuple = ()
    attrs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"op": self.op, "inputs": list(self.inputs), "output": self.output,
                "consts": list(self.consts), "attrs": dict(self.attrs)}

    @classmethod
    def from_dict(cls, d: dict) -> "Node":
        return cls(d["op"], tuple(d["inputs"]), d["output"], tuple(d["consts"]), dict(d["attrs"]))


@dataclass
class QuantizedModel:
    """Integer-only Bioformer. ``tensors`` hold every constant (all integer dtypes)."""

    cfg: BioformerConfig
    nodes: list
    tensors: dict
    scales: dict  # site -> fp scale, boundary/diagnostic metadata only
    input_scale: float
    output_scale: float

    def quantize_input(self, windows: np.ndarray) -> np.ndarray:
        return T.quantize(windows, T.QuantParams(self.input_scale)).q

    def run(self, q_windows: np.ndarray, trace: dict | None = None, check_dtypes: bool = False) -> np.ndarray:
        return run_graph(self, q_windows, trace, check_dtypes)

    def forward(self, windows: np.ndarray) -> np.ndarray:
        windows = np.asarray(windows, np.float32)
        if windows.ndim == 2:
            windows = windows[None]
        codes = self.run(self.quantize_input(windows))
        return (codes.astype(np.float64) * self.output_scale).astype(np.float32)

    def predict(self, windows: np.ndarray) -> np.ndarray:
        windows = np.asarray(windows, np.float32)
        if windows.ndim == 2:
            windows = windows[None]
        return np.argmax(self.run(self.quantize_input(windows)), axis=-1)


def _rq(tensors, name, real):
    m, sh = T.quantize_multiplier(real)
    tensors[name] = np.array([m, sh], np.int32)
    return name


def lower(params: Params, stats: CalibrationStats, cfg: BioformerConfig) -> QuantizedModel:
    check_params(params, cfg)
    scales = stats.scales(8)
    need = ["input", "tokens", "logits"]
    if cfg.use_pos_embedding:
        need.append("embed")
    for i in range(cfg.depth):
        p = f"layers.{i}."
        need += [p + s for s in ("q", "k", "v", "scores", "attn", "hidden", "proj")]
        if cfg.norm_residual:
            need += [p + "ln", p + "res"]
    if cfg.norm_residual:
        need.append("norm")
    missing = [s for s in need if s not in scales]
    if missing:
        raise LoweringError(f"calibration statistics missing for sites {missing}")

    H, P = cfg.heads, cfg.head_dim
    tensors: dict[str, np.ndarray] = {}
    nodes: list[Node] = []
    sc = dict(scales)
    for i in range(cfg.depth):
        sc[f"layers.{i}.probs"] = T.SOFTMAX_OUT_SCALE

    def wq(name, w):
        s = _weight_scale(w, T.QMAX)
        tensors[name] = T.quantize(w, T.QuantParams(s)).q
        return s

    def linear(out, x, x_site, wname, w, bname, b):
        s_w = wq(wname, w)
        s_in = sc[x_site]
        tensors[bname] = T.quantize_bias(b, s_in * s_w).q
        rq = _rq(tensors, out + ".requant", s_in * s_w / sc[out])
        nodes.append(Node("int_linear", (x,), out, (wname, bname, rq)))

    def add(out, a, a_site, b, b_site_scale):
        tensors[out + ".requant"] = np.array(
            [*T.quantize_multiplier(sc[a_site] / sc[out]), *T.quantize_multiplier(b_site_scale / sc[out])], np.int32)
        if b is None:  # second operand is the stored positional table
            nodes.append(Node("int_add", (a,), out, ("pos_embedding", out + ".requant")))
        else:
            nodes.append(Node("int_add", (a, b), out, (out + ".requant",)))

    def layernorm(out, x, x_site, gname, bname, row0=None):
        s_g = wq(gname, params[gname])
        consts = T.LayerNormConsts.from_scale(sc[x_site], cfg.embed, cfg.eps)
        tensors[bname] = T.quantize_bias(params[bname], s_g * 2.0**-consts.frac_bits).q
        tensors[out + ".ln"] = np.array([consts.eps_q, consts.frac_bits, consts.std_bits], np.int64)
        rq = _rq(tensors, out + ".requant", s_g * 2.0**-consts.frac_bits / sc[out])
        cs = (gname, bname, out + ".ln", rq)
        if row0 is not None:
            tensors[out + ".row0"] = folded_row(row0, params[gname], params[bname], cfg.eps, sc[out]).astype(np.int8)
            cs += (out + ".row0",)
        nodes.append(Node("int_layernorm", (x,), out, cs))

    nodes.append(Node("im2col", ("input",), "patches", (), {"tokens": cfg.n_tokens}))
    linear("tokens", "patches", "input", "conv_w", conv_matrix(params["conv_w"]), "conv_b", params["conv_b"])
    tensors["cls_token"] = T.quantize(params["cls_token"], T.QuantParams(sc["tokens"])).q
    nodes.append(Node("concat_cls", ("tokens",), "seq", ("cls_token",)))
    h, site = "seq", "tokens"
    if cfg.use_pos_embedding:
        s_pos = wq("pos_embedding", params["pos_embedding"])
        add("embed", h, site, None, s_pos)
        h, site = "embed", "embed"

    for i in range(cfg.depth):
        p = f"layers.{i}."
        if cfg.norm_residual:
            layernorm(p + "ln", h, site, p + "ln_gamma", p + "ln_beta", class_row(params, cfg) if i == 0 else None)
            a, a_site = p + "ln", p + "ln"
        else:
            a, a_site = h, site
        for n, s in (("query", "q"), ("key", "k"), ("value", "v")):
            linear(p + s, a, a_site, p + f"w_{n}", params[p + f"w_{n}"], p + f"b_{n}", params[p + f"b_{n}"])
            nodes.append(Node("split_heads", (p + s,), p + s + "_heads", (), {"heads": H}))
        _rq(tensors, p + "scores.requant", sc[p + "q"] * sc[p + "k"] / math.sqrt(P) / sc[p + "scores"])
        nodes.append(Node("int_matmul", (p + "q_heads", p + "k_heads"), p + "scores",
                          (p + "scores.requant",), {"transpose_b": True}))
        c = T.SoftmaxConsts.from_scale(sc[p + "scores"])
        tensors[p + "probs.softmax"] = np.array([c.upshift, c.q_ln2, c.q_b, c.q_c, c.max_z], np.int64)
        nodes.append(Node("int_softmax", (p + "scores",), p + "probs", (p + "probs.softmax",)))
        _rq(tensors, p + "attn.requant", T.SOFTMAX_OUT_SCALE * sc[p + "v"] / sc[p + "attn"])
        nodes.append(Node("int_matmul", (p + "probs", p + "v_heads"), p + "attn_heads",
                          (p + "attn.requant",), {"transpose_b": False}))
        nodes.append(Node("merge_heads", (p + "attn_heads",), p + "attn"))
        linear(p + "hidden", p + "attn", p + "attn", p + "w_proj1", params[p + "w_proj1"],
               p + "b_proj1", params[p + "b_proj1"])
        nodes.append(Node("int_relu", (p + "hidden",), p + "hidden_relu"))
        linear(p + "proj", p + "hidden_relu", p + "hidden", p + "w_proj2", params[p + "w_proj2"],
               p + "b_proj2", params[p + "b_proj2"])
        if cfg.norm_residual:
            add(p + "res", h, site, p + "proj", sc[p + "proj"])
            h, site = p + "res", p + "res"
        else:
            h, site = p + "proj", p + "proj"

    nodes.append(Node("select_cls", (h,), "cls"))
    z, z_site = "cls", site
    if cfg.norm_residual:
        layernorm("norm", "cls", site, "norm_gamma", "norm_beta")
        z, z_site = "norm", "norm"
    linear("logits", z, z_site, "head_w", params["head_w"], "head_b", params["head_b"])
    return QuantizedModel(cfg, nodes, tensors, sc, sc["input"], sc["logits"])


def _apply_rq(acc, rq):
    return T.requantize(acc, int(rq[0]), int(rq[1]))


def run_graph(qm: QuantizedModel, q_windows: np.ndarray, trace: dict | None = None,
              check_dtypes: bool = False) -> np.ndarray:
    """Execute the integer graph on int8 input codes ``[B, window_len, in_channels]``."""
    cfg = qm.cfg
    x = np.asarray(q_windows)
    if x.ndim == 2:
        x = x[None]
    if not np.issubdtype(x.dtype, np.integer):
        raise TypeError("integer graph input must be integer codes")
    B = x.shape[0]
    env = {"input": x.astype(np.int64)}
    c = qm.tensors
    for node in qm.nodes:
        ins = [env[n] for n in node.inputs]
        op = node.op
        if op == "im2col":
            out = ins[0].reshape(B, node.attrs["tokens"], -1)
        elif op == "int_linear":
            w, b, rq = (c[k] for k in node.consts)
            out = _apply_rq(T.int_matmul_acc(ins[0], w, b), rq)
        elif op == "concat_cls":
            cls = np.broadcast_to(c[node.consts[0]].astype(np.int64), (B, 1, cfg.embed))
            out = np.concatenate([cls, ins[0]], axis=1)
        elif op == "int_add":
            if len(ins) == 2:
                other, rq = ins[1], c[node.consts[0]]
            else:
                other, rq = c[node.consts[0]], c[node.consts[1]]
            out = T.int_add(ins[0], (int(rq[0]), int(rq[1])), other, (int(rq[2]), int(rq[3])))
        elif op == "int_layernorm":
            g, b, lnc, rq = (c[k] for k in node.consts[:4])
            hat = T.int_layernorm_hat(ins[0], T.LayerNormConsts(int(lnc[0]), int(lnc[1]), int(lnc[2])))
            out = _apply_rq(hat * g.astype(np.int64) + b.astype(np.int64), rq)
            if len(node.consts) > 4:
                out[:, 0] = c[node.consts[4]]
        elif op == "split_heads":
            Hh = node.attrs["heads"]
            t = ins[0]
            out = t.reshape(B, t.shape[1], Hh, -1).transpose(0, 2, 1, 3)
        elif op == "int_matmul":
            b = ins[1].transpose(0, 1, 3, 2) if node.attrs["transpose_b"] else ins[1]
            out = _apply_rq(T.int_matmul_acc(ins[0], b), c[node.consts[0]])
        elif op == "int_softmax":
            k = c[node.consts[0]]
            consts = T.SoftmaxConsts(*(int(v) for v in k))
            out = T.int_softmax_codes(ins[0], consts)
        elif op == "merge_heads":
            t = ins[0]
            out = t.transpose(0, 2, 1, 3).reshape(B, t.shape[2], -1)
        elif op == "int_relu":
            out = np.maximum(ins[0], 0)
        elif op == "select_cls":
            out = ins[0][:, 0, :]
        else:
            raise LoweringError(f"unknown op {op!r}")
        if check_dtypes and not np.issubdtype(out.dtype, np.integer):
            raise LoweringError(f"node {op} -> {node.output} produced {out.dtype}")
        env[node.output] = out
        if trace is not None:
            trace[node.output] = out
    return env[qm.nodes[-1].output].astype(np.int8)


@dataclass
class AuditReport:
    n_nodes: int
    fp_ops: list
    fp_tensors: list
    dynamic_fp: list

    @property
    def ok(self) -> bool:
        return not (self.fp_ops or self.fp_tensors or self.dynamic_fp)


def audit_graph(qm: QuantizedModel, probe: np.ndarray | None = None) -> AuditReport:
    """Static check of op kinds and constant dtypes, plus a traced run checking every intermediate."""
    fp_ops = [n.op for n in qm.nodes if n.op not in INTEGER_OPS]
    fp_tensors = [k for k, v in qm.tensors.items() if not np.issubdtype(v.dtype, np.integer)]
    dynamic = []
    if probe is not None:
        trace: dict = {}
        qm.run(probe, trace)
        dynamic = [k for k, v in trace.items() if not np.issubdtype(v.dtype, np.integer)]
    return AuditReport(len(qm.nodes), fp_ops, fp_tensors, dynamic)


def model_memory_bytes(qm: QuantizedModel) -> int:
    """int8 weights (1 B) + int32 biases (4 B) + integer requant metadata."""
    return int(sum(v.nbytes for v in qm.tensors.values()))


def memory_breakdown(qm: QuantizedModel) -> dict[str, int]:
    out = {"weights": 0, "biases": 0, "metadata": 0}
    for k, v in qm.tensors.items():
        if k.endswith((".requant", ".softmax", ".ln")):
            out["metadata"] += v.nbytes
        elif v.dtype == np.int8:
            out["weights"] += v.nbytes
        else:
            out["biases"] += v.nbytes
    return out


def activation_buffer_bytes(cfg: BioformerConfig) -> int:
    """Peak int8 activation footprint, assuming two live sequence buffers plus the score matrix."""
    S = cfg.seq_len
    inp = cfg.window_len * cfg.in_channels
    per_layer = max(3 * S * cfg.inner + cfg.heads * S * S, S * cfg.ffn_dim + S * cfg.embed)
    return inp + 2 * S * cfg.embed + per_layer


@dataclass
class Agreement:
    top1: float
    cosine: float
    n: int


def agreement(params: Params, qm: QuantizedModel, windows: np.ndarray, cfg: BioformerConfig,
              batch_size: int = 256) -> Agreement:
    """Paired fp32 vs integer evaluation: top-1 agreement and mean logit cosine similarity."""
    agree, cos = [], []
    for s in range(0, len(windows), batch_size):
        x = windows[s:s + batch_size]
        lf, _ = forward_batch(params, x, cfg)
        lq = qm.forward(x)
        agree.append(np.argmax(lf, -1) == np.argmax(lq, -1))
        num = (lf * lq).sum(-1)
        den = np.linalg.norm(lf, axis=-1) * np.linalg.norm(lq, axis=-1)
        cos.append(num / np.maximum(den, 1e-12))
    agree, cos = np.concatenate(agree), np.concatenate(cos)
    return Agreement(float(agree.mean()), float(cos.mean()), len(agree))


def quantize_pipeline(params: Params, cfg: BioformerConfig, calib_windows: np.ndarray,
                      train: WindowDataset | None = None, qat_epochs: int = QAT_EPOCHS,
                      tcfg: TrainConfig = TrainConfig(), lr: float = QAT_LR):
    """calibrate -> QAT -> lower. ``qat_epochs=0`` is plain post-training quantization.

    Activation scales stay those QAT trained against; weight scales follow the final weights.
    """
    stats = calibrate(params, calib_windows, cfg)
    qparams = params
    if qat_epochs > 0 and train is not None:
        qparams = qat_finetune(params, train, qat_epochs, cfg, stats, tcfg, lr)
        for k, v in qparams.items():
            stats.weights[k] = float(np.abs(v).max())
    return qparams, stats, lower(qparams, stats, cfg)


def save_quantized(path, qm: QuantizedModel, extra: dict | None = None) -> None:
    meta = {"kind": "int8", "nodes": [n.to_dict() for n in qm.nodes], "scales": qm.scales,
            "input_scale": qm.input_scale, "output_scale": qm.output_scale, **(extra or {})}
    save_checkpoint(path, qm.cfg, qm.tensors, meta)


def load_quantized(path) -> QuantizedModel:
    cfg, tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "int8":
        raise CheckpointError("checkpoint does not hold a quantized model")
    try:
        nodes = [Node.from_dict(d) for d in meta["nodes"]]
        return QuantizedModel(cfg, nodes, tensors, dict(meta["scales"]),
                              float(meta["input_scale"]), float(meta["output_scale"]))
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"malformed quantization metadata: {e}") from None
