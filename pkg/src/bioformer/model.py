"""Bioformer topology and its fp32 forward pass.

conv tokenizer (stride = filter) -> class token (+ learnable positions)
-> ``depth`` pre-norm blocks ``x + MHSA(LN(x))`` -> LN -> linear head on the
class-token row.  The MHSA block is the attention heads followed by two
linear layers (concatenated heads -> ffn_dim -> embed) with a ReLU between.

The batched forward takes an ``ops`` object that owns every arithmetic
site.  :class:`FloatOps` is the plain fp32 graph; calibration, fake-quant
and MAC-counting variants live in :mod:`bioformer.quant` and
:mod:`bioformer.profile`.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, fields

from pathlib import Path

import numpy as np

from .tensor import ShapeError, NumericError, layernorm, softmax_rows

Params = dict  # name -> np.ndarray (float32); insertion order is canonical


@dataclass(frozen=True)
class BioformerConfig:
    in_channels: int = 14
    window_len: int = 300
    filter: int = 10
    embed: int = 64
    heads: int = 8
    depth: int = 1
    head_dim: int = 32
    ffn_dim: int = 128
    num_classes: int = 8
    use_pos_embedding: bool = True
    eps: float = 1e-5
    norm_residual: bool = True

    def __post_init__(self):
        for f in ("in_channels", "window_len", "filter", "embed", "heads", "depth",
                  "head_dim", "ffn_dim", "num_classes"):
            v = getattr(self, f)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v <= 0:
                raise ValueError(f"{f} must be a positive integer, got {v!r}")
        if self.window_len % self.filter:
            raise ValueError(f"window_len {self.window_len} is not divisible by filter {self.filter}")
        if self.norm_residual and self.embed < 2:
            raise ValueError("layernorm needs embed >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def n_tokens(self) -> int:
        return self.window_len // self.filter

    @property
    def seq_len(self) -> int:
        return self.n_tokens + 1

    @property
    def inner(self) -> int:
        return self.heads * self.head_dim

    @classmethod
    def bio1(cls, filter: int = 10, **kw) -> "BioformerConfig":
        return cls(filter=filter, heads=8, depth=1, **kw)

    @classmethod
    def bio2(cls, filter: int = 10, **kw) -> "BioformerConfig":
        return cls(filter=filter, heads=2, depth=2, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BioformerConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg: BioformerConfig) -> dict[str, tuple[int, ...]]:
    C, HP = cfg.embed, cfg.inner
    shapes = {
        "conv_w": (C, cfg.in_channels, cfg.filter),
        "conv_b": (C,),
        "cls_token": (C,),
    }
    if cfg.use_pos_embedding:
        shapes["pos_embedding"] = (cfg.seq_len, C)
    for i in range(cfg.depth):
        p = f"layers.{i}."
        if cfg.norm_residual:
            shapes[p + "ln_gamma"] = (C,)
            shapes[p + "ln_beta"] = (C,)
        for n in ("query", "key", "value"):
            shapes[p + f"w_{n}"] = (C, HP)
            shapes[p + f"b_{n}"] = (HP,)
        shapes[p + "w_proj1"] = (HP, cfg.ffn_dim)
        shapes[p + "b_proj1"] = (cfg.ffn_dim,)
        shapes[p + "w_proj2"] = (cfg.ffn_dim, C)
        shapes[p + "b_proj2"] = (C,)
    if cfg.norm_residual:
        shapes["norm_gamma"] = (C,)
        shapes["norm_beta"] = (C,)
    shapes["head_w"] = (C, cfg.num_classes)
    shapes["head_b"] = (cfg.num_classes,)
    return shapes


def init_params(cfg: BioformerConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("gamma"):
            v = np.ones(shape)
        elif leaf.startswith("b_") or leaf.endswith("_b") or leaf.endswith("beta"):
            v = np.zeros(shape)
        elif leaf in ("cls_token", "pos_embedding"):
            v = rng.normal(0.0, 0.02, shape)
        elif leaf == "conv_w":
            v = rng.normal(0.0, 1.0 / math.sqrt(cfg.in_channels * cfg.filter), shape)
        else:
            v = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        params[name] = v.astype(np.float32)
    return params


def check_params(params: Params, cfg: BioformerConfig) -> None:
    shapes = param_shapes(cfg)
    if set(shapes) != set(params):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise ShapeError(f"parameter set does not match config (missing={missing}, extra={extra})")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")


def conv_matrix(conv_w: np.ndarray) -> np.ndarray:
    """[C, Cin, F] conv kernel -> [F*Cin, C] matrix matching row-major patches."""
    C, Cin, F = conv_w.shape
    return np.ascontiguousarray(conv_w.transpose(2, 1, 0).reshape(F * Cin, C))


def conv_from_matrix(mat: np.ndarray, cfg: BioformerConfig) -> np.ndarray:
    return np.ascontiguousarray(mat.reshape(cfg.filter, cfg.in_channels, cfg.embed).transpose(2, 1, 0))


def layer_params(params: Params, i: int) -> Params:
    prefix = f"layers.{i}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


class FloatOps:
    """Plain fp32 arithmetic; the other op sets override individual sites."""

    def act(self, site, x):
        return x

    def weight(self, name, w):
        return w

    def linear(self, out_site, x, in_site, wname, w, b):
        return np.matmul(x, w) + b

    def matmul(self, out_site, a, a_site, b, b_site, alpha=1.0):
        y = np.matmul(a, b)
        return y * np.float32(alpha) if alpha != 1.0 else y

    def softmax(self, out_site, x, in_site):
        return softmax_rows(x)

    def layernorm(self, out_site, x, in_site, gname, gamma, beta, eps, const_row0=None):
        return layernorm(x, gamma, beta, eps)

    def add(self, out_site, a, a_site, b, b_site):
        return a + b


FLOAT_OPS = FloatOps()


def _check_windows(windows: np.ndarray, cfg: BioformerConfig) -> np.ndarray:
    windows = np.asarray(windows, dtype=np.float32)
    if windows.ndim == 2:
        windows = windows[None]
    if windows.shape[1:] != (cfg.window_len, cfg.in_channels):
        raise ShapeError(f"expected windows [..., {cfg.window_len}, {cfg.in_channels}], got {windows.shape}")
    return windows


def forward_batch(params: Params, windows: np.ndarray, cfg: BioformerConfig,
                  ops: FloatOps = FLOAT_OPS, keep: bool = False):
    """Logits for a batch of windows ``[B, window_len, in_channels]``.

    Returns ``(logits [B, num_classes], cache)``; ``cache`` is ``None``
    unless ``keep`` is set, in which case it holds everything
    :func:`backward_batch` needs.
    """
    windows = _check_windows(windows, cfg)
    B, N, C, H, P = windows.shape[0], cfg.n_tokens, cfg.embed, cfg.heads, cfg.head_dim
    S = N + 1
    cache = {} if keep else None

    x_in = ops.act("input", windows)
    patches = x_in.reshape(B, N, cfg.filter * cfg.in_channels)
    wc = ops.weight("conv_w", conv_matrix(params["conv_w"]))
    tok = ops.linear("tokens", patches, "input", "conv_w", wc, params["conv_b"])
    cls = np.broadcast_to(params["cls_token"], (B, 1, C))
    h = ops.act("tokens", np.concatenate([cls, tok], axis=1))
    site = "tokens"
    if cfg.use_pos_embedding:
        pos = ops.weight("pos_embedding", params["pos_embedding"])
        h = ops.add("embed", h, site, pos, "pos_embedding")
        site = "embed"
    if keep:
        cache.update(patches=patches, wc=wc)

    layers = []
    for i in range(cfg.depth):
        p = f"layers.{i}."
        lc = {"h_in": h, "h_site": site}
        if cfg.norm_residual:
            # before the first block the class row does not depend on the input
            row0 = class_row(params, cfg) if i == 0 else None
            a = ops.layernorm(p + "ln", h, site, p + "ln_gamma", params[p + "ln_gamma"],
                              params[p + "ln_beta"], cfg.eps, row0)
            a_site = p + "ln"
        else:
            a, a_site = h, site
        w = {n: ops.weight(p + f"w_{n}", params[p + f"w_{n}"]) for n in ("query", "key", "value")}
        q = ops.linear(p + "q", a, a_site, p + "w_query", w["query"], params[p + "b_query"])
        k = ops.linear(p + "k", a, a_site, p + "w_key", w["key"], params[p + "b_key"])
        v = ops.linear(p + "v", a, a_site, p + "w_value", w["value"], params[p + "b_value"])
        qh = q.reshape(B, S, H, P).transpose(0, 2, 1, 3)
        kh = k.reshape(B, S, H, P).transpose(0, 2, 1, 3)
        vh = v.reshape(B, S, H, P).transpose(0, 2, 1, 3)
        alpha = 1.0 / math.sqrt(P)
        scores = ops.matmul(p + "scores", qh, p + "q", kh.transpose(0, 1, 3, 2), p + "k", alpha)
        probs = ops.softmax(p + "probs", scores, p + "scores")
        ctx = ops.matmul(p + "attn", probs, p + "probs", vh, p + "v")
        cat = ctx.transpose(0, 2, 1, 3).reshape(B, S, H * P)
        w1 = ops.weight(p + "w_proj1", params[p + "w_proj1"])
        hid = ops.linear(p + "hidden", cat, p + "attn", p + "w_proj1", w1, params[p + "b_proj1"])
        hid_r = np.maximum(hid, 0)
        w2 = ops.weight(p + "w_proj2", params[p + "w_proj2"])
        out = ops.linear(p + "proj", hid_r, p + "hidden", p + "w_proj2", w2, params[p + "b_proj2"])
        if cfg.norm_residual:
            h = ops.add(p + "res", h, site, out, p + "proj")
            site = p + "res"
        else:
            h, site = out, p + "proj"
        if keep:
            lc.update(a=a, w=w, qh=qh, kh=kh, vh=vh, alpha=alpha, probs=probs, cat=cat,
                      w1=w1, hid=hid, hid_r=hid_r, w2=w2)
            layers.append(lc)

    z = h[:, 0, :]
    if cfg.norm_residual:
        zn = ops.layernorm("norm", z, site, "norm_gamma", params["norm_gamma"], params["norm_beta"], cfg.eps)
        z_site = "norm"
    else:
        zn, z_site = z, site
    wh = ops.weight("head_w", params["head_w"])
    logits = ops.linear("logits", zn, z_site, "head_w", wh, params["head_b"])
    if keep:
        cache.update(layers=layers, z=z, zn=zn, wh=wh, batch=B)
    return logits, cache


def class_row(params: Params, cfg: BioformerConfig) -> np.ndarray:
    """fp32 class-token row entering the first block (class token + its position)."""
    row = params["cls_token"]
    if cfg.use_pos_embedding:
        row = row + params["pos_embedding"][0]
    return row.astype(np.float32)


def _ln_backward(dy, x, gamma, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + np.float32(eps))
    xhat = xc * rstd
    g = dy * gamma
    dx = rstd * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


def _lin_grads(x, dy):
    K, M = x.shape[-1], dy.shape[-1]
    x2, dy2 = x.reshape(-1, K), dy.reshape(-1, M)
    return x2.T @ dy2, dy2.sum(axis=0)


def backward_batch(params: Params, cache: dict, dlogits: np.ndarray, cfg: BioformerConfig) -> Params:
    """Reverse pass of :func:`forward_batch`; quantizers are treated as identity."""
    B, N, C, H, P = cache["batch"], cfg.n_tokens, cfg.embed, cfg.heads, cfg.head_dim
    S = N + 1
    dlogits = dlogits.astype(np.float32)
    g: Params = {}
    g["head_w"], g["head_b"] = _lin_grads(cache["zn"], dlogits)
    dzn = dlogits @ cache["wh"].T
    if cfg.norm_residual:
        dz, g["norm_gamma"], g["norm_beta"] = _ln_backward(dzn, cache["z"], params["norm_gamma"], cfg.eps)
    else:
        dz = dzn
    dh = np.zeros((B, S, C), np.float32)
    dh[:, 0, :] = dz

    for i in reversed(range(cfg.depth)):
        p = f"layers.{i}."
        lc = cache["layers"][i]
        dout = dh
        g[p + "w_proj2"], g[p + "b_proj2"] = _lin_grads(lc["hid_r"], dout)
        dhid = (dout @ lc["w2"].T) * (lc["hid"] > 0)
        g[p + "w_proj1"], g[p + "b_proj1"] = _lin_grads(lc["cat"], dhid)
        dcat = dhid @ lc["w1"].T
        dctx = dcat.reshape(B, S, H, P).transpose(0, 2, 1, 3)
        probs = lc["probs"]
        dprobs = dctx @ lc["vh"].transpose(0, 1, 3, 2)
        dvh = probs.transpose(0, 1, 3, 2) @ dctx
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dscores *= np.float32(lc["alpha"])
        dqh = dscores @ lc["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ lc["qh"]
        da = np.zeros((B, S, C), np.float32)
        for n, dxh in (("query", dqh), ("key", dkh), ("value", dvh)):
            d = dxh.transpose(0, 2, 1, 3).reshape(B, S, H * P)
            g[p + f"w_{n}"], g[p + f"b_{n}"] = _lin_grads(lc["a"], d)
            da += d @ lc["w"][n].T
        if cfg.norm_residual:
            dx, g[p + "ln_gamma"], g[p + "ln_beta"] = _ln_backward(da, lc["h_in"], params[p + "ln_gamma"], cfg.eps)
            dh = dh + dx
        else:
            dh = da

    if cfg.use_pos_embedding:
        g["pos_embedding"] = dh.sum(axis=0)
    g["cls_token"] = dh[:, 0, :].sum(axis=0)
    dwc, g["conv_b"] = _lin_grads(cache["patches"], dh[:, 1:, :])
    g["conv_w"] = conv_from_matrix(dwc, cfg)
    return {k: g[k].astype(np.float32) for k in params}


# ---------------------------------------------------------------------------
# single-window API
# ---------------------------------------------------------------------------


def tokenize(window: np.ndarray, params: Params, cfg: BioformerConfig) -> np.ndarray:
    window = np.asarray(window, dtype=np.float32)
    T = window.shape[0]
    if T % cfg.filter:
        raise ShapeError(f"window length {T} is not divisible by filter {cfg.filter}")
    if window.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} channels, got {window.shape[1]}")
    patches = window.reshape(T // cfg.filter, cfg.filter * cfg.in_channels)
    return patches @ conv_matrix(params["conv_w"]) + params["conv_b"]


def mhsa(x: np.ndarray, lp: Params, cfg: BioformerConfig, return_attention: bool = False):
    """MHSA block on one sequence ``[S, C]``: attention heads then proj1 -> ReLU -> proj2.

    ``lp`` holds one layer's parameters without the ``layers.i.`` prefix.
    """
    x = np.asarray(x, dtype=np.float32)
    S, H, P = x.shape[0], cfg.heads, cfg.head_dim
    if x.shape[1] != cfg.embed:
        raise ShapeError(f"expected [S, {cfg.embed}] input, got {x.shape}")
    q = (x @ lp["w_query"] + lp["b_query"]).reshape(S, H, P).transpose(1, 0, 2)
    k = (x @ lp["w_key"] + lp["b_key"]).reshape(S, H, P).transpose(1, 0, 2)
    v = (x @ lp["w_value"] + lp["b_value"]).reshape(S, H, P).transpose(1, 0, 2)
    att = softmax_rows(q @ k.transpose(0, 2, 1) / np.float32(math.sqrt(P)))
    cat = (att @ v).transpose(1, 0, 2).reshape(S, H * P)
    out = np.maximum(cat @ lp["w_proj1"] + lp["b_proj1"], 0) @ lp["w_proj2"] + lp["b_proj2"]
    return (out, att) if return_attention else out


def forward(window: np.ndarray, params: Params, cfg: BioformerConfig) -> np.ndarray:
    check_params(params, cfg)
    logits, _ = forward_batch(params, window, cfg)
    return logits[0]


def predict(logits: np.ndarray) -> int | np.ndarray:
    """argmax with ties to the lowest index; accepts [K] or [B, K]."""
    logits = np.asarray(logits)
    if logits.size == 0:
        raise ValueError("empty logits")
    if np.isnan(logits).any():
        raise NumericError("NaN in logits")
    out = np.argmax(logits, axis=-1)
    return int(out) if logits.ndim == 1 else out


def predict_batch(params: Params, windows: np.ndarray, cfg: BioformerConfig, batch_size: int = 256) -> np.ndarray:
    preds = []
    for s in range(0, len(windows), batch_size):
        logits, _ = forward_batch(params, windows[s:s + batch_size], cfg)
        preds.append(predict(logits))
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
#
#   "BIOF" | version u16 | config-json (u32 len) | meta-json (u32 len)
#   | n_tensors u32 | per tensor: name (u16 len), dtype u8, ndim u8,
#     dims u32 x ndim, nbytes u64, little-endian data | crc32 u32 of all prior bytes

CKPT_MAGIC = b"BIOF"
CKPT_VERSION = 1
_CKPT_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("i1"), 2: np.dtype("<i4"), 3: np.dtype("<i8")}
_CKPT_TAGS = {dt: tag for tag, dt in _CKPT_DTYPES.items()}


class CheckpointError(ValueError):
    pass


def encode_checkpoint(cfg: BioformerConfig, tensors: dict, meta: dict | None = None) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION)]
    for blob in (json.dumps(cfg.to_dict(), sort_keys=True), json.dumps(meta or {}, sort_keys=True)):
        b = blob.encode()
        parts += [struct.pack("<I", len(b)), b]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in _CKPT_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        nb = name.encode()
        data = np.ascontiguousarray(arr, dt).tobytes()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<BB", _CKPT_TAGS[dt], arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), struct.pack("<Q", len(data)), data]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(raw: bytes) -> tuple[BioformerConfig, dict, dict]:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw) - 4:
            raise CheckpointError(f"truncated checkpoint reading {what} at byte {pos}")
        out = raw[pos:pos + n]
        pos += n
        return out

    if len(raw) < 10 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError("not a Bioformer checkpoint (bad magic)")
    if zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
        raise CheckpointError("checkpoint checksum mismatch")
    take(4, "magic")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    blobs = []
    for what in ("config", "metadata"):
        (n,) = struct.unpack("<I", take(4, what))
        blobs.append(json.loads(take(n, what)))
    cfg = BioformerConfig.from_dict(blobs[0])
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name"))
        name = take(n, "name").decode()
        tag, ndim = struct.unpack("<BB", take(2, name))
        if tag not in _CKPT_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r} at byte {pos - 2}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, name))
        (nbytes,) = struct.unpack("<Q", take(8, name))
        dt = _CKPT_DTYPES[tag]
        if nbytes != math.prod(shape) * dt.itemsize:
            raise CheckpointError(f"size mismatch for {name!r} at byte {pos}")
        tensors[name] = np.frombuffer(take(nbytes, name), dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(raw) - 4:
        raise CheckpointError(f"trailing bytes after tensor table at byte {pos}")
    return cfg, tensors, blobs[1]


def payload_bytes(tensors: dict) -> int:
    return int(sum(np.asarray(a).nbytes for a in tensors.values()))


def save_checkpoint(path, cfg: BioformerConfig, tensors: dict, meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(cfg, tensors, meta))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[BioformerConfig, dict, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def save_params(path, params: Params, cfg: BioformerConfig, meta: dict | None = None) -> None:
    check_params(params, cfg)
    save_checkpoint(path, cfg, params, meta)


def load_params(path, expect: BioformerConfig | None = None) -> tuple[Params, BioformerConfig]:
    cfg, tensors, _ = load_checkpoint(path)
    if expect is not None and expect != cfg:
        raise CheckpointError(f"checkpoint config {cfg.to_dict()} does not match requested {expect.to_dict()}")
    if any(a.dtype != np.float32 for a in tensors.values()):
        raise CheckpointError("checkpoint holds a quantized model, expected fp32 parameters")
    check_params(tensors, cfg)
    return tensors, cfg
