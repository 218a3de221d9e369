"""Tiny grounding transformer in numpy with hand-written reverse mode.

Token layout per sample is ``[object query | G*G visual tokens | T text
tokens]``. Pre-LN encoder layers fuse all tokens; the final object-query
state feeds a regression head (sigmoid box) and a quantized detection head
(``4 x n_bins`` logits).

Parameters live in a flat ``dict[str, np.ndarray]``. Each name belongs to
exactly one partition, see :func:`partition_of`.
"""

from __future__ import annotations

import io
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .synthdata import ATTRIBUTE_TOKENS, N_FEATURES, PAD, T_MAX, VOCAB

BACKBONE, FUSION, HEADS = "backbone", "fusion", "heads"
PARTITIONS = (BACKBONE, FUSION, HEADS)
CHECKPOINT_VERSION = 1
_GELU_C = np.sqrt(2.0 / np.pi)
_MASK_FILL = -1e9


@dataclass(frozen=True)
class ModelConfig:
    n_features: int = N_FEATURES
    vocab_size: int = len(VOCAB)
    grid_size: int = 8
    t_max: int = T_MAX
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 64
    n_bins: int = 32
    n_pos_freqs: int = 4
    # share word embeddings with the matching one-hot attribute channels
    tie_attributes: bool = True
    # drop cells without any object from the token sequence
    mask_empty_cells: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        if self.n_features < len(ATTRIBUTE_TOKENS) and (self.tie_attributes or self.mask_empty_cells):
            raise ValueError("feature grid lacks the attribute channels needed for tying / masking")

    @property
    def n_visual(self) -> int:
        return self.grid_size**2

    @property
    def n_tokens(self) -> int:
        return 1 + self.n_visual + self.t_max


@dataclass(frozen=True)
class LossWeights:
    l1: float = 5.0
    giou: float = 2.0
    ce: float = 0.1


def partition_of(name: str) -> str:
    if name.startswith(("visual_embed.", "text_embed", "pos_")):
        return BACKBONE
    if name.startswith(("reg_head.", "quant_head.")):
        return HEADS
    return FUSION


# ---------------------------------------------------------------- init


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "visual_embed.w": (cfg.n_features, d),
        "visual_embed.b": (d,),
        "text_embed": (cfg.vocab_size, d),
        "pos_visual": (4 * cfg.n_pos_freqs, d),
        "pos_text": (cfg.t_max, d),
        "query_embed": (d,),
    }
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        shapes.update(
            {
                p + "ln1.g": (d,), p + "ln1.b": (d,),
                p + "wq": (d, d), p + "bq": (d,),
                p + "wk": (d, d), p + "bk": (d,),
                p + "wv": (d, d), p + "bv": (d,),
                p + "wo": (d, d), p + "bo": (d,),
                p + "ln2.g": (d,), p + "ln2.b": (d,),
                p + "mlp.w1": (d, f), p + "mlp.b1": (f,),
                p + "mlp.w2": (f, d), p + "mlp.b2": (d,),
            }
        )
    shapes.update({"final_ln.g": (d,), "final_ln.b": (d,)})
    for head, out in (("reg_head", 4), ("quant_head", 4 * cfg.n_bins)):
        shapes.update(
            {f"{head}.w1": (d, d), f"{head}.b1": (d,), f"{head}.w2": (d, out), f"{head}.b2": (out,)}
        )
    return shapes


def _init_one(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    # LN gains 1, biases 0, embeddings N(0, 0.5^2), matrices N(0, 1/fan_in)
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf.startswith("b"):
        return np.zeros(shape)
    if name in ("text_embed", "pos_text", "query_embed"):
        return rng.normal(0.0, 0.5, size=shape)
    return rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)


def _name_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Fresh parameters; each array draws from its own ``(seed, name)`` stream."""
    return {name: _init_one(name, shape, _name_rng(seed, name)) for name, shape in _param_shapes(cfg).items()}


def n_parameters(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def reinit_selective(
    params: dict[str, np.ndarray], cfg: ModelConfig, seed: int, backbone_seed: int | None = None
) -> dict[str, np.ndarray]:
    """Redraw backbone and head partitions; fusion arrays are carried over untouched.

    Heads are drawn from ``seed``. The backbone is drawn from ``backbone_seed``
    when given (passing the original init seed restores the starting
    backbone), otherwise from ``seed`` as well.
    """
    heads = init_params(cfg, seed)
    backbone = heads if backbone_seed is None else init_params(cfg, backbone_seed)
    out = {}
    for name, value in params.items():
        part = partition_of(name)
        if part == FUSION:
            out[name] = value.copy()
        else:
            out[name] = (backbone if part == BACKBONE else heads)[name]
    return out


# ---------------------------------------------------------------- primitives


def visual_position_features(cfg: ModelConfig) -> np.ndarray:
    """Fixed Fourier features of cell centers, ``(G*G, 4 * n_pos_freqs)``.

    The learned ``pos_visual`` matrix projects these to the model width, so
    the visual position code is a smooth function of (x, y).
    """
    g = cfg.grid_size
    centers = (np.arange(g) + 0.5) / g
    x = np.tile(centers, g)
    y = np.repeat(centers, g)
    k = np.arange(1, cfg.n_pos_freqs + 1) * np.pi
    feats = [f(k[None, :] * v[:, None]) for v in (x, y) for f in (np.sin, np.cos)]
    return np.concatenate(feats, axis=1)


def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (x - mu) / sigma
    return xhat * g + b, (xhat, sigma)


def _layer_norm_bwd(dy, g, cache):
    xhat, sigma = cache
    ghat = dy * g
    dx = (ghat - ghat.mean(axis=-1, keepdims=True) - xhat * (ghat * xhat).mean(axis=-1, keepdims=True)) / sigma
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


def _gelu(x):
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def softmax(z, axis=-1):
    e = z - z.max(axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    return e


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------- forward / backward


@dataclass
class ForwardOutput:
    """Model outputs for a batch plus everything backward needs.

    ``attention[l]`` is ``(B, H, S, S)``; ``attention_grad[l]`` is filled by
    :func:`backward` and is ``None`` before that. Token 0 is the object
    query, the next ``visual_cells.shape[1]`` tokens are visual slots and the
    rest are text. ``visual_cells[b, i]`` is the grid cell (row-major) held
    by slot ``i``, or -1 for a padding slot.
    """

    box: np.ndarray
    quant_logits: np.ndarray
    attention: list[np.ndarray]
    attention_grad: list[np.ndarray | None] = field(default_factory=list)
    cache: dict = field(default_factory=dict, repr=False)
    visual_cells: np.ndarray | None = None

    def quantized_box(self) -> np.ndarray:
        return self.quant_logits.argmax(axis=-1)


def forward(params: dict[str, np.ndarray], cfg: ModelConfig, vis: np.ndarray, tokens: np.ndarray) -> ForwardOutput:
    """Run a batch: ``vis`` is ``(B, G*G, F)``, ``tokens`` is ``(B, T)`` int ids."""
    p = params
    B, T = tokens.shape
    H, d = cfg.n_heads, cfg.d_model
    dh = d // H
    scale = 1.0 / np.sqrt(dh)

    n_attr = len(ATTRIBUTE_TOKENS)
    if cfg.mask_empty_cells:
        # Empty cells would only ever be masked keys, so their states are
        # dead computation. Keep occupied cells, padded to the batch maximum.
        occupied = vis[..., :n_attr].any(axis=-1)
        n_slots = max(int(occupied.sum(axis=1).max()), 1)
        order = np.argsort(~occupied, axis=1, kind="stable")[:, :n_slots]
        vis_mask = np.take_along_axis(occupied, order, axis=1)
        vis = np.take_along_axis(vis, order[..., None], axis=1)
        cells = np.where(vis_mask, order, -1)
    else:
        order = np.broadcast_to(np.arange(cfg.n_visual), (B, cfg.n_visual))
        vis_mask = np.ones((B, cfg.n_visual), dtype=bool)
        cells = order.copy()
    key_mask = np.concatenate([np.ones((B, 1), dtype=bool), vis_mask, tokens != PAD], axis=1)
    bias = np.where(key_mask, 0.0, _MASK_FILL).astype(vis.dtype)[:, None, None, :]

    pos_feats = visual_position_features(cfg)[order]
    xv = vis @ p["visual_embed.w"] + p["visual_embed.b"] + pos_feats @ p["pos_visual"]
    if cfg.tie_attributes:
        xv = xv + vis[..., :n_attr] @ p["text_embed"][list(ATTRIBUTE_TOKENS)]
    xt = p["text_embed"][tokens] + p["pos_text"][:T]
    xq = np.broadcast_to(p["query_embed"], (B, 1, d))
    x = np.concatenate([xq, xv, xt], axis=1)
    S = x.shape[1]

    layers = []
    attention = []
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        h, ln1 = _layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = h @ p[pre + "wq"] + p[pre + "bq"]
        k = h @ p[pre + "wk"] + p[pre + "bk"]
        v = h @ p[pre + "wv"] + p[pre + "bv"]
        qh, kh, vh = (a.reshape(B, S, H, dh).transpose(0, 2, 1, 3) for a in (q, k, v))
        scores = qh @ kh.transpose(0, 1, 3, 2)
        scores *= scale
        scores += bias
        A = softmax(scores)
        o = (A @ vh).transpose(0, 2, 1, 3).reshape(B, S, d)
        x = x + o @ p[pre + "wo"] + p[pre + "bo"]
        h2, ln2 = _layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        u = h2 @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]
        a, t = _gelu(u)
        x = x + a @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
        layers.append(dict(h=h, ln1=ln1, qh=qh, kh=kh, vh=vh, A=A, o=o, h2=h2, ln2=ln2, u=u, a=a, t=t))
        attention.append(A)

    z, lnf = _layer_norm(x[:, 0], p["final_ln.g"], p["final_ln.b"])
    heads = {}
    for head in ("reg_head", "quant_head"):
        u = z @ p[f"{head}.w1"] + p[f"{head}.b1"]
        a, t = _gelu(u)
        heads[head] = dict(u=u, a=a, t=t, out=a @ p[f"{head}.w2"] + p[f"{head}.b2"])
    box = _sigmoid(heads["reg_head"]["out"])
    logits = heads["quant_head"]["out"].reshape(B, 4, cfg.n_bins)

    cache = dict(
        cfg=cfg, vis=vis, pos_feats=pos_feats, tokens=tokens, layers=layers, z=z, lnf=lnf, heads=heads, box=box, x_last=x
    )
    return ForwardOutput(box, logits, attention, [None] * cfg.n_layers, cache, cells)


def backward(
    params: dict[str, np.ndarray], out: ForwardOutput, d_box: np.ndarray, d_logits: np.ndarray
) -> dict[str, np.ndarray]:
    """Reverse pass from output gradients; fills ``out.attention_grad``.

    ``d_box`` is the gradient w.r.t. the sigmoid box ``(B, 4)``; ``d_logits``
    w.r.t. the quantized logits ``(B, 4, n_bins)``.
    """
    p = params
    c = out.cache
    cfg: ModelConfig = c["cfg"]
    vis, tokens = c["vis"], c["tokens"]
    B, T = tokens.shape
    H, d = cfg.n_heads, cfg.d_model
    dh = d // H
    scale = 1.0 / np.sqrt(dh)
    g: dict[str, np.ndarray] = {}

    box = c["box"]
    d_out = {
        "reg_head": d_box * box * (1.0 - box),
        "quant_head": d_logits.reshape(B, 4 * cfg.n_bins),
    }
    z = c["z"]
    dz = np.zeros_like(z)
    for head in ("reg_head", "quant_head"):
        hc = c["heads"][head]
        dy = d_out[head]
        g[f"{head}.w2"] = hc["a"].T @ dy
        g[f"{head}.b2"] = dy.sum(axis=0)
        du = (dy @ p[f"{head}.w2"].T) * _gelu_grad(hc["u"], hc["t"])
        g[f"{head}.w1"] = z.T @ du
        g[f"{head}.b1"] = du.sum(axis=0)
        dz += du @ p[f"{head}.w1"].T

    S = c["x_last"].shape[1]
    dx = np.zeros((B, S, d))
    dx[:, 0], g["final_ln.g"], g["final_ln.b"] = _layer_norm_bwd(dz, p["final_ln.g"], c["lnf"])

    grads_a: list[np.ndarray | None] = [None] * cfg.n_layers
    for l in reversed(range(cfg.n_layers)):
        pre = f"layers.{l}."
        lc = c["layers"][l]
        # MLP branch
        a2 = lc["a"].reshape(-1, cfg.d_ff)
        dm = dx.reshape(-1, d)
        g[pre + "mlp.w2"] = a2.T @ dm
        g[pre + "mlp.b2"] = dm.sum(axis=0)
        du = (dx @ p[pre + "mlp.w2"].T) * _gelu_grad(lc["u"], lc["t"])
        g[pre + "mlp.w1"] = lc["h2"].reshape(-1, d).T @ du.reshape(-1, cfg.d_ff)
        g[pre + "mlp.b1"] = du.sum(axis=(0, 1))
        dh2 = du @ p[pre + "mlp.w1"].T
        dxl, g[pre + "ln2.g"], g[pre + "ln2.b"] = _layer_norm_bwd(dh2, p[pre + "ln2.g"], lc["ln2"])
        dx = dx + dxl
        # attention branch
        g[pre + "wo"] = lc["o"].reshape(-1, d).T @ dx.reshape(-1, d)
        g[pre + "bo"] = dx.sum(axis=(0, 1))
        do = (dx @ p[pre + "wo"].T).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        A = lc["A"]
        dA = do @ lc["vh"].transpose(0, 1, 3, 2)
        grads_a[l] = dA
        dvh = A.transpose(0, 1, 3, 2) @ do
        dsc = dA - (dA * A).sum(axis=-1, keepdims=True)
        dsc *= A
        dsc *= scale
        dqh = dsc @ lc["kh"]
        dkh = dsc.transpose(0, 1, 3, 2) @ lc["qh"]
        h = lc["h"].reshape(-1, d)
        dh_total = np.zeros((B, S, d))
        for name, dpart in (("q", dqh), ("k", dkh), ("v", dvh)):
            dflat = dpart.transpose(0, 2, 1, 3).reshape(B, S, d)
            g[pre + f"w{name}"] = h.T @ dflat.reshape(-1, d)
            g[pre + f"b{name}"] = dflat.sum(axis=(0, 1))
            dh_total += dflat @ p[pre + f"w{name}"].T
        dxl, g[pre + "ln1.g"], g[pre + "ln1.b"] = _layer_norm_bwd(dh_total, p[pre + "ln1.g"], lc["ln1"])
        dx = dx + dxl

    nv = vis.shape[1]
    dxq, dxv, dxt = dx[:, 0], dx[:, 1 : 1 + nv], dx[:, 1 + nv :]
    g["query_embed"] = dxq.sum(axis=0)
    g["visual_embed.w"] = vis.reshape(-1, cfg.n_features).T @ dxv.reshape(-1, d)
    g["visual_embed.b"] = dxv.sum(axis=(0, 1))
    pf = c["pos_feats"]
    g["pos_visual"] = pf.reshape(-1, pf.shape[-1]).T @ dxv.reshape(-1, d)
    g["pos_text"] = np.zeros_like(p["pos_text"])
    g["pos_text"][:T] = dxt.sum(axis=0)
    g["text_embed"] = np.zeros_like(p["text_embed"])
    np.add.at(g["text_embed"], tokens.reshape(-1), dxt.reshape(-1, d))
    if cfg.tie_attributes:
        n_attr = len(ATTRIBUTE_TOKENS)
        g["text_embed"][list(ATTRIBUTE_TOKENS)] += vis[..., :n_attr].reshape(-1, n_attr).T @ dxv.reshape(-1, d)

    out.attention_grad = grads_a
    return g


# ---------------------------------------------------------------- losses


def loss_and_output_grads(
    out: ForwardOutput,
    target_box: np.ndarray,
    target_bins: np.ndarray,
    weights: LossWeights = LossWeights(),
    sample_weight: np.ndarray | None = None,
):
    """Batch loss ``mean_i w_i (l1 * L1 + giou * (1 - GIoU) + ce * sum_c CE_c)``.

    Returns ``(loss, parts, d_box, d_logits)`` where ``parts`` holds the
    per-sample unweighted components.
    """
    B = out.box.shape[0]
    sw = np.ones(B) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    l1 = geometry.l1_loss(out.box, target_box)
    gl = geometry.giou_loss(out.box, target_box)
    probs = softmax(out.quant_logits)
    picked = np.take_along_axis(probs, target_bins[..., None], axis=-1)[..., 0]
    ce = -np.log(np.maximum(picked, 1e-300)).sum(axis=-1)
    per_sample = weights.l1 * l1 + weights.giou * gl + weights.ce * ce
    loss = float((sw * per_sample).sum() / B)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")

    coef = (sw / B)[:, None]
    d_box = coef * (
        weights.l1 * geometry.l1_loss_grad(out.box, target_box)
        + weights.giou * geometry.giou_loss_grad(out.box, target_box)
    )
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, target_bins[..., None], 1.0, axis=-1)
    d_logits = weights.ce * coef[..., None] * (probs - onehot)
    parts = dict(l1=l1, giou=gl, ce=ce, total=per_sample)
    return loss, parts, d_box, d_logits


def loss_and_grads(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    vis: np.ndarray,
    tokens: np.ndarray,
    target_box: np.ndarray,
    weights: LossWeights = LossWeights(),
    sample_weight: np.ndarray | None = None,
):
    """Forward, loss and full parameter gradients for one batch."""
    out = forward(params, cfg, vis, tokens)
    bins = geometry.quantize(target_box, cfg.n_bins)
    loss, parts, d_box, d_logits = loss_and_output_grads(out, target_box, bins, weights, sample_weight)
    grads = backward(params, out, d_box, d_logits)
    return loss, grads, out, parts


def grad_of_argmax_sum(params: dict[str, np.ndarray], out: ForwardOutput) -> np.ndarray:
    """Backpropagate ``sum_c max_b logits[c, b]`` per sample; fills attention grads.

    Returns the per-sample scalar values. Parameter gradients are discarded.
    """
    logits = out.quant_logits
    top = logits.argmax(axis=-1)
    d_logits = np.zeros_like(logits)
    np.put_along_axis(d_logits, top[..., None], 1.0, axis=-1)
    backward(params, out, np.zeros_like(out.box), d_logits)
    return np.take_along_axis(logits, top[..., None], axis=-1)[..., 0].sum(axis=-1)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam with per-array step counters.

    Per-array counters let a subset of moments be reset (after a selective
    re-initialization) without disturbing bias correction elsewhere.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)
    skipped: int = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> bool:
        """Update ``params`` in place. Returns False (and counts a skip) on non-finite grads."""
        if not all(np.all(np.isfinite(gv)) for gv in grads.values()):
            self.skipped += 1
            return False
        for name, w in params.items():
            gr = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(w)
                self.v[name] = np.zeros_like(w)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * gr
            v *= self.beta2
            v += (1 - self.beta2) * gr * gr
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            w -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * w)
        return True

    def reset(self, names) -> None:
        for name in names:
            self.m.pop(name, None)
            self.v.pop(name, None)
            self.t.pop(name, None)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(
    path: str | Path,
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    opt: AdamW | None = None,
    meta: dict | None = None,
) -> None:
    """Write an ``.npz`` holding every array plus a JSON header.

    The header records the format version, the model config, the partition
    tag of every parameter and caller metadata. Optimizer moments, when
    given, are stored under ``opt.m/``, ``opt.v/`` and ``opt.t/``.
    """
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "partitions": {name: partition_of(name) for name in params},
        "meta": meta or {},
    }
    arrays = {f"param/{k}": v for k, v in params.items()}
    if opt is not None:
        header["optimizer"] = {
            "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
            "weight_decay": opt.weight_decay, "skipped": opt.skipped,
        }
        for k in opt.m:
            arrays[f"opt.m/{k}"] = opt.m[k]
            arrays[f"opt.v/{k}"] = opt.v[k]
            arrays[f"opt.t/{k}"] = np.array(opt.t[k])
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path):
    """Inverse of :func:`save_checkpoint`: ``(params, cfg, opt_or_None, meta)``."""
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        cfg = ModelConfig(**header["config"])
        params = {k[len("param/") :]: z[k].copy() for k in z.files if k.startswith("param/")}
        opt = None
        if "optimizer" in header:
            o = header["optimizer"]
            opt = AdamW(o["beta1"], o["beta2"], o["eps"], o["weight_decay"], skipped=o["skipped"])
            for k in z.files:
                if k.startswith("opt.m/"):
                    name = k[len("opt.m/") :]
                    opt.m[name] = z[k].copy()
                    opt.v[name] = z[f"opt.v/{name}"].copy()
                    opt.t[name] = int(z[f"opt.t/{name}"])
    return params, cfg, opt, header["meta"]
