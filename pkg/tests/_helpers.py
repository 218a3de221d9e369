"""Shared oracles for the unit and acceptance tests."""

import numpy as np

from actress import geometry
from actress import model as M
from actress.synthdata import encode_batch

# Coordinates whose true gradient is exactly zero (key biases, unused
# embedding rows) would give 0/0; the floor keeps them from dominating.
REL_FLOOR = 1e-6


def rel_error(analytic, numeric, floor=REL_FLOOR):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def raster_iou(a, b, n=512, extent=1.0):
    """IoU by counting the centers of an n x n pixel grid inside each box."""
    centers = (np.arange(n) + 0.5) * extent / n
    ax = (centers >= a[0]) & (centers < a[2])
    ay = (centers >= a[1]) & (centers < a[3])
    bx = (centers >= b[0]) & (centers < b[2])
    by = (centers >= b[1]) & (centers < b[3])
    inter = (ax & bx).sum() * (ay & by).sum()
    union = ax.sum() * ay.sum() + bx.sum() * by.sum() - inter
    return inter / union if union else 0.0


def random_corners(rng, n, min_size=0.2):
    """Boxes with sides uniform in [min_size, 1], placed uniformly inside the image."""
    wh = rng.uniform(min_size, 1.0, size=(n, 2))
    lo = rng.uniform(0, 1, size=(n, 2)) * (1 - wh)
    return np.concatenate([lo, lo + wh], axis=1)


def total_loss(params, cfg, vis, tokens, target):
    out = M.forward(params, cfg, vis, tokens)
    return M.loss_and_output_grads(out, target, geometry.quantize(target, cfg.n_bins))[0]


def finite_difference_check(params, cfg, samples, n_coords, rng, h=1e-4):
    """Max relative error between backprop and central differences on random coordinates."""
    vis, tokens = encode_batch(samples, cfg.t_max)
    target = np.stack([s.gold for s in samples])
    _, grads, _, _ = M.loss_and_grads(params, cfg, vis, tokens, target)
    names = list(params)
    worst = 0.0
    for _ in range(n_coords):
        name = names[int(rng.integers(len(names)))]
        idx = tuple(int(rng.integers(d)) for d in params[name].shape)
        old = params[name][idx]
        params[name][idx] = old + h
        plus = total_loss(params, cfg, vis, tokens, target)
        params[name][idx] = old - h
        minus = total_loss(params, cfg, vis, tokens, target)
        params[name][idx] = old
        worst = max(worst, float(rel_error(grads[name][idx], (plus - minus) / (2 * h))))
    return worst


def perturbed_params(cfg, seed, scale=0.05):
    """Initial parameters plus noise, so LN gains and biases are off their init values."""
    rng = np.random.default_rng(seed)
    return {k: v + rng.normal(0.0, scale, v.shape) for k, v in M.init_params(cfg, seed).items()}


def dense_relevance(attn, grads, n_visual):
    """The relevance recurrence spelled out with explicit loops over layers and matrix entries."""
    r_vv = np.eye(n_visual)
    r_rv = np.zeros(n_visual)
    for a, g in zip(attn, grads):
        heads = [np.maximum(g[h] * a[h], 0.0) for h in range(a.shape[0])]
        abar = sum(heads) / len(heads)
        block = abar[1 : 1 + n_visual, 1 : 1 + n_visual]
        row = abar[0, 1 : 1 + n_visual]
        new_rv = r_rv.copy()
        for k in range(n_visual):
            new_rv[k] += sum(row[j] * r_vv[j, k] for j in range(n_visual))
        new_vv = r_vv.copy()
        for i in range(n_visual):
            for k in range(n_visual):
                new_vv[i, k] += sum(block[i, j] * r_vv[j, k] for j in range(n_visual))
        r_vv, r_rv = new_vv, new_rv
    return r_vv, r_rv


def random_trace(rng, n_layers=3, n_visual=6, n_text=3, n_heads=2, batch=1):
    """Softmaxed random attention and normal gradients, one (B, H, S, S) array per layer."""
    s = 1 + n_visual + n_text
    attn, grads = [], []
    for _ in range(n_layers):
        logits = rng.normal(size=(batch, n_heads, s, s))
        attn.append(M.softmax(logits))
        grads.append(rng.normal(size=(batch, n_heads, s, s)))
    return attn, grads
