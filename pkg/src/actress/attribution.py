"""Gradient-weighted relevance propagation over attention maps.

Relevance is tracked on two blocks: visual-to-visual ``R_vv`` (starts as the
identity) and object-query-to-visual ``R_rv`` (starts at zero). For every
encoder layer, in forward order::

    Abar   = mean_heads(relu(gradA * A))
    R_rv  += Abar[query, visual] @ R_vv
    R_vv  += Abar[visual, visual] @ R_vv

The query-row update reads ``R_vv`` before that layer's own update. The
final ``R_rv`` row, reshaped to the ``G x G`` grid, is the attribution map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry

DEGENERATE_EPS = 1e-12


@dataclass
class RelevanceState:
    r_vv: np.ndarray
    r_rv: np.ndarray

    @classmethod
    def initial(cls, n_visual: int, batch: tuple[int, ...] = ()) -> "RelevanceState":
        eye = np.broadcast_to(np.eye(n_visual), batch + (n_visual, n_visual)).copy()
        return cls(eye, np.zeros(batch + (n_visual,)))


def layer_abar(attn: np.ndarray, attn_grad: np.ndarray) -> np.ndarray:
    """Head-averaged positive part of ``grad * attention``; heads on axis -3."""
    if attn.shape != attn_grad.shape:
        raise ValueError(f"shape mismatch {attn.shape} vs {attn_grad.shape}")
    return np.maximum(attn_grad * attn, 0.0).mean(axis=-3)


def _row_normalize(r_vv: np.ndarray) -> np.ndarray:
    n = r_vv.shape[-1]
    eye = np.eye(n)
    off = r_vv - eye
    sums = off.sum(axis=-1, keepdims=True)
    return eye + np.divide(off, sums, out=np.zeros_like(off), where=sums > DEGENERATE_EPS)


def propagate(
    state: RelevanceState,
    abar_vv: np.ndarray,
    abar_qv: np.ndarray,
    normalize: bool = False,
) -> RelevanceState:
    """One layer of the relevance recurrence (batched over leading axes).

    ``abar_vv`` is ``(..., V, V)``; ``abar_qv`` is ``(..., V)``. With
    ``normalize`` the accumulated part ``R_vv - I`` is row-normalized after
    the update.
    """
    r_vv = state.r_vv
    r_rv = state.r_rv + np.einsum("...j,...jk->...k", abar_qv, r_vv)
    r_vv = r_vv + abar_vv @ r_vv
    if normalize:
        r_vv = _row_normalize(r_vv)
    return RelevanceState(r_vv, r_rv)


def relevance_from_trace(
    attention: list[np.ndarray],
    attention_grad: list[np.ndarray],
    n_visual: int,
    normalize: bool = False,
) -> RelevanceState:
    """Run the recurrence over all layers of a batched trace.

    Attention arrays are ``(B, H, S, S)`` with token 0 the object query and
    tokens ``1..n_visual`` the visual tokens.
    """
    if any(g is None for g in attention_grad):
        raise ValueError("attention gradients missing; run a backward pass first")
    batch = attention[0].shape[:1]
    state = RelevanceState.initial(n_visual, batch)
    vis = slice(1, 1 + n_visual)
    for a, ga in zip(attention, attention_grad):
        abar = layer_abar(a, ga)
        state = propagate(state, abar[:, vis, vis], abar[:, 0, vis], normalize)
    return state


def attribution_maps(
    attention: list[np.ndarray],
    attention_grad: list[np.ndarray],
    grid_size: int,
    normalize: bool = False,
    visual_cells: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``G x G`` attribution maps and a degenerate flag.

    ``visual_cells`` maps each visual slot to its grid cell (-1 for padding);
    by default the visual block is the full row-major grid. Cells without a
    slot get zero relevance. A map is flagged degenerate when its total mass
    is at most ``DEGENERATE_EPS`` (all gradients vanished).
    """
    n_cells = grid_size**2
    if visual_cells is None:
        n_slots = n_cells
    else:
        n_slots = visual_cells.shape[1]
    state = relevance_from_trace(attention, attention_grad, n_slots, normalize)
    rel = np.maximum(state.r_rv, 0.0)
    if visual_cells is not None:
        flat = np.zeros((rel.shape[0], n_cells + 1))
        # padding slots land in a spill column that is dropped
        idx = np.where(visual_cells >= 0, visual_cells, n_cells)
        np.put_along_axis(flat, idx, rel, axis=1)
        rel = flat[:, :n_cells]
    maps = rel.reshape(-1, grid_size, grid_size)
    degenerate = maps.sum(axis=(1, 2)) <= DEGENERATE_EPS
    return maps, degenerate


def cell_coverage(box: np.ndarray, grid_size: int) -> np.ndarray:
    """Fraction of each grid cell covered by a center-format ``box``; ``(..., G, G)``."""
    corners = geometry.to_corners(box)
    edges = np.arange(grid_size + 1) / grid_size
    lo, hi = edges[:-1], edges[1:]
    x1, y1, x2, y2 = (corners[..., i, None] for i in range(4))
    fx = np.clip(np.minimum(hi, x2) - np.maximum(lo, x1), 0.0, None) * grid_size
    fy = np.clip(np.minimum(hi, y2) - np.maximum(lo, y1), 0.0, None) * grid_size
    return fy[..., :, None] * fx[..., None, :]


def faithfulness(attr_map: np.ndarray, box: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Share of attribution mass inside ``box`` with area-fraction cell weights.

    Returns ``(score, degenerate)``; degenerate maps score 0.
    """
    attr_map = np.asarray(attr_map, dtype=np.float64)
    g = attr_map.shape[-1]
    total = attr_map.sum(axis=(-2, -1))
    inside = (attr_map * cell_coverage(box, g)).sum(axis=(-2, -1))
    degenerate = total <= DEGENERATE_EPS
    score = np.where(degenerate, 0.0, inside / np.where(degenerate, 1.0, total))
    return np.clip(score, 0.0, 1.0), degenerate
