"""Ray sampling, unbiased SDF alpha compositing and zero-crossing search."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .field import Field, FieldParams
from .geometry import Ray

EPS = 1e-6
N_COARSE = 64
N_FINE = 64


def sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def alpha_from_sdf(sdf_i, sdf_next, s):
    """Opacity of the interval between two consecutive samples."""
    phi_i = sigmoid(s * np.asarray(sdf_i, dtype=np.float64))
    phi_n = sigmoid(s * np.asarray(sdf_next, dtype=np.float64))
    ok = phi_i >= 1e-12
    alpha = np.where(ok, np.maximum((phi_i - phi_n) / np.where(ok, phi_i, 1.0), 0.0), 0.0)
    return float(alpha) if alpha.ndim == 0 else alpha


def ray_alphas(sdf: np.ndarray, s: float) -> np.ndarray:
    """Per-sample alphas along the last axis; the final sample gets 0."""
    alpha = np.zeros_like(sdf)
    alpha[..., :-1] = alpha_from_sdf(sdf[..., :-1], sdf[..., 1:], s)
    return alpha


def transmittance(alpha: np.ndarray) -> np.ndarray:
    T = np.ones_like(alpha)
    T[..., 1:] = np.cumprod(1.0 - alpha[..., :-1], axis=-1)
    return T


def stratified(t_near, t_far, n: int, rng: np.random.Generator) -> np.ndarray:
    t_near = np.atleast_1d(t_near)[:, None]
    t_far = np.atleast_1d(t_far)[:, None]
    u = (np.arange(n) + rng.random((t_near.shape[0], n))) / n
    return t_near + (t_far - t_near) * u


def sample_pdf(edges: np.ndarray, weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling of ``n`` depths per ray from piecewise-constant bins.

    ``edges`` is ``(R, B + 1)``, ``weights`` ``(R, B)``.  Rays whose weights
    sum to (almost) zero fall back to stratified uniform samples.
    """
    R, B = weights.shape
    u = (np.arange(n) + rng.random((R, n))) / n
    total = weights.sum(axis=1, keepdims=True)
    empty = total[:, 0] < 1e-12
    pdf = np.where(empty[:, None], 1.0 / B, weights / np.where(empty[:, None], 1.0, total))
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    idx = np.empty((R, n), dtype=np.int64)
    for r in range(R):
        idx[r] = np.searchsorted(cdf[r], u[r], side="right") - 1
    idx = np.clip(idx, 0, B - 1)
    rows = np.arange(R)[:, None]
    lo, hi = cdf[rows, idx], cdf[rows, idx + 1]
    frac = (u - lo) / np.where(hi - lo > 1e-12, hi - lo, 1.0)
    frac = np.clip(frac, 0.0, 1.0)
    out = edges[rows, idx] + frac * (edges[rows, idx + 1] - edges[rows, idx])
    # fallback rows: stratified uniform over the full range
    if empty.any():
        span = edges[empty, -1:] - edges[empty, :1]
        out[empty] = edges[empty, :1] + span * u[empty]
    return out


def sample_depths(sdf_fn, s: float, o, v, t_near, t_far, rng: np.random.Generator,
                  n_coarse: int = N_COARSE, n_fine: int = N_FINE) -> np.ndarray:
    """Coarse stratified depths plus one round of importance resampling, sorted.

    ``sdf_fn`` maps ``(..., 3)`` points to SDF values; ``s`` is the sharpness
    used to turn the coarse SDF into alpha weights.
    """
    o = np.atleast_2d(o)
    v = np.atleast_2d(v)
    coarse = stratified(t_near, t_far, n_coarse, rng)
    if n_fine == 0:
        return coarse
    pts = o[:, None, :] + coarse[..., None] * v[:, None, :]
    alpha = ray_alphas(sdf_fn(pts), s)[:, :-1]
    weights = transmittance(alpha) * alpha
    fine = sample_pdf(coarse, weights, n_fine, rng)
    fine = np.clip(fine, np.atleast_1d(t_near)[:, None], np.atleast_1d(t_far)[:, None])
    return np.sort(np.concatenate([coarse, fine], axis=1), axis=1, kind="stable")


def field_sdf(field: Field, params: FieldParams):
    return lambda x: field.sdf(params, x)


def sample_ray(ray: Ray, params: FieldParams, rng_seed: int, field: Field,
               n_coarse: int = N_COARSE, n_fine: int = N_FINE) -> np.ndarray:
    rng = np.random.default_rng(rng_seed)
    return sample_depths(field_sdf(field, params), params.s, ray.o, ray.v, ray.t_near, ray.t_far, rng, n_coarse, n_fine)[0]


def zero_crossing_index(sdf: np.ndarray) -> np.ndarray:
    """First ``i`` with ``sdf[i] * sdf[i+1] < 0`` per row, -1 when absent."""
    change = sdf[..., :-1] * sdf[..., 1:] < 0
    first = np.argmax(change, axis=-1)
    return np.where(change.any(axis=-1), first, -1)


def interpolate_crossing(t0, t1, s0, s1):
    return (s0 * t1 - s1 * t0) / (s0 - s1)


def locate_zero_crossing(depths, sdfs) -> Optional[float]:
    depths = np.asarray(depths, dtype=np.float64)
    sdfs = np.asarray(sdfs, dtype=np.float64)
    i = int(zero_crossing_index(sdfs))
    if i < 0:
        return None
    return float(interpolate_crossing(depths[i], depths[i + 1], sdfs[i], sdfs[i + 1]))


@dataclass
class RenderBatch:
    depths: np.ndarray
    sdf: np.ndarray
    alpha: np.ndarray
    trans: np.ndarray
    color: np.ndarray
    depth: np.ndarray
    weight_sum: np.ndarray
    t_star: np.ndarray  # NaN where no crossing
    p_star: np.ndarray


@dataclass
class RenderOutput:
    """Taped render results for a batch of rays."""

    depths: np.ndarray
    sdf: ad.Var
    alpha: ad.Var
    trans: ad.Var
    color: ad.Var
    depth: ad.Var
    weight_sum: ad.Var
    normal: ad.Var
    crossing_rows: np.ndarray
    crossing_idx: np.ndarray
    t_star: Optional[ad.Var]

    def batch(self, o, v) -> RenderBatch:
        R = self.depths.shape[0]
        t_star = np.full(R, np.nan)
        if self.t_star is not None:
            t_star[self.crossing_rows] = self.t_star.value
        return RenderBatch(self.depths, self.sdf.value, self.alpha.value, self.trans.value,
                           self.color.value, self.depth.value, self.weight_sum.value, t_star,
                           np.atleast_2d(o) + t_star[:, None] * np.atleast_2d(v))


def composite(sdf: ad.Var, log_s: ad.Var):
    """Taped alphas, transmittances and weights from per-sample SDF values."""
    phi = ad.sigmoid(sdf * ad.exp(log_s))
    phi_i = phi[:, :-1]
    phi_n = phi[:, 1:]
    ok = phi_i.value >= 1e-12
    ratio = ad.div(phi_i - phi_n, ad.where(ok, phi_i, 1.0))
    alpha = ad.where(ok, ad.relu(ratio), 0.0)
    alpha = ad.concat([alpha, np.zeros((alpha.shape[0], 1))], axis=1)
    trans = ad.exclusive_cumprod(1.0 - alpha)
    return alpha, trans, trans * alpha


def taped_crossing(sdf: ad.Var, depths: np.ndarray):
    """Rows with a crossing, their interval index, and the taped crossing depth."""
    idx = zero_crossing_index(sdf.value)
    rows = np.nonzero(idx >= 0)[0]
    if rows.size == 0:
        return rows, idx[rows], None
    i = idx[rows]
    s0 = sdf[rows, i]
    s1 = sdf[rows, i + 1]
    t0 = depths[rows, i]
    t1 = depths[rows, i + 1]
    t_star = ad.div(s0 * t1 - s1 * t0, s0 - s1)
    return rows, i, t_star


def render_rays(field: Field, theta: ad.Var, o: np.ndarray, v: np.ndarray, depths: np.ndarray,
                background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Volume-render rays ``o + t v`` at fixed sample ``depths`` (R, S)."""
    o = np.atleast_2d(o)
    v = np.atleast_2d(v)
    R, S = depths.shape
    pts = o[:, None, :] + depths[..., None] * v[:, None, :]
    flat = pts.reshape(-1, 3)
    sdf, feat, normal = field.geometry(theta, flat)
    dirs = np.repeat(v, S, axis=0)
    rgb = field.radiance(theta, flat, dirs, normal, feat)
    sdf = ad.reshape(sdf, (R, S))
    alpha, trans, w = composite(sdf, field.gamma(theta))
    wsum = ad.sum_(w, axis=1)
    color = ad.sum_(ad.reshape(rgb, (R, S, 3)) * ad.reshape(w, (R, S, 1)), axis=1)
    color = color + ad.reshape(1.0 - wsum, (R, 1)) * np.asarray(background, dtype=np.float64)
    depth = ad.div(ad.sum_(w * depths, axis=1), ad.where(wsum.value > EPS, wsum, EPS))
    rows, idx, t_star = taped_crossing(sdf, depths)
    return RenderOutput(depths, sdf, alpha, trans, color, depth, wsum,
                        ad.reshape(normal, (R, S, 3)), rows, idx, t_star)


def composite_values(depths: np.ndarray, sdf: np.ndarray, s: float):
    """Untaped compositing of given SDF samples.

    Returns ``(alpha, trans, weights, rendered_depth, t_star)`` with NaN
    ``t_star`` on rows without a sign change.
    """
    alpha = ray_alphas(sdf, s)
    trans = transmittance(alpha)
    w = trans * alpha
    wsum = w.sum(axis=-1)
    depth = (w * depths).sum(axis=-1) / np.maximum(wsum, EPS)
    idx = zero_crossing_index(sdf)
    rows = np.nonzero(idx >= 0)
    t_star = np.full(sdf.shape[:-1], np.nan)
    i = idx[rows]
    t_star[rows] = interpolate_crossing(depths[rows + (i,)], depths[rows + (i + 1,)],
                                        sdf[rows + (i,)], sdf[rows + (i + 1,)])
    return alpha, trans, w, depth, t_star


def render(ray: Ray, params: FieldParams, rng_seed: int, field: Field,
           n_coarse: int = N_COARSE, n_fine: int = N_FINE, background=(0.0, 0.0, 0.0)) -> RenderBatch:
    depths = sample_ray(ray, params, rng_seed, field, n_coarse, n_fine)[None]
    tape = ad.Tape()
    theta = tape.leaf(params.vector)
    out = render_rays(field, theta, ray.o, ray.v, depths, background)
    b = out.batch(ray.o, ray.v)
    return RenderBatch(*(x[0] for x in (b.depths, b.sdf, b.alpha, b.trans, b.color, b.depth,
                                         b.weight_sum, b.t_star, b.p_star)))
