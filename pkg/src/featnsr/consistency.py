"""Feature maps, feature-metric patch losses and occlusion-aware view selection.

The scalar functions (``patch_ncc``, ``patch_ssim``, ...) operate on plain
arrays and define the metrics.  ``feature_loss`` is the batched, taped
counterpart used in training; it evaluates all candidate views of all
surface-hitting rays at once and is checked against the scalar versions in
the test suite.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import NoUsableViews, OutOfImage, ParseError
from .geometry import Camera, TangentPlane, apply_homography, homography, pixel_directions, project

NSRF_MAGIC = b"NSRF"
NSRF_VERSION = 1
LOSS_KINDS = ("pixel_sim", "patch_sim", "patch_ncc", "patch_ssim")


@dataclass
class FeatureMap:
    data: np.ndarray  # C x Hf x Wf
    image_size: tuple[int, int]  # (W, H)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def scale(self) -> tuple[float, float]:
        return self.data.shape[2] / self.image_size[0], self.data.shape[1] / self.image_size[1]


@dataclass(frozen=True)
class PatchSpec:
    center: tuple[float, float]
    size: int = 11

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"patch size must be odd, got {self.size}")

    @property
    def offsets(self) -> np.ndarray:
        return patch_offsets(self.size)

    @property
    def pixels(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) + self.offsets


def patch_offsets(size: int) -> np.ndarray:
    """``size**2`` integer (du, dv) offsets, row-major over v then u."""
    h = size // 2
    dv, du = np.mgrid[-h:h + 1, -h:h + 1]
    return np.stack([du.ravel(), dv.ravel()], axis=1).astype(np.float64)


@dataclass(frozen=True)
class ConsistencyConfig:
    loss_kind: str = "patch_ncc"
    patch_size: int = 11
    n_candidates: int = 10
    top_k: int = 4
    c1: float = 0.01
    c2: float = 0.03
    eps_var: float = 1e-6

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if not 1 <= self.top_k <= self.n_candidates:
            raise ValueError("need 1 <= top_k <= n_candidates")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("c1 and c2 must be positive")
        if self.patch_size % 2 == 0:
            raise ValueError("patch size must be odd")


# -- feature files -------------------------------------------------------------


def write_nsrf(path, fm: FeatureMap) -> None:
    c, hf, wf = fm.data.shape
    w, h = fm.image_size
    header = NSRF_MAGIC + struct.pack("<6I", NSRF_VERSION, c, hf, wf, w, h)
    Path(path).write_bytes(header + np.ascontiguousarray(fm.data, dtype="<f4").tobytes())


def read_nsrf(path) -> FeatureMap:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"{path}: cannot read feature file ({exc})") from exc
    if len(raw) < 28 or raw[:4] != NSRF_MAGIC:
        raise ParseError(f"{path}: not a feature file (bad magic {raw[:4]!r})")
    version, c, hf, wf, w, h = struct.unpack_from("<6I", raw, 4)
    if version != NSRF_VERSION:
        raise ParseError(f"{path}: unsupported feature version {version}")
    n = c * hf * wf
    if len(raw) != 28 + 4 * n:
        raise ParseError(f"{path}: expected {28 + 4 * n} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=28).astype(np.float64).reshape(c, hf, wf)
    return FeatureMap(data, (w, h))


# -- scalar metrics --------------------------------------------------------------


def in_image(x, width: int, height: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (x[..., 0] >= -0.5) & (x[..., 0] <= width - 0.5) & (x[..., 1] >= -0.5) & (x[..., 1] <= height - 0.5)


def sample_feature(fm: FeatureMap, x) -> np.ndarray:
    """C-vector at image pixel coordinate ``x`` (bilinear, border-clamped)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(in_image(x, *fm.image_size)):
        raise OutOfImage(f"pixel {x.tolist()} outside image {fm.image_size}")
    return ad.bilinear_sample(fm.data, x, fm.scale)


def pixel_similarity(f_r, f_s) -> float:
    f_r = np.asarray(f_r, dtype=np.float64)
    f_s = np.asarray(f_s, dtype=np.float64)
    nr, ns = np.linalg.norm(f_r), np.linalg.norm(f_s)
    if nr == 0 or ns == 0:
        return 0.0
    return float(f_r @ f_s / (nr * ns))


def _masked(fr, fs, mask):
    fr = np.asarray(fr, dtype=np.float64)
    fs = np.asarray(fs, dtype=np.float64)
    if mask is None:
        mask = np.ones(fr.shape[-1], dtype=bool)
    return fr[:, mask], fs[:, mask]


def patch_ncc(fr, fs, mask=None, eps_var: float = 1e-6) -> float:
    """Channel-averaged normalized cross-correlation of two ``C x P^2`` patches."""
    fr, fs = _masked(fr, fs, mask)
    cr = fr - fr.mean(axis=1, keepdims=True)
    cs = fs - fs.mean(axis=1, keepdims=True)
    cov = (cr * cs).mean(axis=1)
    var_r = (cr * cr).mean(axis=1)
    var_s = (cs * cs).mean(axis=1)
    return float(np.mean(cov / np.sqrt(var_r * var_s + eps_var ** 2)))


def patch_ssim(fr, fs, mask=None, c1: float = 0.01, c2: float = 0.03) -> float:
    fr, fs = _masked(fr, fs, mask)
    mu_r, mu_s = fr.mean(axis=1), fs.mean(axis=1)
    var_r = ((fr - mu_r[:, None]) ** 2).mean(axis=1)
    var_s = ((fs - mu_s[:, None]) ** 2).mean(axis=1)
    cov = ((fr - mu_r[:, None]) * (fs - mu_s[:, None])).mean(axis=1)
    num = (2 * mu_r * mu_s + c1) * (2 * cov + c2)
    den = (mu_r ** 2 + mu_s ** 2 + c1) * (var_r + var_s + c2)
    return float(np.mean(num / den))


def patch_sim(fr, fs, mask=None) -> float:
    """Mean cosine similarity of corresponding C-vectors."""
    fr, fs = _masked(fr, fs, mask)
    return float(np.mean([pixel_similarity(fr[:, i], fs[:, i]) for i in range(fr.shape[1])]))


# -- warping and view selection -----------------------------------------------------


def warp_patch(ref: Camera, src: Camera, plane: TangentPlane, patch: PatchSpec):
    """Source-view coordinates of every reference patch pixel.

    All pixels go through the single homography of the patch's plane.
    Returns ``(coords (P^2, 2), valid (P^2,), usable)``; a pixel is invalid
    when it lands outside the source image or its plane point is behind
    either camera, and a patch with more than half its pixels invalid is
    unusable.
    """
    H = homography(ref, src, plane)
    pix = patch.pixels
    with np.errstate(divide="ignore", invalid="ignore"):
        coords = apply_homography(H, pix)
        dirs = pixel_directions(ref, pix)
        o = ref.center
        t = -(plane.n @ o + plane.d) / (dirs @ plane.n)
    pts = o + t[:, None] * dirs
    front = (t > 0) & ((pts @ src.R.T + src.t)[:, 2] > 0)
    valid = front & np.all(np.isfinite(coords), axis=1) & in_image(coords, src.width, src.height)
    usable = 2 * int((~valid).sum()) <= len(pix)
    return coords, valid, usable


def candidate_views(cams: Sequence[Camera], ref_view: int, point, n_candidates: int) -> list[int]:
    """Source views ordered by the angle their viewing ray makes with the reference ray."""
    point = np.asarray(point, dtype=np.float64)
    d_ref = point - cams[ref_view].center
    d_ref /= np.linalg.norm(d_ref)
    scored = []
    for j, cam in enumerate(cams):
        if j == ref_view:
            continue
        d = point - cam.center
        d /= np.linalg.norm(d)
        scored.append((float(np.arccos(np.clip(d @ d_ref, -1.0, 1.0))), j))
    scored.sort()
    return [j for _, j in scored[:n_candidates]]


def patch_score(kind: str, fr, fs, mask, cfg: ConsistencyConfig) -> float:
    if kind == "patch_ncc":
        return patch_ncc(fr, fs, mask, cfg.eps_var)
    if kind == "patch_ssim":
        return patch_ssim(fr, fs, mask, cfg.c1, cfg.c2)
    if kind == "patch_sim":
        return patch_sim(fr, fs, mask)
    raise ValueError(kind)


def select_and_aggregate(ref_view: int, point, normal, maps: Sequence[FeatureMap], cams: Sequence[Camera],
                         cfg: ConsistencyConfig, pixel=None):
    """Feature loss of one surface point and the source views it used.

    ``pixel`` defaults to the projection of ``point`` into the reference view.
    Returns ``(loss, views)``; raises ``NoUsableViews`` when no candidate
    patch is usable.
    """
    ref = cams[ref_view]
    if pixel is None:
        pixel = project(ref, point)
    plane = TangentPlane.through(point, normal)
    size = 1 if cfg.loss_kind == "pixel_sim" else cfg.patch_size
    patch = PatchSpec(tuple(np.asarray(pixel, dtype=np.float64)), size)
    ref_pix = patch.pixels
    ref_valid = in_image(ref_pix, ref.width, ref.height)
    fr = ad.bilinear_sample(maps[ref_view].data, ref_pix, maps[ref_view].scale).T
    losses = []
    for j in candidate_views(cams, ref_view, point, cfg.n_candidates):
        coords, valid, _ = warp_patch(ref, cams[j], plane, patch)
        mask = valid & ref_valid
        if 2 * int((~mask).sum()) > size * size:
            continue
        fs = ad.bilinear_sample(maps[j].data, np.where(mask[:, None], coords, 0.0), maps[j].scale).T
        if cfg.loss_kind == "pixel_sim":
            losses.append((1.0 - pixel_similarity(fr[:, 0], fs[:, 0]), j))
        else:
            losses.append((1.0 - patch_score(cfg.loss_kind, fr, fs, mask, cfg), j))
    if not losses:
        raise NoUsableViews(f"no usable source view for reference view {ref_view}")
    loss, keep = aggregate_losses([l for l, _ in losses], cfg.top_k, use_top_k=cfg.loss_kind != "pixel_sim")
    return loss, [losses[i][1] for i in keep]


def aggregate_losses(losses, k: int, use_top_k: bool = True):
    """Mean of the ``k`` smallest losses (or the first ``k`` when ``use_top_k`` is off).

    ``losses`` are in candidate order; returns ``(mean, kept indices)``.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if use_top_k:
        keep = np.argsort(losses, kind="stable")[:k]
    else:
        keep = np.arange(min(k, len(losses)))
    return float(np.mean(losses[keep])), [int(i) for i in keep]


# -- batched taped loss -------------------------------------------------------------


@dataclass
class FeatureLossResult:
    per_ray: Optional[ad.Var]  # loss of each ray with >= 1 usable view
    rows: np.ndarray  # indices (into the crossing set) of those rays
    selected: np.ndarray  # (n_rays, n_candidates) bool, views kept
    candidates: np.ndarray  # (n_rays, n_candidates) view ids, -1 padded
    pair_loss: np.ndarray = field(repr=False, default=None)


def _stack_maps(maps: Sequence[FeatureMap]):
    shapes = {fm.data.shape for fm in maps}
    if len(shapes) != 1:
        raise ValueError("batched feature loss needs equally sized feature maps")
    return np.stack([fm.data for fm in maps])


class FeatureBank:
    """All views' feature maps stacked for batched lookups."""

    def __init__(self, maps: Sequence[FeatureMap], cams: Sequence[Camera]):
        self.maps = list(maps)
        self.cams = list(cams)
        self.stack = _stack_maps(maps)
        self.scale = maps[0].scale
        self.centers = np.stack([c.center for c in cams])
        self.sizes = np.array([(c.width, c.height) for c in cams], dtype=np.float64)
        self.K_inv = np.stack([c.K_inv for c in cams])
        # A[r, s] = K_s R_s R_r^T K_r^-1 and a[r, s] = K_s R_s (R_s^T t_s - R_r^T t_r)
        V = len(cams)
        self.A = np.zeros((V, V, 3, 3))
        self.a = np.zeros((V, V, 3))
        for r, cr in enumerate(cams):
            for s, cs in enumerate(cams):
                self.A[r, s] = cs.K @ cs.R @ cr.R.T @ cr.K_inv
                self.a[r, s] = cs.K @ cs.R @ (cs.R.T @ cs.t - cr.R.T @ cr.t)
        self.R = np.stack([c.R for c in cams])


def candidate_table(bank: FeatureBank, ref_views: np.ndarray, points: np.ndarray, n_candidates: int) -> np.ndarray:
    """Vectorized ``candidate_views``: (n, n_candidates) view ids, -1 padded."""
    d = points[:, None, :] - bank.centers[None]
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    n = len(points)
    d_ref = d[np.arange(n), ref_views]
    ang = np.arccos(np.clip(np.einsum("nvk,nk->nv", d, d_ref), -1.0, 1.0))
    ang[np.arange(n), ref_views] = np.inf
    order = np.lexsort((np.broadcast_to(np.arange(ang.shape[1]), ang.shape), ang), axis=1)
    k = min(n_candidates, ang.shape[1] - 1)
    out = order[:, :k]
    if k < n_candidates:
        out = np.concatenate([out, -np.ones((n, n_candidates - k), dtype=np.int64)], axis=1)
    return out


def feature_loss(bank: FeatureBank, cfg: ConsistencyConfig, ref_views: np.ndarray, pixels: np.ndarray,
                 origins: np.ndarray, dirs: np.ndarray, t_star: ad.Var, normals: np.ndarray) -> FeatureLossResult:
    """Per-ray feature loss for rays with located surface points.

    ``t_star`` is the taped crossing depth; the plane normal is a constant and
    the plane offset follows the located point, so gradients reach the SDF
    through the crossing depth only.
    """
    n = len(ref_views)
    P = 1 if cfg.loss_kind == "pixel_sim" else cfg.patch_size
    offsets = patch_offsets(P)
    P2 = len(offsets)
    tv = t_star.value
    points = origins + tv[:, None] * dirs
    nrm = normals / np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
    cands = candidate_table(bank, ref_views, points, cfg.n_candidates)
    K = cands.shape[1]
    has = cands >= 0
    src = np.where(has, cands, 0)

    ref_pix = pixels[:, None, :] + offsets[None]  # n, P2, 2
    W, H = bank.sizes[ref_views].T
    ref_valid = in_image(ref_pix, W[:, None], H[:, None])
    fr = ad.bilinear_sample(bank.stack, ref_pix, bank.scale, ref_views[:, None])  # n, P2, C
    xt = np.concatenate([ref_pix, np.ones((n, P2, 1))], axis=-1)

    # hom(x) = A x - a (n_w^T R_r^T K_r^-1 x) / d_cam
    A = bank.A[ref_views[:, None], src]  # n, K, 3, 3
    a = bank.a[ref_views[:, None], src]  # n, K, 3
    row = np.einsum("nk,nkl,nlm->nm", nrm, bank.R[ref_views].transpose(0, 2, 1), bank.K_inv[ref_views])
    U = np.einsum("nkij,npj->nkpi", A, xt)
    rx = np.einsum("nm,npm->np", row, xt)
    Wt = a[:, :, None, :] * rx[:, None, :, None]  # n, K, P2, 3
    p_star = ad.reshape(t_star, (n, 1)) * dirs + origins
    d_world = -ad.sum_(p_star * nrm, axis=1)
    d_cam = d_world + np.sum(nrm * bank.centers[ref_views], axis=1)
    inv_d = ad.reshape(1.0 / d_cam, (n, 1, 1, 1))
    hom = U - Wt * inv_d
    hz = hom.value[..., 2]
    # points in front of the reference camera give positive hz iff in front of the source
    ok_z = (hz > 1e-12) & (tv[:, None, None] > 0)
    safe_z = ad.where(ok_z[..., None], hom[..., 2:3], 1.0)
    coords = ad.div(hom[..., 0:2], safe_z)
    cv = coords.value
    src_valid = ok_z & in_image(cv, bank.sizes[src][..., 0][..., None], bank.sizes[src][..., 1][..., None])
    mask = src_valid & ref_valid[:, None, :] & has[..., None]
    coords = ad.where(mask[..., None], coords, 0.0)
    fs = ad.bilinear_sample(bank.stack, coords, bank.scale, src[..., None])  # n, K, P2, C
    usable = 2 * (P2 - mask.sum(axis=2)) <= P2
    usable &= has
    m = mask.astype(np.float64)[..., None]  # n, K, P2, 1
    fr_b = fr[:, None]  # n, 1, P2, C
    score = _taped_score(cfg, fr_b, fs, m)
    pair = 1.0 - score
    pair_val = np.where(usable, pair.value, np.inf)

    selected = np.zeros((n, K), dtype=bool)
    if cfg.loss_kind == "pixel_sim":
        rank = np.cumsum(usable, axis=1)
        selected = usable & (rank <= cfg.top_k)
    else:
        order = np.argsort(pair_val, axis=1, kind="stable")
        kk = np.minimum(usable.sum(axis=1), cfg.top_k)
        for i in range(n):
            selected[i, order[i, :kk[i]]] = True
    counts = selected.sum(axis=1)
    rows = np.nonzero(counts > 0)[0]
    if rows.size == 0:
        return FeatureLossResult(None, rows, selected, cands, pair_val)
    sel_w = selected / np.maximum(counts, 1)[:, None]
    per_ray = ad.sum_(ad.where(usable, pair, 0.0) * sel_w, axis=1)
    return FeatureLossResult(per_ray[rows], rows, selected, cands, pair_val)


def _taped_score(cfg: ConsistencyConfig, fr: np.ndarray, fs: ad.Var, m: np.ndarray) -> ad.Var:
    """Patch similarity per (ray, view) with a constant validity mask ``m``."""
    wsum = np.maximum(m.sum(axis=2, keepdims=True), 1.0)  # n, K, 1, 1
    if cfg.loss_kind in ("pixel_sim", "patch_sim"):
        dot = ad.sum_(fs * fr, axis=-1)
        ns2 = ad.sum_(ad.square(fs), axis=-1)
        nr = np.sqrt(np.sum(fr * fr, axis=-1))
        ok = (ns2.value > 0) & (nr > 0)
        cos = ad.where(ok, ad.div(dot, ad.sqrt(ad.where(ok, ns2, 1.0)) * np.where(nr > 0, nr, 1.0)), 0.0)
        return ad.div(ad.sum_(cos * m[..., 0], axis=2), wsum[..., 0, 0])
    mu_r = np.sum(fr * m, axis=2, keepdims=True) / wsum
    mu_s = ad.sum_(fs * m, axis=2, keepdims=True) / wsum
    cr = (fr - mu_r) * m
    cs = (fs - mu_s) * m
    var_r = np.sum(cr * cr, axis=2, keepdims=True) / wsum
    var_s = ad.sum_(ad.square(cs), axis=2, keepdims=True) / wsum
    cov = ad.sum_(cs * cr, axis=2, keepdims=True) / wsum
    if cfg.loss_kind == "patch_ncc":
        per_c = ad.div(cov, ad.sqrt(var_s * var_r + cfg.eps_var ** 2))
    else:
        num = (mu_s * (2.0 * mu_r) + cfg.c1) * (cov * 2.0 + cfg.c2)
        den = (ad.square(mu_s) + (mu_r ** 2 + cfg.c1)) * (var_s + (var_r + cfg.c2))
        per_c = ad.div(num, den)
    return ad.mean(ad.reshape(per_c, per_c.shape[:2] + (per_c.shape[-1],)), axis=-1)
