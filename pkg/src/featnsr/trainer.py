"""Loss assembly, learning-rate schedule and the optimization loop.

One step samples a batch of pixels over all views, renders them, and
minimizes ``L = L_color + lambda1 * L_eik + lambda2 * L_feat``.  Rays are
processed in a fixed partition of chunks, each with its own tape; the chunk
gradients are summed in chunk order, so results do not depend on how many
worker threads run the chunks.
"""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .consistency import ConsistencyConfig, FeatureBank, feature_loss
from .field import DESK_FIELD, Field, FieldConfig, FieldParams, save_checkpoint, uniform_ball
from .geometry import pixel_directions, sphere_bounds
from .optim import Adam
from .renderer import field_sdf, render_rays, sample_depths
from .scene import Scene

METRICS_COLUMNS = ("step", "L_color", "L_eik", "L_feat", "L", "lr", "crossing_frac")
TRAIN_LOSS_KINDS = ("none", "pixel_sim", "patch_sim", "patch_ncc", "patch_ssim")


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 0.1
    lambda2: float = 0.5
    loss_kind: str = "patch_ncc"
    patch_size: int = 11
    n_candidates: int = 10
    top_k: int = 4
    rays_per_batch: int = 512
    steps: int = 3000
    warmup_steps: int = 100
    lr_peak: float = 5e-3
    lr_final: float = 2.5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    n_coarse: int = 64
    n_fine: int = 64
    chunk_rays: int = 64
    eik_jitter: float = 0.02
    eik_points_per_ray: int = 1
    ema_decay: float = 0.98
    threads: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lr_final > self.lr_peak:
            raise ValueError("lr_final must not exceed lr_peak")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ValueError("need 0 <= warmup_steps <= steps")
        if self.loss_kind not in TRAIN_LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.rays_per_batch < 1 or self.chunk_rays < 1 or self.eik_points_per_ray < 1:
            raise ValueError("ray counts must be positive")

    @property
    def feature_weight(self) -> float:
        return 0.0 if self.loss_kind == "none" else self.lambda2

    def consistency(self) -> Optional[ConsistencyConfig]:
        if self.loss_kind == "none":
            return None
        return ConsistencyConfig(loss_kind=self.loss_kind, patch_size=self.patch_size,
                                 n_candidates=self.n_candidates, top_k=self.top_k)


# Settings used for single-core desk runs: fewer rays and samples per step.
DESK_TRAIN = dict(rays_per_batch=128, n_coarse=32, n_fine=32, chunk_rays=64)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr_peak``, then cosine decay to ``lr_final``."""
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    if cfg.steps == cfg.warmup_steps:
        return cfg.lr_final if step >= cfg.steps else cfg.lr_peak
    u = min((step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps), 1.0)
    return cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * (1.0 + math.cos(math.pi * u)) / 2.0


def color_loss(pred, gt) -> float:
    """Mean over rays of the L1 color error."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    return float(np.abs(pred - gt).sum(axis=1).mean())


def eikonal_points(rng: np.random.Generator, n_points: int, ray_points: Optional[np.ndarray] = None,
                   jitter: float = 0.02) -> np.ndarray:
    """Half uniform in the unit ball, half jittered copies of ``ray_points``."""
    n_ray = 0 if ray_points is None or len(ray_points) == 0 else n_points // 2
    ball = uniform_ball(rng, n_points - n_ray)
    if n_ray == 0:
        return ball
    pick = ray_points[rng.integers(0, len(ray_points), n_ray)]
    return np.concatenate([ball, pick + rng.normal(0.0, jitter, pick.shape)])


def eikonal_loss(params: FieldParams, n_points: int, rng_seed: int, field: Optional[Field] = None,
                 sdf_grad: Optional[Callable] = None) -> float:
    """Mean of ``(|grad sdf| - 1)^2`` over ``n_points`` points in the unit ball.

    ``sdf_grad`` maps points to gradients and overrides the network (used for
    analytic fields).
    """
    if n_points <= 0:
        raise ValueError("n_points must be positive")
    pts = uniform_ball(np.random.default_rng(rng_seed), n_points)
    if sdf_grad is not None:
        g = np.asarray(sdf_grad(pts), dtype=np.float64)
    else:
        field = field or Field()
        g = field.sdf_and_normal(params, pts)[1]
    return float(np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2))


@dataclass
class StepReport:
    step: int
    L_color: float
    L_eik: float
    L_feat: float
    L: float
    lr: float
    crossing_frac: float
    ema: dict = field(default_factory=dict)

    def row(self) -> list:
        return [self.step] + [repr(float(getattr(self, k))) for k in METRICS_COLUMNS[1:]]


def total_loss(l_color: float, l_eik: float, l_feat: float, cfg: TrainConfig) -> float:
    return l_color + cfg.lambda1 * l_eik + cfg.feature_weight * l_feat


@dataclass
class TrainState:
    params: FieldParams
    opt: Adam
    step: int = 0
    ema: dict = field(default_factory=dict)


@dataclass
class _Chunk:
    tape: ad.Tape
    theta: ad.Var
    color_sum: Optional[ad.Var]
    eik_sum: Optional[ad.Var]
    feat_sum: Optional[ad.Var]
    color_val: float
    eik_count: int
    feat_count: int
    crossings: int
    frozen: dict


class Trainer:
    """Owns the field, optimizer state and the scene's static data."""

    def __init__(self, scene: Scene, cfg: TrainConfig, field_cfg: FieldConfig = DESK_FIELD,
                 params: Optional[FieldParams] = None):
        self.scene = scene
        self.cfg = cfg
        self.field = Field(field_cfg)
        if params is None:
            params = self.field.init_params(cfg.seed)
        self.state = TrainState(params, Adam(self.field.size, cfg.beta1, cfg.beta2, cfg.adam_eps))
        self.consistency = cfg.consistency()
        self.bank = FeatureBank(scene.features, scene.cameras) if self.consistency else None
        V = scene.n_views
        H, W = scene.images.shape[1:3]
        self.shape = (V, H, W)
        self.centers = np.stack([c.center for c in scene.cameras])
        vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
        pix = np.stack([uu.ravel(), vv.ravel()], axis=1)
        self.dirs = np.stack([pixel_directions(c, pix) for c in scene.cameras])  # V, H*W, 3
        self.pix = pix

    # -- one step ---------------------------------------------------------------

    def sample_batch(self, rng: np.random.Generator):
        V, H, W = self.shape
        flat = rng.integers(0, V * H * W, self.cfg.rays_per_batch)
        views, pix_idx = np.divmod(flat, H * W)
        o = self.centers[views]
        v = self.dirs[views, pix_idx]
        gt = self.scene.images[views, pix_idx // W, pix_idx % W]
        return views, self.pix[pix_idx], o, v, gt

    def _forward_chunk(self, k: int, rays, eik_pts, frozen: Optional[dict] = None,
                       vector: Optional[np.ndarray] = None) -> _Chunk:
        """Tape the loss terms of one chunk.

        Sample depths and the (stop-gradient) surface normals are computed
        from the current parameters unless given in ``frozen``; both are
        recorded in ``chunk.frozen`` so the same loss can be re-evaluated at
        other parameter values (used for finite-difference checks).
        """
        cfg = self.cfg
        params = self.state.params
        if vector is not None:
            params = FieldParams(np.asarray(vector, dtype=np.float64), self.field.layout)
        frozen = {} if frozen is None else frozen
        views, pix, o, v, gt = rays
        tape = ad.Tape()
        theta = tape.leaf(params.vector)
        t_near, t_far, hit = sphere_bounds(o, v)
        bg = self.scene.background
        miss_err = float(np.abs(bg - gt[~hit]).sum())
        color_sum = eik_sum = feat_sum = None
        color_val = miss_err
        crossings = feat_count = 0
        record = {}
        if hit.any():
            oh, vh = o[hit], v[hit]
            depths = frozen.get("depths")
            if depths is None:
                rng = np.random.default_rng([cfg.seed, self.state.step, k, 1])
                depths = sample_depths(field_sdf(self.field, params), params.s, oh, vh, t_near[hit], t_far[hit],
                                       rng, cfg.n_coarse, cfg.n_fine)
            record["depths"] = depths
            out = render_rays(self.field, theta, oh, vh, depths, bg)
            color_sum = ad.sum_(ad.abs_(out.color - gt[hit])) + miss_err
            color_val = float(color_sum.value)
            crossings = len(out.crossing_rows)
            if self.consistency is not None and out.t_star is not None:
                rows = out.crossing_rows
                normals = frozen.get("normals")
                if normals is None or len(normals) != len(rows):
                    p_star = oh[rows] + out.t_star.value[:, None] * vh[rows]
                    normals = self.field.sdf_and_normal(params, p_star)[1]
                record["normals"] = normals
                res = feature_loss(self.bank, self.consistency, views[hit][rows], pix[hit][rows],
                                   oh[rows], vh[rows], out.t_star, normals)
                if res.per_ray is not None:
                    feat_sum = ad.sum_(res.per_ray)
                    feat_count = len(res.rows)
        if len(eik_pts):
            _, _, g = self.field.geometry(theta, eik_pts)
            norm = ad.sqrt(ad.sum_(ad.square(g), axis=1))
            eik_sum = ad.sum_(ad.square(norm - 1.0))
        return _Chunk(tape, theta, color_sum, eik_sum, feat_sum, color_val, len(eik_pts), feat_count, crossings,
                      record)

    def _chunk_objective(self, c: _Chunk, n_rays: int, n_eik: int, n_feat: int):
        """Chunk's share of the normalized total loss as a taped scalar (or None)."""
        cfg = self.cfg
        terms = []
        if c.color_sum is not None:
            terms.append(c.color_sum * (1.0 / n_rays))
        if c.eik_sum is not None:
            terms.append(c.eik_sum * (cfg.lambda1 / max(n_eik, 1)))
        if c.feat_sum is not None and cfg.feature_weight > 0:
            terms.append(c.feat_sum * (cfg.feature_weight / n_feat))
        if not terms:
            return None
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        return loss

    def micro_batch_loss(self, vector: np.ndarray, rays, eik_pts, frozen: Optional[dict] = None):
        """``(loss, gradient, frozen)`` of the full objective on one chunk of rays.

        Pass the returned ``frozen`` back in to evaluate the identical
        function (same samples, same stop-gradient normals) at other
        parameter values.
        """
        c = self._forward_chunk(0, rays, eik_pts, frozen, vector)
        obj = self._chunk_objective(c, len(rays[0]), c.eik_count, c.feat_count)
        if obj is None:
            return 0.0, np.zeros(self.field.size), c.frozen
        return float(obj.value), ad.backward(c.tape, obj, c.theta), c.frozen

    def train_step(self, pool: Optional[ThreadPoolExecutor] = None) -> StepReport:
        cfg = self.cfg
        st = self.state
        rng = np.random.default_rng([cfg.seed, st.step])
        rays = self.sample_batch(rng)
        n = cfg.rays_per_batch
        # ray samples for the near-surface half of the eikonal points
        o, v = rays[2], rays[3]
        t_near, t_far, hit = sphere_bounds(o, v)
        mid = o[hit] + (0.5 * (t_near[hit] + t_far[hit]) + (t_far[hit] - t_near[hit]) * (rng.random(hit.sum()) - 0.5))[:, None] * v[hit]
        m = cfg.eik_points_per_ray
        eik = eikonal_points(rng, n * m, self._surface_guess(o[hit], v[hit], t_near[hit], t_far[hit], mid),
                             cfg.eik_jitter)
        bounds = list(range(0, n, cfg.chunk_rays)) + [n]
        chunk_args = [(k, tuple(x[a:b] for x in rays), eik[a * m:b * m])
                      for k, (a, b) in enumerate(zip(bounds[:-1], bounds[1:]))]
        run = pool.map if pool is not None else map
        chunks = list(run(lambda args: self._forward_chunk(*args), chunk_args))

        n_eik = sum(c.eik_count for c in chunks)
        n_feat = sum(c.feat_count for c in chunks)
        l_color = sum(c.color_val for c in chunks) / n
        l_eik = sum(float(c.eik_sum.value) for c in chunks if c.eik_sum is not None) / max(n_eik, 1)
        l_feat = sum(float(c.feat_sum.value) for c in chunks if c.feat_sum is not None) / max(n_feat, 1)

        def chunk_grad(c: _Chunk) -> np.ndarray:
            obj = self._chunk_objective(c, n, n_eik, n_feat)
            if obj is None:
                return np.zeros(self.field.size)
            return ad.backward(c.tape, obj, c.theta)

        grads = list(run(chunk_grad, chunks))
        grad = np.zeros(self.field.size)
        for g in grads:
            grad += g
        lr = lr_at(st.step, cfg)
        st.opt.step(st.params.vector, grad, lr)
        crossing_frac = sum(c.crossings for c in chunks) / n
        report = StepReport(st.step, l_color, l_eik, l_feat, total_loss(l_color, l_eik, l_feat, cfg), lr,
                            crossing_frac)
        for key in ("L_color", "L_eik", "L_feat", "L"):
            val = getattr(report, key)
            prev = st.ema.get(key)
            st.ema[key] = val if prev is None else cfg.ema_decay * prev + (1 - cfg.ema_decay) * val
        report.ema = dict(st.ema)
        st.step += 1
        return report

    def _surface_guess(self, o, v, t_near, t_far, fallback):
        """Points near the current zero level set along the batch rays (numpy, coarse)."""
        if len(o) == 0:
            return fallback
        ts = t_near[:, None] + (t_far - t_near)[:, None] * np.linspace(0.0, 1.0, 16)[None]
        sdf = self.field.sdf(self.state.params, o[:, None] + ts[..., None] * v[:, None])
        first = np.argmax(sdf < 0, axis=1)
        has = (sdf < 0).any(axis=1)
        t = np.where(has, ts[np.arange(len(o)), first], 0.0)
        pts = o + t[:, None] * v
        return np.where(has[:, None], pts, fallback)

    # -- loop -----------------------------------------------------------------------

    def run(self, out_dir=None, on_step: Optional[Callable[[StepReport], None]] = None) -> list[StepReport]:
        cfg = self.cfg
        out = Path(out_dir) if out_dir is not None else None
        reports: list[StepReport] = []
        writer = fh = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            fh = open(out / "metrics.csv", "w", newline="")
            writer = csv.writer(fh)
            writer.writerow(METRICS_COLUMNS)
        pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
        try:
            with threadpool_limits(limits=1, user_api="blas"):
                while self.state.step < cfg.steps:
                    rep = self.train_step(pool)
                    reports.append(rep)
                    if writer is not None:
                        writer.writerow(rep.row())
                    if on_step is not None:
                        on_step(rep)
                    if out is not None and cfg.checkpoint_every and self.state.step % cfg.checkpoint_every == 0:
                        save_checkpoint(out / f"ckpt_{self.state.step:06d}.nsrw", self.state.params)
        except KeyboardInterrupt:
            if out is not None:
                save_checkpoint(out / "interrupted.nsrw", self.state.params)
            raise
        finally:
            if pool is not None:
                pool.shutdown()
            if fh is not None:
                fh.close()
        if out is not None:
            save_checkpoint(out / "final.nsrw", self.state.params)
        return reports


def train(scene: Scene, cfg: TrainConfig, out_dir=None, field_cfg: FieldConfig = DESK_FIELD,
          on_step: Optional[Callable[[StepReport], None]] = None):
    """Train a field on ``scene``; returns ``(params, field, reports, seconds)``."""
    t0 = time.perf_counter()
    trainer = Trainer(scene, cfg, field_cfg)
    reports = trainer.run(out_dir, on_step)
    return trainer.state.params, trainer.field, reports, time.perf_counter() - t0


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def desk_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(**DESK_TRAIN), **overrides)
