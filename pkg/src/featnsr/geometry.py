"""Pinhole cameras, rays bounded by the unit sphere, plane-induced homographies.

Conventions: ``x_cam = R @ p + t`` maps world points into the camera frame
(x right, y down, z forward); pixel ``(u, v)`` is the perspective divide of
``K @ x_cam``.  Pixel centers sit at integer coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DegeneratePlane, RayMissesBounds, ValidationError


@dataclass(frozen=True)
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        for name in ("K", "R", "t"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.validate()

    def validate(self):
        K, R = self.K, self.R
        if K.shape != (3, 3) or R.shape != (3, 3) or self.t.shape != (3,):
            raise ValidationError("camera: K and R must be 3x3, t a 3-vector")
        if not np.all(np.isfinite(K)) or not np.all(np.isfinite(R)) or not np.all(np.isfinite(self.t)):
            raise ValidationError("camera: non-finite entries")
        if np.max(np.abs(R.T @ R - np.eye(3))) >= 1e-6:
            raise ValidationError("camera: R is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValidationError(f"camera: det(R) = {np.linalg.det(R):.6f}, expected 1")
        if K[2, 2] != 1.0 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValidationError("camera: K must have K[2,2]=1 and positive focal lengths")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("camera: image size must be positive")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)


@dataclass(frozen=True)
class Ray:
    o: np.ndarray
    v: np.ndarray
    t_near: float
    t_far: float

    def at(self, t):
        return self.o + np.multiply.outer(t, self.v)


@dataclass(frozen=True)
class TangentPlane:
    """World-space plane ``n . p + d = 0``."""

    n: np.ndarray
    d: float

    @classmethod
    def through(cls, p, n) -> "TangentPlane":
        n = np.asarray(n, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return cls(n, float(-n @ np.asarray(p, dtype=np.float64)))


def sphere_bounds(o: np.ndarray, v: np.ndarray, radius: float = 1.0):
    """Ray/sphere intersection depths for batches of unit directions.

    Returns ``(t_near, t_far, hit)``; misses get NaN bounds.
    """
    o = np.asarray(o, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    b = np.sum(o * v, axis=-1)
    c = np.sum(o * o, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.where(hit, disc, np.nan))
    t_near = -b - root
    t_far = -b + root
    hit = hit & (t_far > 0)
    t_near = np.where(hit, np.maximum(t_near, 1e-6), np.nan)
    t_far = np.where(hit, t_far, np.nan)
    return t_near, t_far, hit


def pixel_directions(cam: Camera, pix: np.ndarray) -> np.ndarray:
    """Unit world-space directions through pixel coords ``pix`` (..., 2)."""
    pix = np.asarray(pix, dtype=np.float64)
    hom = np.concatenate([pix, np.ones(pix.shape[:-1] + (1,))], axis=-1)
    d = hom @ (cam.R.T @ cam.K_inv).T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_to_ray(cam: Camera, x) -> Ray:
    o = cam.center
    v = pixel_directions(cam, np.asarray(x, dtype=np.float64))
    t_near, t_far, hit = sphere_bounds(o, v)
    if not hit:
        raise RayMissesBounds(f"pixel {tuple(np.asarray(x))} misses the unit sphere")
    return Ray(o, v, float(t_near), float(t_far))


def project_points(cam: Camera, p: np.ndarray):
    """Vectorized projection; returns ``(pixels, depth)``."""
    xc = np.asarray(p, dtype=np.float64) @ cam.R.T + cam.t
    depth = xc[..., 2]
    hom = xc @ cam.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = hom[..., :2] / hom[..., 2:3]
    return pix, depth


def project(cam: Camera, p) -> np.ndarray:
    pix, depth = project_points(cam, np.asarray(p, dtype=np.float64))
    if depth <= 0:
        raise BehindCamera(f"point at depth {float(depth):.3g} is behind the camera")
    return pix


def plane_in_camera(ref: Camera, plane: TangentPlane):
    """Normal and offset of ``plane`` expressed in the reference camera frame."""
    n_cam = ref.R @ plane.n
    d_cam = plane.d + plane.n @ ref.center
    return n_cam, d_cam


def homography_terms(ref: Camera, src: Camera, n_world: np.ndarray):
    """Split the plane homography as ``H = A - B / d_cam``.

    ``d_cam`` is the plane offset relative to the reference camera center.
    Only ``d_cam`` then depends on where the plane sits along its normal.
    """
    Kr_inv = ref.K_inv
    A = src.K @ src.R @ ref.R.T @ Kr_inv
    baseline = src.R.T @ src.t - ref.R.T @ ref.t
    n_cam = ref.R @ n_world
    B = src.K @ src.R @ np.outer(baseline, n_cam) @ Kr_inv
    return A, B


def homography(ref: Camera, src: Camera, plane: TangentPlane) -> np.ndarray:
    """Map homogeneous reference pixels to homogeneous source pixels."""
    n_cam, d_cam = plane_in_camera(ref, plane)
    if abs(d_cam) <= 1e-9:
        raise DegeneratePlane("plane passes through the reference camera center")
    Ks, Rs, ts = src.K, src.R, src.t
    Kr, Rr, tr = ref.K, ref.R, ref.t
    baseline = np.linalg.inv(Rs) @ ts - np.linalg.inv(Rr) @ tr
    H = Ks @ Rs @ (np.eye(3) - np.outer(baseline, n_cam) @ Rr / d_cam) @ np.linalg.inv(Rr) @ np.linalg.inv(Kr)
    if abs(H[2, 2]) > 1e-12:
        H = H / H[2, 2]
    return H


def apply_homography(H: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    hom = np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1) @ H.T
    return hom[..., :2] / hom[..., 2:3]


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """World-to-camera ``(R, t)`` for a camera at ``center`` facing ``target``."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ center
