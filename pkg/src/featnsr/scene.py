"""Scene directories and the synthetic scene generator.

A scene directory holds ``scene.json``, one image and one feature file per
view, and optionally ``gt_points.xyz``.  Synthetic scenes are built from
analytic SDF shapes: ground-truth depth comes from sphere tracing, colors
from Lambertian shading of a procedural texture, and features from a smooth
function of the 3D surface point, which makes them multi-view consistent.
"""
from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .consistency import FeatureMap, read_nsrf, write_nsrf
from .errors import NSRError, ParseError, ShapeTooLarge, ValidationError
from .geometry import Camera, look_at, pixel_directions, sphere_bounds

SHAPE_MARGIN = 0.9
LIGHT_DIR = np.array([0.35, -0.45, 0.82]) / np.linalg.norm([0.35, -0.45, 0.82])
BACKGROUND_FEATURE = -1.5


# -- analytic shapes ------------------------------------------------------------


@dataclass
class ShapeSpec:
    kind: str
    radius: float = 0.5
    half_extents: tuple = (0.3, 0.3, 0.3)
    major: float = 0.45
    minor: float = 0.15
    center: tuple = (0.0, 0.0, 0.0)
    rotation: Optional[list] = None  # 3x3 local-to-world, row-major nested list
    children: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "torus", "union"):
            raise ValueError(f"unknown shape kind {self.kind!r}")

    @property
    def rot(self) -> np.ndarray:
        return np.eye(3) if self.rotation is None else np.asarray(self.rotation, dtype=np.float64)

    def bounding_radius(self) -> float:
        c = float(np.linalg.norm(self.center))
        if self.kind == "sphere":
            return c + self.radius
        if self.kind == "box":
            return c + float(np.linalg.norm(self.half_extents))
        if self.kind == "torus":
            return c + self.major + self.minor
        return max(ch.bounding_radius() for ch in self.children)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "center": list(map(float, self.center))}
        if self.rotation is not None:
            d["rotation"] = [list(map(float, r)) for r in self.rot]
        if self.kind == "sphere":
            d["radius"] = float(self.radius)
        elif self.kind == "box":
            d["half_extents"] = list(map(float, self.half_extents))
        elif self.kind == "torus":
            d["major"], d["minor"] = float(self.major), float(self.minor)
        else:
            d["children"] = [ch.to_dict() for ch in self.children]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        d = dict(d)
        children = [cls.from_dict(c) for c in d.pop("children", [])]
        if "half_extents" in d:
            d["half_extents"] = tuple(d["half_extents"])
        if "center" in d:
            d["center"] = tuple(d["center"])
        return cls(children=children, **d)


def rotation_z(deg: float) -> list:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]


def rotation_x(deg: float) -> list:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]


def preset_shape(name: str) -> ShapeSpec:
    if name == "sphere":
        return ShapeSpec("sphere", radius=0.5)
    if name == "box":
        return ShapeSpec("box", half_extents=(0.4, 0.3, 0.3), rotation=rotation_z(25.0))
    if name == "torus":
        return ShapeSpec("torus", major=0.45, minor=0.18, rotation=rotation_x(60.0))
    if name == "union":
        return ShapeSpec("union", children=[
            ShapeSpec("sphere", radius=0.33, center=(-0.22, 0.08, 0.05)),
            ShapeSpec("box", half_extents=(0.22, 0.22, 0.2), center=(0.24, -0.1, -0.08),
                      rotation=rotation_z(30.0)),
        ])
    raise ValueError(f"unknown shape preset {name!r}")


def analytic_sdf(shape: ShapeSpec, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if shape.kind == "union":
        return np.min(np.stack([analytic_sdf(ch, p) for ch in shape.children]), axis=0)
    q = (p - np.asarray(shape.center)) @ shape.rot  # world -> local
    if shape.kind == "sphere":
        return np.linalg.norm(q, axis=-1) - shape.radius
    if shape.kind == "box":
        d = np.abs(q) - np.asarray(shape.half_extents)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        return outside + np.minimum(np.max(d, axis=-1), 0.0)
    ring = np.linalg.norm(q[..., [0, 2]], axis=-1) - shape.major
    return np.hypot(ring, q[..., 1]) - shape.minor


def sdf_gradient(shape: ShapeSpec, p, h: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    g = np.stack([(analytic_sdf(shape, p + h * e) - analytic_sdf(shape, p - h * e)) / (2 * h)
                  for e in np.eye(3)], axis=-1)
    return g


def sphere_trace(shape: ShapeSpec, o, v, max_iter: int = 256, tol: float = 1e-6):
    """Depth of the first surface hit along unit rays ``o + t v``.

    Returns ``(t, hit)``; rays missing the unit sphere or the shape get NaN.
    """
    o = np.broadcast_to(np.asarray(o, dtype=np.float64), np.shape(v))
    v = np.asarray(v, dtype=np.float64)
    t_near, t_far, inside = sphere_bounds(o, v)
    t = np.where(inside, t_near, 0.0)
    active = inside.copy()
    done = np.zeros_like(inside)
    for _ in range(max_iter):
        if not active.any():
            break
        d = analytic_sdf(shape, o[active] + t[active, None] * v[active])
        idx = np.nonzero(active)[0]
        conv = np.abs(d) < tol
        done[idx[conv]] = True
        t[idx[~conv]] += d[~conv]
        escaped = t > t_far
        active = inside & ~done & ~escaped
    # polish converged hits with Newton steps along the ray
    idx = np.nonzero(done)[0]
    for _ in range(3):
        if idx.size == 0:
            break
        p = o[idx] + t[idx, None] * v[idx]
        d = analytic_sdf(shape, p)
        slope = np.sum(sdf_gradient(shape, p) * v[idx], axis=-1)
        step = np.where(slope < -1e-3, d / slope, 0.0)
        t[idx] -= step
    return np.where(done, t, np.nan), done


def sample_surface(shape: ShapeSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points on the boundary of ``shape``, uniform by area."""
    prims = _primitives(shape)
    areas = np.array([_area(s) for s in prims])
    out = []
    total = 0
    while total < n:
        m = max(2 * (n - total), 1024)
        which = rng.choice(len(prims), size=m, p=areas / areas.sum())
        pts = np.concatenate([_sample_primitive(prims[i], int((which == i).sum()), rng)
                              for i in range(len(prims))])
        pts = pts[np.abs(analytic_sdf(shape, pts)) < 1e-6]
        pts = pts[rng.permutation(len(pts))]
        out.append(pts)
        total += len(pts)
    return np.concatenate(out)[:n]


def _primitives(shape):
    if shape.kind == "union":
        return [p for ch in shape.children for p in _primitives(ch)]
    return [shape]


def _area(s: ShapeSpec) -> float:
    if s.kind == "sphere":
        return 4 * np.pi * s.radius ** 2
    if s.kind == "box":
        a, b, c = s.half_extents
        return 8 * (a * b + b * c + a * c)
    return 4 * np.pi ** 2 * s.major * s.minor


def _sample_primitive(s: ShapeSpec, n: int, rng) -> np.ndarray:
    if n == 0:
        return np.zeros((0, 3))
    if s.kind == "sphere":
        q = rng.normal(size=(n, 3))
        q = s.radius * q / np.linalg.norm(q, axis=1, keepdims=True)
    elif s.kind == "box":
        a = np.asarray(s.half_extents)
        face_area = np.array([a[1] * a[2], a[1] * a[2], a[0] * a[2], a[0] * a[2], a[0] * a[1], a[0] * a[1]])
        face = rng.choice(6, size=n, p=face_area / face_area.sum())
        q = rng.uniform(-1, 1, size=(n, 3)) * a
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        q[np.arange(n), axis] = sign * a[axis]
    else:
        # rejection on the minor angle gives area-uniform samples
        qs = []
        while sum(len(x) for x in qs) < n:
            theta = rng.uniform(0, 2 * np.pi, 2 * n)
            phi = rng.uniform(0, 2 * np.pi, 2 * n)
            keep = rng.uniform(0, 1, 2 * n) < (s.major + s.minor * np.cos(phi)) / (s.major + s.minor)
            theta, phi = theta[keep], phi[keep]
            r = s.major + s.minor * np.cos(phi)
            qs.append(np.stack([r * np.cos(theta), s.minor * np.sin(phi), r * np.sin(theta)], axis=1))
        q = np.concatenate(qs)[:n]
    return q @ s.rot.T + np.asarray(s.center)


# -- procedural appearance ----------------------------------------------------------


FEATURE_FREQS = (10.0, 20.0, 40.0)


class Appearance:
    """Seeded texture and feature functions of the 3D surface point."""

    def __init__(self, seed: int, channels: int):
        rng = np.random.default_rng([seed, 7])
        self.tex_dirs = rng.normal(size=(3, 3, 3))
        self.tex_dirs /= np.linalg.norm(self.tex_dirs, axis=-1, keepdims=True)
        self.tex_phase = rng.uniform(0, 2 * np.pi, size=(3, 3))
        self.base = np.array([0.85, 0.62, 0.45])
        dirs = rng.normal(size=(channels, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        # a few surface-texture wavelengths per 64-pixel view: distinctive
        # enough that a patch pins down depth, smooth enough to resample
        freqs = np.array(FEATURE_FREQS)[np.arange(channels) % len(FEATURE_FREQS)]
        self.feat_w = dirs * freqs[:, None]
        self.feat_phase = rng.uniform(0, 2 * np.pi, size=channels)

    def texture(self, p: np.ndarray) -> np.ndarray:
        """Three octaves of oriented sinusoids per color channel, in [0, 1]."""
        out = np.zeros(p.shape[:-1] + (3,))
        for octave in range(3):
            freq = 4.0 * 2 ** octave
            amp = 0.5 ** octave
            out += amp * np.sin(freq * p @ self.tex_dirs[octave].T + self.tex_phase[octave])
        return 0.5 + out / 3.5

    def color(self, p: np.ndarray, n: np.ndarray) -> np.ndarray:
        albedo = self.base * (0.45 + 0.55 * self.texture(p))
        shade = 0.3 + 0.7 * np.clip(n @ LIGHT_DIR, 0.0, None)
        return np.clip(albedo * shade[..., None], 0.0, 1.0)

    def features(self, p: np.ndarray) -> np.ndarray:
        return np.sin(p @ self.feat_w.T + self.feat_phase)


# -- scene container ------------------------------------------------------------


@dataclass
class Scene:
    cameras: list
    images: np.ndarray  # V x H x W x 3
    features: list
    background: np.ndarray
    gt_points: Optional[np.ndarray] = None
    shape: Optional[ShapeSpec] = None
    path: Optional[Path] = None

    @property
    def n_views(self) -> int:
        return len(self.cameras)


def ring_cameras(n_views: int, width: int, height: int, distance: float = 2.8,
                 fill_radius: float = 0.75) -> list:
    """Cameras on two elevation rings (30 degrees above and below the equator) looking at
    the origin, alternating between the rings so every side of the object is observed."""
    f = 0.5 * min(width, height) / np.tan(np.arcsin(fill_radius / distance))
    K = np.array([[f, 0, (width - 1) / 2], [0, f, (height - 1) / 2], [0, 0, 1.0]])
    cams = []
    for k in range(n_views):
        az = 2 * np.pi * k / n_views
        el = np.deg2rad(30.0 if k % 2 == 0 else -30.0)
        center = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        R, t = look_at(center)
        cams.append(Camera(K, R, t, width, height))
    return cams


def render_view(shape: ShapeSpec, cam: Camera, app: Appearance, pix: np.ndarray, background):
    """Ground-truth depth, color and features at pixel coords ``pix`` (..., 2)."""
    flat = pix.reshape(-1, 2)
    v = pixel_directions(cam, flat)
    o = np.broadcast_to(cam.center, v.shape)
    t, hit = sphere_trace(shape, o, v)
    p = o + np.where(hit, t, 0.0)[:, None] * v
    n = sdf_gradient(shape, p)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    color = np.where(hit[:, None], app.color(p, n), np.asarray(background))
    feats = np.where(hit[:, None], app.features(p), BACKGROUND_FEATURE)
    shp = pix.shape[:-1]
    return t.reshape(shp), color.reshape(shp + (3,)), feats.reshape(shp + (-1,))


def generate_scene(shape: ShapeSpec, n_views: int, img_size=(64, 64), channels: int = 8,
                   feature_scale: int = 1, seed: int = 0, out_dir=None, feature_noise: float = 0.0,
                   raw_images: bool = False, n_gt_points: int = 100_000, background=(0.0, 0.0, 0.0),
                   threads: int = 1) -> Scene:
    """Build a synthetic scene and write it to ``out_dir`` when given."""
    if n_views < 4:
        raise ValueError(f"need at least 4 views, got {n_views}")
    if shape.bounding_radius() > SHAPE_MARGIN:
        raise ShapeTooLarge(f"shape bounding radius {shape.bounding_radius():.3f} exceeds {SHAPE_MARGIN}")
    if feature_scale not in (1, 2, 4, 8):
        raise ValueError("feature scale must be 1, 2, 4 or 8")
    W, H = img_size
    if W % feature_scale or H % feature_scale:
        raise ValueError("image size must be divisible by the feature scale")
    cams = ring_cameras(n_views, W, H)
    app = Appearance(seed, channels)
    bg = np.asarray(background, dtype=np.float64)
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    img_pix = np.stack([uu, vv], axis=-1)
    Wf, Hf = W // feature_scale, H // feature_scale
    vf, uf = np.mgrid[0:Hf, 0:Wf].astype(np.float64)
    # feature texel centers in image coordinates
    feat_pix = np.stack([(uf + 0.5) * feature_scale - 0.5, (vf + 0.5) * feature_scale - 0.5], axis=-1)

    def one_view(k):
        _, color, _ = render_view(shape, cams[k], app, img_pix, bg)
        _, _, feats = render_view(shape, cams[k], app, feat_pix, bg)
        feats = np.moveaxis(feats, -1, 0)
        if feature_noise > 0:
            noise_rng = np.random.default_rng([seed, 11, k])
            feats = feats + noise_rng.normal(0.0, feature_noise, feats.shape)
        return color, FeatureMap(feats.astype(np.float32).astype(np.float64), (W, H))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(one_view, range(n_views)))
    images = np.stack([r[0] for r in results])
    if not raw_images:
        images = np.round(images * 255.0) / 255.0
    else:
        images = images.astype(np.float32).astype(np.float64)
    features = [r[1] for r in results]
    gt = sample_surface(shape, n_gt_points, np.random.default_rng([seed, 3])) if n_gt_points else None
    scene = Scene(cams, images, features, bg, gt, shape)
    if out_dir is not None:
        write_scene(scene, out_dir, raw_images=raw_images,
                    generator={"seed": seed, "channels": channels, "feature_scale": feature_scale,
                               "feature_noise": feature_noise})
        scene.path = Path(out_dir)
    return scene


def write_scene(scene: Scene, out_dir, raw_images: bool = False, generator: Optional[dict] = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    views = []
    for k, cam in enumerate(scene.cameras):
        img_name = f"image_{k:04d}.{'raw' if raw_images else 'png'}"
        feat_name = f"feat_{k:04d}.nsrf"
        if raw_images:
            (out / img_name).write_bytes(np.ascontiguousarray(scene.images[k], dtype="<f4").tobytes())
        else:
            arr = np.round(scene.images[k] * 255.0).astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(out / img_name, format="PNG")
        write_nsrf(out / feat_name, scene.features[k])
        views.append({"K": cam.K.ravel().tolist(), "R": cam.R.ravel().tolist(), "t": cam.t.tolist(),
                      "width": cam.width, "height": cam.height, "image": img_name, "features": feat_name})
    doc = {"views": views, "background": np.asarray(scene.background).tolist()}
    if scene.gt_points is not None:
        doc["gt_points"] = "gt_points.xyz"
        write_xyz(out / "gt_points.xyz", scene.gt_points)
    if scene.shape is not None:
        doc["shape"] = scene.shape.to_dict()
    if generator:
        doc["generator"] = generator
    (out / "scene.json").write_text(json.dumps(doc, indent=1) + "\n")


def write_xyz(path, pts: np.ndarray) -> None:
    lines = "\n".join(f"{x:.9f} {y:.9f} {z:.9f}" for x, y, z in np.asarray(pts, dtype=np.float64))
    Path(path).write_text(lines + "\n")


def read_xyz(path) -> np.ndarray:
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # empty file: handled by the caller
            pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ParseError(f"{path}: cannot parse point file ({exc})") from exc
    if pts.size and pts.shape[1] != 3:
        raise ParseError(f"{path}: expected 3 columns, found {pts.shape[1]}")
    return pts.reshape(-1, 3)


def _vec(view: dict, key: str, n: int, where: str) -> np.ndarray:
    if key not in view:
        raise ValidationError(f"{where}: missing field {key!r}")
    try:
        arr = np.asarray(view[key], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}.{key}: not numeric") from exc
    if arr.shape != (n,):
        raise ValidationError(f"{where}.{key}: expected {n} numbers, got shape {arr.shape}")
    return arr


def load_scene(path) -> Scene:
    root = Path(path)
    meta_path = root / "scene.json"
    try:
        doc = json.loads(meta_path.read_text())
    except OSError as exc:
        raise ParseError(f"{meta_path}: cannot read ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{meta_path}: malformed JSON ({exc})") from exc
    views = doc.get("views")
    if not isinstance(views, list) or not views:
        raise ValidationError(f"{meta_path}: 'views' must be a non-empty list")
    cams, images, feats = [], [], []
    for k, view in enumerate(views):
        where = f"{meta_path}: views[{k}]"
        K = _vec(view, "K", 9, where).reshape(3, 3)
        R = _vec(view, "R", 9, where).reshape(3, 3)
        t = _vec(view, "t", 3, where)
        try:
            width, height = int(view["width"]), int(view["height"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{where}: width/height missing or invalid") from exc
        try:
            cams.append(Camera(K, R, t, width, height))
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from exc
        images.append(_read_image(root / str(view.get("image", "")), width, height))
        fm = read_nsrf(root / str(view.get("features", "")))
        if fm.image_size != (width, height):
            raise ValidationError(f"{root / view['features']}: image size {fm.image_size} != {(width, height)}")
        if fm.data.shape[1] > height or fm.data.shape[2] > width:
            raise ValidationError(f"{root / view['features']}: feature grid larger than the image")
        if not np.all(np.isfinite(fm.data)):
            raise ValidationError(f"{root / view['features']}: non-finite feature values")
        feats.append(fm)
    if len({fm.channels for fm in feats}) != 1:
        raise ValidationError(f"{meta_path}: views disagree on feature channel count")
    if len({im.shape for im in images}) != 1:
        raise ValidationError(f"{meta_path}: views disagree on image size")
    bg = np.asarray(doc.get("background", [0.0, 0.0, 0.0]), dtype=np.float64)
    if bg.shape != (3,):
        raise ValidationError(f"{meta_path}: background must be 3 numbers")
    gt = read_xyz(root / doc["gt_points"]) if doc.get("gt_points") else None
    shape = None
    if "shape" in doc:
        try:
            shape = ShapeSpec.from_dict(doc["shape"])
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{meta_path}: bad shape descriptor ({exc})") from exc
    return Scene(cams, np.stack(images), feats, bg, gt, shape, root)


def _read_image(path: Path, width: int, height: int) -> np.ndarray:
    if path.suffix == ".raw":
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise ParseError(f"{path}: cannot read image ({exc})") from exc
        if len(raw) != 4 * 3 * width * height:
            raise ParseError(f"{path}: expected {12 * width * height} bytes, found {len(raw)}")
        return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(height, width, 3)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ParseError(f"{path}: cannot decode image ({exc})") from exc
    if arr.shape != (height, width, 3):
        raise ValidationError(f"{path}: image is {arr.shape[1]}x{arr.shape[0]}, expected {width}x{height}")
    return arr


def ground_truth_depth(scene: Scene, view: int, pix: np.ndarray):
    """Sphere-traced depth along pixel rays of ``view`` (needs the shape descriptor)."""
    if scene.shape is None:
        raise NSRError("scene has no analytic shape descriptor")
    cam = scene.cameras[view]
    v = pixel_directions(cam, pix)
    t, hit = sphere_trace(scene.shape, np.broadcast_to(cam.center, v.shape), v)
    return t, hit, v
