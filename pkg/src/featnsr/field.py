"""Geometry (SDF) and radiance networks over one flat parameter vector.

The geometry MLP uses Softplus(beta=100) activations with one skip of the
encoded input; the radiance MLP uses ReLU and a sigmoid head.  The sharpness
``s`` of the renderer lives in the same vector as ``gamma = log(s)``.

Two evaluation paths exist: a plain numpy path (``Field.sdf`` and friends) for
sampling, meshing and diagnostics, and a taped path (``Field.geometry``,
``Field.radiance``) used for training.  The taped geometry path carries three
input tangents through the network so that the SDF normal is itself a taped
quantity and can be differentiated with respect to the weights.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ParseError

CKPT_MAGIC = b"NSRW"
CKPT_VERSION = 1


@dataclass(frozen=True)
class FieldConfig:
    geo_layers: int = 8
    geo_width: int = 256
    skip_layer: int = 4
    pos_freq: int = 6
    dir_freq: int = 4
    rad_layers: int = 4
    rad_width: int = 256
    beta: float = 100.0
    init_radius: float = 0.5
    init_s: float = 20.0

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.pos_freq

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.dir_freq

    @property
    def feat_dim(self) -> int:
        return self.geo_width


# Small network used for desk-scale training on a single CPU core.
DESK_FIELD = FieldConfig(geo_layers=4, geo_width=64, skip_layer=2, rad_layers=2, rad_width=64)


def build_layout(cfg: FieldConfig) -> dict[str, tuple[int, tuple[int, ...]]]:
    layout: dict[str, tuple[int, tuple[int, ...]]] = {}
    offset = 0

    def put(name, shape):
        nonlocal offset
        layout[name] = (offset, shape)
        offset += int(np.prod(shape))

    for l in range(cfg.geo_layers):
        if l == 0:
            n_in = cfg.pos_dim
        elif l == cfg.skip_layer:
            n_in = cfg.geo_width + cfg.pos_dim
        else:
            n_in = cfg.geo_width
        put(f"geo.{l}.W", (n_in, cfg.geo_width))
        put(f"geo.{l}.b", (cfg.geo_width,))
    put("geo.out.W", (cfg.geo_width, 1 + cfg.feat_dim))
    put("geo.out.b", (1 + cfg.feat_dim,))
    rad_in = 3 + cfg.dir_dim + 3 + cfg.feat_dim
    for l in range(cfg.rad_layers):
        put(f"rad.{l}.W", (rad_in if l == 0 else cfg.rad_width, cfg.rad_width))
        put(f"rad.{l}.b", (cfg.rad_width,))
    put("rad.out.W", (cfg.rad_width, 3))
    put("rad.out.b", (3,))
    put("gamma", (1,))
    return layout


def layout_size(layout) -> int:
    return max(off + int(np.prod(shape)) for off, shape in layout.values())


def config_from_layout(layout, beta=100.0) -> FieldConfig:
    """Recover the architecture of a checkpoint from its layout map."""
    geo_layers = sum(1 for k in layout if k.startswith("geo.") and k.endswith(".W") and k != "geo.out.W")
    rad_layers = sum(1 for k in layout if k.startswith("rad.") and k.endswith(".W") and k != "rad.out.W")
    pos_dim, width = layout["geo.0.W"][1]
    skip = next((l for l in range(1, geo_layers) if layout[f"geo.{l}.W"][1][0] != width), -1)
    rad_width = layout["rad.out.W"][1][0]
    rad_in = layout["rad.0.W"][1][0]
    dir_dim = rad_in - 6 - width
    return FieldConfig(geo_layers=geo_layers, geo_width=width, skip_layer=skip,
                       pos_freq=(pos_dim - 3) // 6, dir_freq=(dir_dim - 3) // 6,
                       rad_layers=rad_layers, rad_width=rad_width, beta=beta)


@dataclass
class FieldParams:
    vector: np.ndarray
    layout: dict = dc_field(repr=False)

    def view(self, name: str) -> np.ndarray:
        off, shape = self.layout[name]
        return self.vector[off:off + int(np.prod(shape))].reshape(shape)

    @property
    def gamma(self) -> float:
        return float(self.view("gamma")[0])

    @property
    def s(self) -> float:
        return float(np.exp(self.gamma))

    def copy(self) -> "FieldParams":
        return FieldParams(self.vector.copy(), dict(self.layout))


def positional_encoding(p, n_freq: int, with_jacobian: bool = False):
    """``[p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(...)]``.

    With ``with_jacobian`` also returns the derivative of the encoding along
    each input axis, shaped ``(k, ..., k + 2 k n_freq)``.
    """
    p = np.asarray(p, dtype=np.float64)
    k = p.shape[-1]
    parts = [p]
    jac = [np.broadcast_to(np.eye(k)[:, None, :], (k,) + p.shape[:-1] + (k,))] if with_jacobian else None
    for i in range(n_freq):
        w = (2.0 ** i) * np.pi
        s, c = np.sin(w * p), np.cos(w * p)
        parts += [s, c]
        if with_jacobian:
            # d sin(w p_j) / d p_j lives only in slot j
            eye = np.eye(k)[:, None, :]
            jac += [eye * (w * c)[None], eye * (-w * s)[None]]
    enc = np.concatenate(parts, axis=-1)
    if not with_jacobian:
        return enc
    return enc, np.concatenate([np.broadcast_to(j, (k,) + p.shape[:-1] + (k,)) for j in jac], axis=-1)


def uniform_ball(rng: np.random.Generator, n: int, radius: float = 1.0) -> np.ndarray:
    x = rng.normal(size=(n, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * radius * rng.random((n, 1)) ** (1.0 / 3.0)


class Field:
    """Geometry + radiance networks bound to one architecture."""

    def __init__(self, cfg: FieldConfig = FieldConfig()):
        self.cfg = cfg
        self.layout = build_layout(cfg)
        self.size = layout_size(self.layout)

    # -- parameters -------------------------------------------------------

    def init_params(self, seed: int = 0, fit_steps: int = 100) -> FieldParams:
        """Geometric initialization: the initial SDF approximates a sphere.

        The random sphere-like weights are followed by ``fit_steps`` Adam steps
        regressing the geometry head onto ``|p| - init_radius`` (values and
        normals), which removes most of the gradient-norm spread a deep random
        network has.
        """
        params = self._random_init(seed)
        if fit_steps:
            self._fit_sphere(params, fit_steps, seed)
        return params

    def _fit_sphere(self, params: FieldParams, steps: int, seed: int, n_points: int = 256, lr: float = 3e-4):
        from .optim import Adam

        rng = np.random.default_rng([seed, 1])
        opt = Adam(self.size)
        geo = np.zeros(self.size, dtype=bool)
        for name, (off, shape) in self.layout.items():
            if name.startswith("geo."):
                geo[off:off + int(np.prod(shape))] = True
        for _ in range(steps):
            x = uniform_ball(rng, n_points)
            r = np.linalg.norm(x, axis=1, keepdims=True)
            tape = ad.Tape()
            theta = tape.leaf(params.vector)
            sdf, _, normal = self.geometry(theta, x)
            loss = ad.mean(ad.square(sdf - (r[:, 0] - self.cfg.init_radius))) \
                + 0.1 * ad.mean(ad.square(normal - x / np.maximum(r, 1e-9)))
            grad = ad.backward(tape, loss, theta)
            opt.step(params.vector, np.where(geo, grad, 0.0), lr)

    def _random_init(self, seed: int) -> FieldParams:
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        params = FieldParams(np.zeros(self.size), self.layout)
        for l in range(cfg.geo_layers):
            W = params.view(f"geo.{l}.W")
            std = np.sqrt(2.0) / np.sqrt(cfg.geo_width)
            W[:] = rng.normal(0.0, std, W.shape)
            if l == 0:
                W[3:, :] = 0.0
            elif l == cfg.skip_layer:
                W[cfg.geo_width + 3:, :] = 0.0
        W = params.view("geo.out.W")
        W[:] = rng.normal(np.sqrt(np.pi) / np.sqrt(cfg.geo_width), 1e-4, W.shape)
        params.view("geo.out.b")[:] = -cfg.init_radius
        for l in list(range(cfg.rad_layers)) + ["out"]:
            W = params.view(f"rad.{l}.W")
            bound = 1.0 / np.sqrt(W.shape[0])
            W[:] = rng.uniform(-bound, bound, W.shape)
            b = params.view(f"rad.{l}.b")
            b[:] = rng.uniform(-bound, bound, b.shape)
        params.view("gamma")[:] = np.log(cfg.init_s)
        return params

    # -- numpy path ---------------------------------------------------------

    def _geo_numpy(self, vec, x, normals):
        cfg = self.cfg
        lay = self.layout

        def V(name):
            off, shape = lay[name]
            return vec[off:off + int(np.prod(shape))].reshape(shape)

        if normals:
            enc, denc = positional_encoding(x, cfg.pos_freq, with_jacobian=True)
        else:
            enc, denc = positional_encoding(x, cfg.pos_freq), None
        h, dh = enc, denc
        inv_sqrt2 = 1.0 / np.sqrt(2.0)
        for l in range(cfg.geo_layers):
            if l == cfg.skip_layer and l > 0:
                h = np.concatenate([h, enc], axis=-1) * inv_sqrt2
                if normals:
                    dh = np.concatenate([dh, denc], axis=-1) * inv_sqrt2
            W = V(f"geo.{l}.W")
            z = h @ W + V(f"geo.{l}.b")
            h, slope = ad.softplus_and_slope(z, cfg.beta)
            if normals:
                dh = slope[None] * (dh @ W)
        W = V("geo.out.W")
        out = h @ W + V("geo.out.b")
        normal = (dh @ W[:, 0]).T if normals else None
        return out[..., 0], out[..., 1:], normal

    def sdf(self, params: FieldParams, x, chunk: int = 65536) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, 3)
        out = np.empty(flat.shape[0])
        for i in range(0, flat.shape[0], chunk):
            out[i:i + chunk] = self._geo_numpy(params.vector, flat[i:i + chunk], False)[0]
        return out.reshape(x.shape[:-1])

    def sdf_and_normal(self, params: FieldParams, x, chunk: int = 16384):
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, 3)
        sdf = np.empty(flat.shape[0])
        nrm = np.empty((flat.shape[0], 3))
        for i in range(0, flat.shape[0], chunk):
            s, _, n = self._geo_numpy(params.vector, flat[i:i + chunk], True)
            sdf[i:i + chunk] = s
            nrm[i:i + chunk] = n
        return sdf.reshape(x.shape[:-1]), nrm.reshape(x.shape)

    def eval_geometry(self, params: FieldParams, p):
        """``(sdf, geo_feat, normal)`` for one point or a batch of points."""
        p = np.asarray(p, dtype=np.float64)
        single = p.ndim == 1
        sdf, feat, normal = self._geo_numpy(params.vector, p.reshape(-1, 3), True)
        if single:
            return float(sdf[0]), feat[0], normal[0]
        return sdf, feat, normal

    def eval_radiance(self, params: FieldParams, p, v, normal, geo_feat) -> np.ndarray:
        tape = ad.Tape()
        theta = tape.leaf(params.vector)
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        out = self.radiance(theta, p, np.atleast_2d(v), np.atleast_2d(normal), np.atleast_2d(geo_feat)).value
        return out[0] if np.ndim(geo_feat) == 1 else out

    # -- taped path ---------------------------------------------------------

    def view(self, theta: ad.Var, name: str) -> ad.Var:
        off, shape = self.layout[name]
        return ad.param_view(theta, off, shape)

    def gamma(self, theta: ad.Var) -> ad.Var:
        return self.view(theta, "gamma")

    def geometry(self, theta: ad.Var, x: np.ndarray, normals: bool = True):
        """Taped ``(sdf (N,), feat (N, F), normal (N, 3) or None)`` at points ``x``."""
        cfg = self.cfg
        if normals:
            enc, denc = positional_encoding(x, cfg.pos_freq, with_jacobian=True)
        else:
            enc, denc = positional_encoding(x, cfg.pos_freq), None
        h, dh = enc, denc
        inv_sqrt2 = 1.0 / np.sqrt(2.0)
        for l in range(cfg.geo_layers):
            if l == cfg.skip_layer and l > 0:
                h = ad.concat([h, enc], axis=-1) * inv_sqrt2
                if normals:
                    dh = ad.concat([dh, denc], axis=-1) * inv_sqrt2
            W = self.view(theta, f"geo.{l}.W")
            z = ad.matmul(h, W) + self.view(theta, f"geo.{l}.b")
            if normals:
                h, slope = ad.softplus_pair(z, cfg.beta)
                dh = slope * ad.matmul(dh, W)
            else:
                h = ad.softplus(z, cfg.beta)
        W = self.view(theta, "geo.out.W")
        out = ad.matmul(h, W) + self.view(theta, "geo.out.b")
        sdf = out[:, 0]
        feat = out[:, 1:]
        normal = None
        if normals:
            normal = ad.transpose(ad.matmul(dh, W[:, 0:1])[:, :, 0], (1, 0))
        return sdf, feat, normal

    def radiance(self, theta: ad.Var, x: np.ndarray, v: np.ndarray, normal, feat) -> ad.Var:
        cfg = self.cfg
        venc = positional_encoding(v, cfg.dir_freq)
        h = ad.concat([x, venc, normal, feat], axis=-1)
        for l in range(cfg.rad_layers):
            h = ad.relu(ad.matmul(h, self.view(theta, f"rad.{l}.W")) + self.view(theta, f"rad.{l}.b"))
        out = ad.matmul(h, self.view(theta, "rad.out.W")) + self.view(theta, "rad.out.b")
        return ad.sigmoid(out)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, params: FieldParams) -> None:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, params.vector.size))
    buf.write(params.vector.astype("<f8").tobytes())
    buf.write(struct.pack("<I", len(params.layout)))
    for name, (off, shape) in params.layout.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<QI", off, len(shape)))
        buf.write(struct.pack(f"<{len(shape)}Q", *shape))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[FieldParams, Field]:
    path = Path(path)
    data = path.read_bytes()
    try:
        if data[:4] != CKPT_MAGIC:
            raise ParseError(f"{path}: bad magic {data[:4]!r}")
        version, count = struct.unpack_from("<IQ", data, 4)
        if version != CKPT_VERSION:
            raise ParseError(f"{path}: unsupported version {version}")
        pos = 16
        vec = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        (n_entries,) = struct.unpack_from("<I", data, pos)
        pos += 4
        layout = {}
        for _ in range(n_entries):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            off, ndim = struct.unpack_from("<QI", data, pos)
            pos += 12
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            layout[name] = (int(off), tuple(int(s) for s in shape))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: truncated or malformed checkpoint ({exc})") from exc
    if pos != len(data):
        raise ParseError(f"{path}: {len(data) - pos} trailing bytes")
    field = Field(config_from_layout(layout))
    if field.layout != layout or field.size != count:
        raise ParseError(f"{path}: layout does not describe a known architecture")
    return FieldParams(vec, layout), field
