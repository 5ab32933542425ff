import numpy as np
import pytest

from featnsr.geometry import Camera, look_at


def random_camera(rng, width=64, height=48, dist=(2.0, 3.5)):
    """Camera on a random sphere shell looking near the origin."""
    d = rng.normal(size=3)
    center = d / np.linalg.norm(d) * rng.uniform(*dist)
    target = rng.normal(scale=0.1, size=3)
    R, t = look_at(center, target)
    f = rng.uniform(40.0, 90.0)
    K = np.array([[f, 0.0, width / 2 + rng.uniform(-3, 3)], [0.0, f * rng.uniform(0.9, 1.1), height / 2], [0, 0, 1.0]])
    return Camera(K, R, t, width, height)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sphere_scene_dir(tmp_path_factory):
    from featnsr.scene import generate_scene, preset_shape

    out = tmp_path_factory.mktemp("sphere_scene")
    generate_scene(preset_shape("sphere"), 8, (48, 48), 6, 1, seed=3, out_dir=out, n_gt_points=5000)
    return out


def plane_world(n_views=11, size=48, seed=0, channels=6, scale=1):
    """Cameras above the textured plane z = 0 and exact per-view feature maps.

    The features are slowly varying sinusoids of the 3D point, so bilinear lookup
    between views is accurate to well below 1e-3.
    """
    from featnsr.consistency import FeatureMap
    from featnsr.geometry import pixel_directions

    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(channels, 3))
    w = dirs / np.linalg.norm(dirs, axis=1, keepdims=True) * np.array([3.0, 5.0, 8.0])[np.arange(channels) % 3, None]
    phase = rng.uniform(0, 2 * np.pi, channels)
    f = 1.1 * size
    K = np.array([[f, 0, (size - 1) / 2], [0, f, (size - 1) / 2], [0, 0, 1.0]])
    cams, maps = [], []
    for k in range(n_views):
        a = 2 * np.pi * k / n_views + rng.uniform(-0.2, 0.2)
        r = rng.uniform(0.4, 1.0)
        center = np.array([r * np.cos(a), r * np.sin(a), rng.uniform(2.2, 2.8)])
        R, t = look_at(center, (0.0, 0.0, 0.0))
        cam = Camera(K, R, t, size, size)
        cams.append(cam)
        n = size // scale
        vv, uu = np.mgrid[0:n, 0:n].astype(np.float64)
        pix = np.stack([(uu + 0.5) * scale - 0.5, (vv + 0.5) * scale - 0.5], axis=-1)
        d = pixel_directions(cam, pix)
        t_hit = -center[2] / d[..., 2]
        p = center + t_hit[..., None] * d
        maps.append(FeatureMap(np.moveaxis(np.sin(p @ w.T + phase), -1, 0), (size, size)))
    return cams, maps


def plane_point(cam, pix):
    """Where the ray through ``pix`` meets z = 0."""
    from featnsr.geometry import pixel_directions

    d = pixel_directions(cam, np.asarray(pix, dtype=np.float64))
    return cam.center + (-cam.center[2] / d[2]) * d


# -- acceptance reporting ---------------------------------------------------------------

ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=str):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
