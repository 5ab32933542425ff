"""Command-line entry point: gen-scene, train, mesh, eval and check-warp.

Exit codes: 0 success, 2 usage error, 3 runtime or validation failure.
Options can also come from a ``--config`` file of ``key = value`` lines
(keys are flag names without the leading dashes); command-line flags win
over the file, and the file wins over built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .consistency import ConsistencyConfig, in_image, patch_offsets, warp_patch
from .errors import NSRError
from .field import DESK_FIELD, FieldConfig, load_checkpoint
from .geometry import TangentPlane, pixel_directions, project_points
from .meshing import MIN_RESOLUTION, chamfer_distance, clip_to_ball, marching_cubes, read_ply, sample_mesh, write_ply
from .scene import generate_scene, load_scene, preset_shape, read_xyz, sdf_gradient, sphere_trace
from .trainer import DESK_TRAIN, TrainConfig, Trainer

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
LOSS_FLAGS = {"none": "none", "pixel-sim": "pixel_sim", "patch-sim": "patch_sim",
              "patch-ncc": "patch_ncc", "patch-ssim": "patch_ssim"}


class UsageError(Exception):
    pass


def _resolution(text: str) -> tuple[int, int]:
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return w, h


def _default_threads() -> int:
    env = os.environ.get("NSR_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="featnsr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file with default flag values")
    common.add_argument("--threads", type=int, default=_default_threads(),
                        help="worker threads (default: $NSR_THREADS or 1); never changes results")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", parents=[common], help="generate a synthetic scene")
    g.add_argument("--shape", choices=["sphere", "box", "torus", "union"], default="sphere")
    g.add_argument("--views", type=int, default=12)
    g.add_argument("--res", type=_resolution, default=(64, 64))
    g.add_argument("--channels", type=int, default=8)
    g.add_argument("--feature-scale", type=int, choices=[1, 2, 4, 8], default=1)
    g.add_argument("--feature-noise", type=float, default=0.0)
    g.add_argument("--gt-points", type=int, default=100_000)
    g.add_argument("--raw", action="store_true", help="store images as raw float32 instead of PNG")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="fit a field to a scene")
    t.add_argument("--scene", required=True)
    t.add_argument("--loss", choices=list(LOSS_FLAGS), default="patch-ncc")
    t.add_argument("--steps", type=int, default=3000)
    t.add_argument("--warmup", type=int, default=100)
    t.add_argument("--patch", type=int, default=11)
    t.add_argument("--topk", type=int, default=4)
    t.add_argument("--candidates", type=int, default=10)
    t.add_argument("--lambda1", type=float, default=0.1)
    t.add_argument("--lambda2", type=float, default=0.5)
    t.add_argument("--profile", choices=["desk", "full"], default="desk",
                   help="desk: small network and batch for one CPU core; full: 512 rays, 64+64 samples, 8x256 network")
    t.add_argument("--rays", type=int, help="rays per batch (overrides the profile)")
    t.add_argument("--samples", type=int, help="coarse and fine samples per ray (overrides the profile)")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)

    m = sub.add_parser("mesh", parents=[common], help="extract a mesh from a checkpoint")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--res", type=int, default=128)
    m.add_argument("--out", required=True)

    e = sub.add_parser("eval", parents=[common], help="Chamfer distance between a mesh and ground truth")
    e.add_argument("--mesh", required=True)
    e.add_argument("--gt", required=True, help="gt_points.xyz or a scene directory")
    e.add_argument("--samples", type=int, default=100_000)
    e.add_argument("--scene-name", default=None)
    e.add_argument("--loss", default="unknown", help="label for the loss column")
    e.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("check-warp", parents=[common], help="verify warping and feature consistency at ground truth")
    c.add_argument("--scene", required=True)
    c.add_argument("--samples", type=int, default=200)
    c.add_argument("--loss", choices=[k for k in LOSS_FLAGS if k != "none"], default="pixel-sim")
    c.add_argument("--patch", type=int, default=11)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--lenient", action="store_true", help="report but do not fail on feature loss at truth")
    c.add_argument("--max-reproj", type=float, default=1e-5)
    c.add_argument("--max-feature-loss", type=float, default=2e-2)
    return p


def read_config(path) -> list[str]:
    """Turn a ``key = value`` file into flag tokens."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    tokens = []
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        value = value.strip("\"'")
        if value.lower() in ("true", "yes", "on"):
            tokens.append(flag)
        elif value.lower() in ("false", "no", "off"):
            continue
        else:
            tokens += [flag, value]
    return tokens


def parse_args(argv):
    argv = list(argv)
    parser = build_parser()
    if "--config" in argv:
        i = argv.index("--config")
        if i + 1 >= len(argv):
            parser.error("--config needs a file")
        cfg_tokens = read_config(argv[i + 1])
        # config values go right after the subcommand so explicit flags override them
        cmd = next((k for k, a in enumerate(argv) if a in COMMANDS), None)
        if cmd is None:
            parser.error("missing command")
        argv = argv[:cmd + 1] + cfg_tokens + argv[cmd + 1:]
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    return args


def write_manifest(out_dir: Path, command: str, config: dict, seed, outputs: dict, timings: dict) -> Path:
    manifest = {"command": command, "version": __version__, "seed": seed, "config": config,
                "outputs": {k: str(v) for k, v in outputs.items()}, "timings_s": timings}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, default=str) + "\n")
    return path


def _jsonable(args) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()}


# -- commands -------------------------------------------------------------------


def cmd_gen_scene(args) -> int:
    if args.views < 4:
        raise NSRError(f"--views must be at least 4, got {args.views}")
    out = Path(args.out)
    t0 = time.perf_counter()
    generate_scene(preset_shape(args.shape), args.views, args.res, args.channels, args.feature_scale, args.seed,
                   out_dir=out, feature_noise=args.feature_noise, raw_images=args.raw, n_gt_points=args.gt_points,
                   threads=args.threads)
    outputs = {"scene": out / "scene.json"}
    if args.gt_points:
        outputs["gt_points"] = out / "gt_points.xyz"
    write_manifest(out, "gen-scene", _jsonable(args), args.seed, outputs, {"generate": time.perf_counter() - t0})
    print(f"wrote {args.views} views to {out}")
    return EXIT_OK


def train_config_from_args(args) -> tuple[TrainConfig, FieldConfig]:
    base = dict(DESK_TRAIN) if args.profile == "desk" else {}
    if args.rays is not None:
        base["rays_per_batch"] = args.rays
    if args.samples is not None:
        base["n_coarse"] = base["n_fine"] = args.samples
    cfg = TrainConfig(lambda1=args.lambda1, lambda2=args.lambda2, loss_kind=LOSS_FLAGS[args.loss],
                      patch_size=args.patch, n_candidates=args.candidates, top_k=args.topk, steps=args.steps,
                      warmup_steps=min(args.warmup, args.steps), seed=args.seed, threads=args.threads,
                      checkpoint_every=args.checkpoint_every, **base)
    return cfg, (DESK_FIELD if args.profile == "desk" else FieldConfig())


def cmd_train(args) -> int:
    try:
        cfg, field_cfg = train_config_from_args(args)
        ConsistencyConfig(patch_size=args.patch, n_candidates=args.candidates, top_k=args.topk)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    t0 = time.perf_counter()
    scene = load_scene(args.scene)
    t_load = time.perf_counter() - t0
    out = Path(args.out)
    trainer = Trainer(scene, cfg, field_cfg)
    last = {}

    def progress(rep):
        last["rep"] = rep
        if rep.step % 250 == 0 or rep.step == cfg.steps - 1:
            print(f"step {rep.step:5d}  L={rep.ema['L']:.4f}  color={rep.ema['L_color']:.4f}  "
                  f"eik={rep.ema['L_eik']:.4f}  feat={rep.ema['L_feat']:.4f}  lr={rep.lr:.2e}", flush=True)

    t1 = time.perf_counter()
    trainer.run(out, progress)
    config = {"train": asdict(cfg), "field": asdict(field_cfg), "scene": str(args.scene)}
    write_manifest(out, "train", config, cfg.seed,
                   {"metrics": out / "metrics.csv", "checkpoint": out / "final.nsrw"},
                   {"load": t_load, "train": time.perf_counter() - t1})
    print(f"wrote {out / 'final.nsrw'}")
    return EXIT_OK


def cmd_mesh(args) -> int:
    if args.res < MIN_RESOLUTION:
        raise UsageError(f"--res must be at least {MIN_RESOLUTION}")
    t0 = time.perf_counter()
    params, field = load_checkpoint(args.ckpt)
    mesh = marching_cubes(clip_to_ball(lambda x: field.sdf(params, x)), args.res)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ply(out, mesh)
    write_manifest(out.parent, "mesh", _jsonable(args), None, {"mesh": out}, {"mesh": time.perf_counter() - t0})
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles to {out}"
          f" (watertight: {mesh.is_watertight()})")
    return EXIT_OK


def cmd_eval(args) -> int:
    mesh = read_ply(args.mesh)
    gt_path = Path(args.gt)
    if gt_path.is_dir():
        gt_path = gt_path / "gt_points.xyz"
    gt = read_xyz(gt_path)
    if len(gt) == 0:
        raise NSRError(f"{gt_path}: no ground-truth points")
    if len(mesh.triangles) == 0:
        raise NSRError(f"{args.mesh}: mesh has no triangles")
    pts = sample_mesh(mesh, args.samples, np.random.default_rng(args.seed))
    acc, comp, mean = chamfer_distance(pts, gt)
    name = args.scene_name or gt_path.parent.name
    print("scene,loss,acc,comp,mean")
    print(f"{name},{args.loss},{acc:.6f},{comp:.6f},{mean:.6f}")
    return EXIT_OK


def warp_check(scene, n_samples: int, cfg: ConsistencyConfig, seed: int):
    """Reprojection errors, feature losses and ``(ref, src)`` view pairs of ground-truth patches.

    Each sample picks a reference pixel that sees the surface and a source
    view that also sees the same point.  The patch is warped with the
    homography of the true tangent plane; the reprojection error compares
    that against intersecting each patch pixel's ray with the plane and
    projecting the intersection.  The feature loss is ``1 - metric`` between
    the reference patch and the warped source patch.
    """
    from .autodiff import bilinear_sample
    from .consistency import patch_score, pixel_similarity, PatchSpec

    if scene.shape is None:
        raise NSRError("scene has no analytic shape descriptor; cannot build ground truth")
    rng = np.random.default_rng(seed)
    cams = scene.cameras
    size = 1 if cfg.loss_kind == "pixel_sim" else cfg.patch_size
    reproj, losses, pairs = [], [], []
    attempts = 0
    while len(losses) < n_samples and attempts < 50 * n_samples:
        attempts += 1
        r = int(rng.integers(len(cams)))
        ref = cams[r]
        x = rng.uniform([0, 0], [ref.width - 1, ref.height - 1])
        v = pixel_directions(ref, x[None])
        t, hit = sphere_trace(scene.shape, ref.center[None], v)
        if not hit[0]:
            continue
        p = ref.center + t[0] * v[0]
        n = sdf_gradient(scene.shape, p[None])[0]
        n /= np.linalg.norm(n)
        visible = []
        for s, cam in enumerate(cams):
            if s == r:
                continue
            xs, z = project_points(cam, p[None])
            if z[0] <= 0 or not in_image(xs[0], cam.width, cam.height):
                continue
            d = p - cam.center
            dist = np.linalg.norm(d)
            ts, hs = sphere_trace(scene.shape, cam.center[None], (d / dist)[None])
            if hs[0] and abs(ts[0] - dist) < 1e-4:
                visible.append(s)
        if not visible:
            continue
        s = visible[int(rng.integers(len(visible)))]
        src = cams[s]
        plane = TangentPlane.through(p, n)
        patch = PatchSpec(tuple(x), size)
        coords, valid, usable = warp_patch(ref, src, plane, patch)
        pix = patch.pixels
        dirs = pixel_directions(ref, pix)
        depth = -(plane.n @ ref.center + plane.d) / (dirs @ plane.n)
        brute, _ = project_points(src, ref.center + depth[:, None] * dirs)
        mask = valid & in_image(pix, ref.width, ref.height)
        if not usable or 2 * int((~mask).sum()) > len(pix):
            continue
        pairs.append((r, s))
        reproj.append(float(np.max(np.linalg.norm(coords[mask] - brute[mask], axis=1))))
        fr = bilinear_sample(scene.features[r].data, pix, scene.features[r].scale).T
        fs = bilinear_sample(scene.features[s].data, np.where(mask[:, None], coords, 0.0),
                             scene.features[s].scale).T
        if cfg.loss_kind == "pixel_sim":
            losses.append(1.0 - pixel_similarity(fr[:, 0], fs[:, 0]))
        else:
            losses.append(1.0 - patch_score(cfg.loss_kind, fr, fs, mask, cfg))
    return np.array(reproj), np.array(losses), np.array(pairs, dtype=np.int64).reshape(-1, 2)




def cmd_check_warp(args) -> int:
    scene = load_scene(args.scene)
    try:
        cfg = ConsistencyConfig(loss_kind=LOSS_FLAGS[args.loss], patch_size=args.patch)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    reproj, losses, _ = warp_check(scene, args.samples, cfg, args.seed)
    if len(losses) == 0:
        print("check-warp: no visible ground-truth patches found", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"samples={len(losses)} reproj_max_px={reproj.max():.3e} reproj_mean_px={reproj.mean():.3e}")
    print(f"feature_loss median={np.median(losses):.3e} mean={losses.mean():.3e} max={losses.max():.3e} "
          f"(loss={args.loss}, patch={1 if cfg.loss_kind == 'pixel_sim' else cfg.patch_size})")
    failed = False
    if reproj.max() > args.max_reproj:
        print(f"FAIL: reprojection error {reproj.max():.3e} px exceeds {args.max_reproj:g}", file=sys.stderr)
        failed = True
    if np.median(losses) > args.max_feature_loss:
        msg = f"median feature loss at truth {np.median(losses):.3e} exceeds {args.max_feature_loss:g}"
        if args.lenient:
            print(f"note: {msg} (lenient)")
        else:
            print(f"FAIL: {msg}", file=sys.stderr)
            failed = True
    if not failed:
        print("check-warp: pass")
    return EXIT_RUNTIME if failed else EXIT_OK


COMMANDS = {"gen-scene": cmd_gen_scene, "train": cmd_train, "mesh": cmd_mesh, "eval": cmd_eval,
            "check-warp": cmd_check_warp}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"featnsr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"featnsr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NSRError, ValueError, OSError) as exc:
        print(f"featnsr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
