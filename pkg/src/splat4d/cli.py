"""Command-line surface: fit, export, refine, render, align, gradcheck.

Exit codes: 0 success, 1 gradcheck violation, 2 configuration/usage error,
3 numerical failure (non-finite loss).
"""

import argparse
import json
import os
import sys

import numpy as np

from .align import align_azimuth
from .config import ConfigError, PipelineConfig, load_config, save_config
from .fileio import (load_cloud, load_deformation, load_video, save_cloud,
                     save_deformation, save_mesh_frame)
from .gaussians import Camera, normalize_to_unit_box
from .guidance import ExternalGuidance, identity_refiner, oracle_guidance, oracle_refiner
from .hexplane import DeformDecoder, HexPlaneField, deform
from .images import load_image, save_image
from .mesh import (TexturedMeshSequence, backproject_colors,
                   default_backprojection_views, extract_mesh,
                   extract_mesh_sequence, unwrap_uv)
from .rasterizer import render
from .refine import refine_textures
from .trainer import NumericalError, fit_dynamic, fit_static


def _reference_camera(cfg: PipelineConfig, width=None, height=None) -> Camera:
    cam = cfg.camera
    return Camera(0.0, 0.0, cam.radius, cam.fov_y,
                  width or cam.width, height or cam.height)


def _build_guidance(cfg: PipelineConfig):
    g = cfg.guidance
    if g.kind == "none":
        return None
    if g.kind == "oracle":
        if not g.target_ply:
            raise ConfigError("guidance.kind=oracle needs guidance.target_ply")
        return oracle_guidance(load_cloud(g.target_ply))
    if not g.command:
        raise ConfigError("guidance.kind=external needs guidance.command")
    return ExternalGuidance(list(g.command))


def _load_reference_image(path, camera: Camera):
    img = load_image(path)
    if img.shape[2] == 4:
        alpha = img[:, :, 3:4]
        img = img[:, :, :3] * alpha + (1.0 - alpha)
    if img.shape[:2] != (camera.height, camera.width):
        raise ConfigError(
            f"reference image is {img.shape[1]}x{img.shape[0]}, camera expects "
            f"{camera.width}x{camera.height}")
    return img


def _log_writer(path):
    fh = open(path, "w")

    def write(line):
        if isinstance(line, dict):
            line = json.dumps(line, sort_keys=True)
        fh.write(line + "\n")
        fh.flush()

    write.close = fh.close
    return write


def _cmd_fit_static(args):
    cfg = load_config(args.config)
    if args.iterations is not None:
        cfg.static.iterations = args.iterations
    if args.seed is not None:
        cfg.seed = args.seed
    camera = _reference_camera(cfg)
    guidance = _build_guidance(cfg)
    if args.reference:
        reference = _load_reference_image(args.reference, camera)
    elif guidance is not None and hasattr(guidance, "ground_truth"):
        reference = guidance.ground_truth(camera, 0.0)
    else:
        raise ConfigError("fit-static needs --reference or an oracle guidance target")
    os.makedirs(cfg.paths.workdir, exist_ok=True)
    log = _log_writer(os.path.join(cfg.paths.workdir, "fit_static_log.jsonl"))
    try:
        cloud = fit_static([(camera, reference)], guidance, cfg.static,
                           seed=cfg.seed, log_fn=log)
    finally:
        log.close()
    out = args.out or os.path.join(cfg.paths.workdir, "static.ply")
    save_cloud(out, cloud)
    print(out)
    return 0


def _cmd_fit_dynamic(args):
    cfg = load_config(args.config)
    if args.iterations is not None:
        cfg.dynamic.iterations = args.iterations
    if args.seed is not None:
        cfg.seed = args.seed
    cloud = load_cloud(args.cloud)
    if not args.no_normalize and np.abs(cloud.positions).max() > 1.0:
        cloud, _, _ = normalize_to_unit_box(cloud)
    video = load_video(args.video)
    camera = _reference_camera(cfg, width=video.frames.shape[2],
                               height=video.frames.shape[1])
    video.reference_camera = camera
    provider = _build_guidance(cfg)
    rng = np.random.default_rng(cfg.seed)
    field = HexPlaneField(cfg.hexplane.spatial_resolution,
                          cfg.hexplane.temporal_resolution,
                          cfg.hexplane.feature_dim).init_random(rng)
    decoder = DeformDecoder(cfg.hexplane.feature_dim,
                            cfg.hexplane.hidden_dim).init_random(rng)
    os.makedirs(cfg.paths.workdir, exist_ok=True)
    log = _log_writer(os.path.join(cfg.paths.workdir, "fit_dynamic_log.jsonl"))
    try:
        field, decoder = fit_dynamic(cloud, video, provider, cfg.dynamic,
                                     seed=cfg.seed, field=field, decoder=decoder,
                                     log_fn=log)
    finally:
        log.close()
    out = args.out or os.path.join(cfg.paths.workdir, "deformation.ckpt")
    save_deformation(out, field, decoder)
    print(out)
    return 0


def _build_sequence(cfg, cloud, deformation_path, frames):
    """Mesh sequence + per-frame baked textures from a fitted model."""
    mcfg = cfg.mesh
    if deformation_path:
        field, decoder = load_deformation(deformation_path)
        times = np.linspace(0.0, 1.0, frames)
        mesh_frames, shared = extract_mesh_sequence(
            cloud, field, decoder, times, mcfg.grid_resolution, mcfg.iso)
    else:
        field = decoder = None
        times = np.zeros(1)
        mesh_frames, shared = [extract_mesh(cloud, mcfg.grid_resolution, mcfg.iso)], True
    if mesh_frames[0].faces.shape[0] == 0:
        raise NumericalError("marching cubes produced an empty mesh; check --iso")
    uv, _ = unwrap_uv(mesh_frames[0], texture_resolution=mcfg.texture_resolution)
    views = default_backprojection_views(
        cfg.camera.radius, cfg.camera.fov_y, cfg.camera.width, cfg.camera.height,
        mcfg.backprojection_azimuths, tuple(mcfg.backprojection_elevations))
    textures = []
    texel_face = texel_bary = None
    for i, mesh in enumerate(mesh_frames):
        frame_uv = uv if shared else unwrap_uv(mesh, texture_resolution=mcfg.texture_resolution)[0]
        scene = cloud if field is None else deform(cloud, field, decoder, float(times[i]))

        def render_fn(camera, _scene=scene):
            return render(_scene, camera).rgb

        tex, tf, tb = backproject_colors(mesh, frame_uv, render_fn, views,
                                         mcfg.texture_resolution)
        textures.append(tex)
        if i == 0:
            texel_face, texel_bary = tf, tb
    return TexturedMeshSequence(mesh_frames, uv, textures, shared,
                                texel_face, texel_bary), field, decoder


def _write_sequence(seq: TexturedMeshSequence, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, mesh in enumerate(seq.frames):
        paths.append(save_mesh_frame(out_dir, i, mesh, seq.uv, seq.textures[i]))
    return paths


def _cmd_export_mesh(args):
    cfg = load_config(args.config)
    cloud = load_cloud(args.cloud)
    frames = args.frames or cfg.mesh.frames
    seq, _, _ = _build_sequence(cfg, cloud, args.deformation, frames)
    out = args.out or os.path.join(cfg.paths.workdir, "meshes")
    for p in _write_sequence(seq, out):
        print(p)
    return 0


def _cmd_refine_texture(args):
    cfg = load_config(args.config)
    cloud = load_cloud(args.cloud)
    frames = args.frames or cfg.mesh.frames
    seq, _, _ = _build_sequence(cfg, cloud, args.deformation, frames)
    if args.refiner == "identity":
        refiner = identity_refiner()
    else:
        if not args.target_ply:
            raise ConfigError("--refiner oracle needs --target-ply")
        target = load_cloud(args.target_ply)

        def gt_video(trajectory):
            return [render(target, cam).rgb for cam in trajectory.cameras()]

        refiner = oracle_refiner(gt_video)
    if args.share_texture and seq.shared_topology:
        seq.share_texture()
    refine_textures(seq, refiner, iterations=cfg.refine.iterations,
                    noise_level=cfg.refine.noise_level, seed=cfg.seed,
                    radius=cfg.camera.radius, fov_y=cfg.camera.fov_y,
                    width=cfg.camera.width, height=cfg.camera.height,
                    lr=cfg.refine.lr)
    out = args.out or os.path.join(cfg.paths.workdir, "meshes_refined")
    for p in _write_sequence(seq, out):
        print(p)
    return 0


def _cmd_render_turntable(args):
    cfg = load_config(args.config)
    cloud = load_cloud(args.cloud)
    field = decoder = None
    if args.deformation:
        field, decoder = load_deformation(args.deformation)
    frames = args.frames or cfg.mesh.frames
    rng = np.random.default_rng(cfg.seed)
    start = float(rng.uniform(-180.0, 180.0))
    out = args.out or os.path.join(cfg.paths.workdir, "turntable")
    os.makedirs(out, exist_ok=True)
    times = np.linspace(0.0, 1.0, frames)
    for i in range(frames):
        az = start + i * 360.0 / frames
        cam = Camera(az, 0.0, cfg.camera.radius, cfg.camera.fov_y,
                     cfg.camera.width, cfg.camera.height)
        scene = cloud if field is None else deform(cloud, field, decoder, float(times[i]))
        path = os.path.join(out, f"frame_{i:03d}.png")
        save_image(path, render(scene, cam).rgb)
        print(path)
    return 0


def _cmd_align_azimuth(args):
    cfg = load_config(args.config)
    cloud = load_cloud(args.cloud)
    camera = _reference_camera(cfg)
    reference = _load_reference_image(args.reference, camera)
    az = align_azimuth(cloud, reference, step=args.step,
                       radius=cfg.camera.radius, fov_y=cfg.camera.fov_y)
    print(az)
    return 0


def _cmd_gradcheck(args):
    from .gradcheck import run_suite

    report = run_suite(seed=args.seed, scenes=args.scenes)
    for part in ("rasterizer", "deformation"):
        r = report[part]
        status = "ok" if not r["failures"] else f"{len(r['failures'])} violations"
        print(f"{part}: {status} (worst ratio {r['worst_ratio']:.4f} of tolerance)")
        for f in r["failures"][:20]:
            print(f"  seed {f['seed']} {f['param']}{f['index']}: "
                  f"fd={f['fd']:.6g} analytic={f['analytic']:.6g}")
    return 0 if report["ok"] else 1


def _cmd_init_config(args):
    save_config(args.out, PipelineConfig(seed=args.seed))
    print(args.out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="splat4d",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        return p

    p = add("fit-static", _cmd_fit_static, help="fit a static Gaussian cloud")
    p.add_argument("--config", required=True)
    p.add_argument("--reference", help="reference PNG (RGBA composited over white)")
    p.add_argument("--out", help="output PLY path")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)

    p = add("fit-dynamic", _cmd_fit_dynamic, help="fit the deformation field")
    p.add_argument("--config", required=True)
    p.add_argument("--cloud", required=True, help="static cloud PLY")
    p.add_argument("--video", required=True, help="driving video dir or glob")
    p.add_argument("--out", help="output checkpoint path")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-normalize", action="store_true",
                   help="skip normalizing an out-of-bounds cloud")

    p = add("export-mesh", _cmd_export_mesh, help="export textured mesh frames")
    p.add_argument("--config", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--deformation", help="deformation checkpoint")
    p.add_argument("--frames", type=int)
    p.add_argument("--out")

    p = add("refine-texture", _cmd_refine_texture, help="V2V texture refinement")
    p.add_argument("--config", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--deformation")
    p.add_argument("--frames", type=int)
    p.add_argument("--refiner", choices=("identity", "oracle"), default="identity")
    p.add_argument("--target-ply", help="hidden target for the oracle refiner")
    p.add_argument("--share-texture", action="store_true")
    p.add_argument("--out")

    p = add("render-turntable", _cmd_render_turntable, help="orbit renders as PNGs")
    p.add_argument("--config", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--deformation")
    p.add_argument("--frames", type=int)
    p.add_argument("--out")

    p = add("align-azimuth", _cmd_align_azimuth,
            help="azimuth with the lowest L2 distance to the reference")
    p.add_argument("--config", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--step", type=float, default=1.0)

    p = add("gradcheck", _cmd_gradcheck, help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=20)

    p = add("init-config", _cmd_init_config, help="write a default config file")
    p.add_argument("--out", default="splat4d.yaml")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
