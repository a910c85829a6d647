"""Command-line entry point: ``splatcar {synth,train,render,mesh,eval}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, defaults_table, load_config

log = logging.getLogger("splatcar")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
REPORT_KEYS = ("cd", "accuracy", "completeness", "f1", "psnr", "ssim", "d_thr", "n_samples")


class UsageError(Exception):
    pass


def _set_threads(n: int) -> None:
    import numba

    if n and n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _parse_sets(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _run_config(args) -> RunConfig:
    overrides = _parse_sets(getattr(args, "set", None))
    for flag, key in (("iterations", "train.iterations"), ("seed", "run.seed"),
                      ("threads", "run.threads"), ("voxel", "mesh.voxel_size"),
                      ("truncation", "mesh.truncation")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "deterministic", False):
        overrides["run.deterministic"] = "true"
    cfg = load_config(getattr(args, "config", None), overrides, getattr(args, "preset", None))
    _set_threads(cfg.run.threads)
    return cfg


# -- subcommands --------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synth_oracle import load_scene, make_dataset

    try:
        scene = load_scene(args.scene)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    except ValueError as exc:
        raise UsageError(f"{args.scene}: {exc}") from exc
    if args.views < 2:
        raise UsageError("--views must be >= 2")
    seed = args.seed if args.seed is not None else int(load_config().run.seed)
    ds = make_dataset(scene, args.views, args.radius, seed, args.out, n_test=args.test_views,
                      corrupt_head_on=args.corrupt_head_on)
    print(f"wrote {len(ds.view_ids)} views ({len(ds.test_ids)} held out) to {ds.out_dir}")
    return EXIT_OK


def _load_views(data: Path):
    from .ingest import load_dataset

    if not (data / "sparse" / "0").is_dir():
        raise UsageError(f"no sparse model under {data}")
    return load_dataset(data)


def cmd_train(args) -> int:
    from .rasterizer import ChannelConfig, render_view
    from .ingest import write_png
    from .splat_model import save_checkpoint
    from .trainer import initialize_scene, train

    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    print(cfg.dumps(), end="")
    views, points = _load_views(Path(args.data))
    if not views:
        raise UsageError("dataset has no usable views")
    tc = cfg.train_config()
    scene = initialize_scene(points, views, tc)
    save_checkpoint(scene, out / "init.ckpt")
    if tc.iterations == 0:
        return EXIT_OK
    preview = cfg.run.preview_interval

    def on_step(it, sc, row):
        if preview and (it % preview == 0 or it == tc.iterations):
            v = views[0]
            img = render_view(sc, None, v.camera, ChannelConfig(True, False, False)).rgb
            write_png(out / "previews" / f"iter_{it:06d}.png", img)

    result = train(scene, views, tc, out_dir=out, log_path=out / "train_log.csv", callback=on_step)
    save_checkpoint(result.scene, out / "final.ckpt")
    last = result.log[-1]
    print(f"done: {len(result.log)} iterations, l_total={last['l_total']:.5f}, N={last['N']}")
    return EXIT_OK


def _cameras_from_source(source: Path):
    """(view_id, Camera) pairs from a JSON camera file or a dataset directory."""
    from .ingest import parse_colmap_sparse
    from .synth_oracle import camera_from_json

    if source.is_dir():
        sparse = source / "sparse" / "0"
        if not sparse.is_dir():
            raise UsageError(f"no sparse model under {source}")
        views, _ = parse_colmap_sparse(sparse)
        return [(v.view_id, v.camera) for v in views]
    if not source.is_file():
        raise UsageError(f"camera file not found: {source}")
    data = json.loads(source.read_text())
    entries = data["views"] if isinstance(data, dict) else data
    return [(d["id"], camera_from_json(d)) for d in entries]


def cmd_render(args) -> int:
    from .ingest import write_png
    from .rasterizer import ChannelConfig, encode_normal_png, render_view
    from .splat_model import load_checkpoint

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    scene = load_checkpoint(ckpt, with_vdg=args.with_vdg is not None)
    cams = _cameras_from_source(Path(args.cameras))
    if args.with_vdg is not None:
        if args.with_vdg not in scene.vdg:
            raise UsageError(f"unknown view id for --with-vdg: {args.with_vdg} (not a training view)")
        cams = [(vid, c) for vid, c in cams if vid == args.with_vdg]
        if not cams:
            raise UsageError(f"camera file has no camera for view {args.with_vdg}")
    if args.view:
        known = {vid for vid, _ in cams}
        missing = [v for v in args.view if v not in known]
        if missing:
            raise UsageError(f"unknown view id: {', '.join(missing)}")
        cams = [(vid, c) for vid, c in cams if vid in args.view]
    out = Path(args.out)
    channels = args.channel or ["rgb"]
    for vid, cam in cams:
        include = args.with_vdg is not None
        res = render_view(scene, vid if include else None, cam, ChannelConfig(True, True, include))
        for ch in channels:
            if ch == "rgb":
                write_png(out / "rgb" / f"{vid}.png", res.rgb)
            elif ch == "normal":
                write_png(out / "normal" / f"{vid}.png", encode_normal_png(res.unit_normal()))
            elif ch == "alpha":
                write_png(out / "alpha" / f"{vid}.png", res.geometry_alpha)
            elif ch == "depth":
                from .ingest import write_raw

                depth, _ = res.surface_depth(0.5)
                write_raw(out / "depth" / f"{vid}.raw", depth)
    print(f"rendered {len(cams)} view(s) x {len(channels)} channel(s) to {out}")
    return EXIT_OK


def cmd_mesh(args) -> int:
    from .meshing import extract_mesh, fuse_scene, write_mesh
    from .splat_model import load_checkpoint

    cfg = _run_config(args)
    mc = cfg.mesh
    print(f"voxel_size = {mc.voxel_size!r}\ntruncation = {mc.truncation!r}")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    cams = _cameras_from_source(Path(args.data))
    if not cams:
        raise UsageError("no views to fuse")
    scene = load_checkpoint(ckpt, with_vdg=False)
    vol = fuse_scene(scene, [c for _, c in cams], mc.voxel_size, mc.truncation, mc.max_voxels,
                     mc.alpha_threshold)
    mesh = extract_mesh(vol, min_component_fraction=mc.min_component_fraction)
    if mesh.empty:
        print("error: fusion produced an empty mesh", file=sys.stderr)
        return EXIT_RUNTIME
    write_mesh(args.out, mesh)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.faces)} faces to {args.out}")
    return EXIT_OK


def _image_pairs(pred_dir: Path, gt_dir: Path):
    gts = {p.stem: p for p in sorted(gt_dir.glob("*.png"))}
    pairs = [(p.stem, p, gts[p.stem]) for p in sorted(pred_dir.glob("*.png")) if p.stem in gts]
    if not pairs:
        raise UsageError(f"no matching images between {pred_dir} and {gt_dir}")
    return pairs


def cmd_eval(args) -> int:
    from .evaluation import ImageReport, chamfer, psnr, ssim_metric
    from .ingest import read_png
    from .meshing import read_mesh

    cfg = _run_config(args)
    ec = cfg.eval
    report = dict.fromkeys(REPORT_KEYS)
    report["d_thr"] = ec.d_thr
    report["n_samples"] = ec.n_samples
    rows = []
    if args.gt_mesh is None and args.gt_images is None:
        raise UsageError("nothing to evaluate: give --gt-mesh and/or --gt-images")
    if args.gt_mesh is not None:
        if not Path(args.gt_mesh).is_file():
            raise UsageError(f"GT mesh not found: {args.gt_mesh}")
        if args.pred_mesh is None or not Path(args.pred_mesh).is_file():
            raise UsageError(f"predicted mesh not found: {args.pred_mesh}")
        gr = chamfer(read_mesh(args.pred_mesh), read_mesh(args.gt_mesh), ec.n_samples, ec.seed,
                     ec.d_thr, crop=ec.crop)
        report.update(cd=gr.cd, accuracy=gr.accuracy, completeness=gr.completeness, f1=gr.f1)
    if args.gt_images is not None:
        gt_dir = Path(args.gt_images)
        if not gt_dir.is_dir():
            raise UsageError(f"GT image directory not found: {gt_dir}")
        if args.pred_images is None or not Path(args.pred_images).is_dir():
            raise UsageError(f"predicted image directory not found: {args.pred_images}")
        ir = ImageReport()
        for vid, p, g in _image_pairs(Path(args.pred_images), gt_dir):
            a, b = read_png(p), read_png(g)
            ir.add(vid, psnr(a, b, cap=ec.psnr_cap), ssim_metric(a, b))
            rows.append({"view": vid, **ir.per_view[vid]})
        report.update(psnr=ir.psnr, ssim=ir.ssim)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2))
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "psnr", "ssim"])
        for r in rows:
            w.writerow([r["view"], repr(r["psnr"]), repr(r["ssim"])])
        w.writerow(["mean", repr(report["psnr"]), repr(report["ssim"])])
    print(json.dumps(report, indent=2))
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _config_epilog() -> str:
    return ("config keys (set with --set key=value or a config file; desk preset differs):\n"
            + defaults_table("default"))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'section.key = value' config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--preset", choices=["default", "desk"], help="base defaults to start from")
    p.add_argument("--seed", type=int, help="random seed (env SPLATCAR_SEED)")
    p.add_argument("--threads", type=int, help="worker thread cap (env SPLATCAR_THREADS)")
    p.add_argument("--deterministic", action="store_true", help="ordered, reproducible reductions")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="splatcar", description="Dual-opacity splat reconstruction pipeline.",
                     epilog=_config_epilog(), formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate an oracle dataset", epilog=_config_epilog(),
                       formatter_class=fmt)
    p.add_argument("scene", help="scene INI file or preset name (glass_pane, mirror_quad, box)")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--seed", type=int)
    p.add_argument("--radius", type=float)
    p.add_argument("--test-views", type=int, default=0)
    p.add_argument("--corrupt-head-on", action="store_true",
                   help="corrupt normal labels where the view is nearly head-on")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="optimize a scene", epilog=_config_epilog(), formatter_class=fmt)
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint", epilog=_config_epilog(),
                       formatter_class=fmt)
    p.add_argument("checkpoint")
    p.add_argument("--cameras", required=True, help="camera JSON file or dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--channel", action="append", choices=["rgb", "depth", "normal", "alpha"])
    p.add_argument("--view", action="append", help="render only these view ids")
    p.add_argument("--with-vdg", metavar="VIEW_ID", help="include that training view's VDGs")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("mesh", help="fuse depth maps into a mesh", epilog=_config_epilog(),
                       formatter_class=fmt)
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True, help="dataset directory or camera JSON")
    p.add_argument("--out", required=True, help="output .ply or .obj")
    p.add_argument("--voxel", type=float)
    p.add_argument("--truncation", type=float)
    _add_config_flags(p)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", help="geometry and image metrics", epilog=_config_epilog(),
                       formatter_class=fmt)
    p.add_argument("--pred-mesh")
    p.add_argument("--gt-mesh")
    p.add_argument("--pred-images")
    p.add_argument("--gt-images")
    p.add_argument("--report", required=True, help="JSON report path (CSV written alongside)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
