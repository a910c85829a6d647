"""Desk-scale oracle experiments: dual opacity on glass, VDG and QSM ablations.

    python3 scripts/experiments.py glass  --out results/
    python3 scripts/experiments.py qsm    --out results/
    python3 scripts/experiments.py mirror --out results/

Each command writes datasets, checkpoints, meshes and a JSON summary under --out.
The acceptance suite imports the same functions.
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np

from splatcar.cli import main as cli_main
from splatcar.evaluation import chamfer, mean_angular_error, psnr
from splatcar.ingest import load_dataset
from splatcar.losses import LossWeights, qsm_weight
from splatcar.meshing import extract_mesh, fuse_scene, read_mesh, write_mesh
from splatcar.rasterizer import ChannelConfig, render_view
from splatcar.splat_model import load_checkpoint
from splatcar.synth_oracle import camera_from_json, load_scene, make_dataset

N_VIEWS = 12
N_TEST = 4


def build_dataset(scene: str, out: Path, corrupt: bool = False, n_test: int = 0,
                  seed: int = 0) -> Path:
    """Generate (or reuse) an oracle dataset; generation is deterministic in ``seed``."""
    out = Path(out)
    meta = out / "gt" / "meta.json"
    if meta.is_file():
        m = json.loads(meta.read_text())
        if (m["seed"], m["corrupt_head_on"], len(m["test_cameras"])) == (seed, corrupt, n_test):
            return out
    make_dataset(load_scene(scene), N_VIEWS, None, seed, out, n_test=n_test, corrupt_head_on=corrupt)
    return out


def train_cli(data: Path, out: Path, iterations: int | None = None, seed: int = 0,
              sets: dict | None = None) -> float:
    """Desk-preset training through the CLI with ``--deterministic``; returns seconds."""
    argv = ["train", str(data), "--out", str(out), "--preset", "desk", "--seed", str(seed),
            "--deterministic", "--set", "run.preview_interval=0"]
    if iterations is not None:
        argv += ["--iterations", str(iterations)]
    for k, v in (sets or {}).items():
        argv += ["--set", f"{k}={v}"]
    t0 = time.perf_counter()
    rc = cli_main(argv)
    if rc != 0:
        raise RuntimeError(f"training failed with exit code {rc}")
    return time.perf_counter() - t0


def mesh_cli(ckpt: Path, data: Path, out: Path) -> Path:
    rc = cli_main(["mesh", str(ckpt), "--data", str(data), "--out", str(out)])
    if rc != 0:
        raise RuntimeError(f"meshing failed with exit code {rc}")
    return out


def _gt(data: Path, view_id: str):
    return np.load(Path(data) / "gt" / f"{view_id}.npz")


def glass_report(ckpt: Path, data: Path, tau_deg: float = LossWeights().tau_deg) -> dict:
    """Glass RGB fidelity, geometry depth on the pane, QSM gating and normal error."""
    scene = load_checkpoint(ckpt, with_vdg=False)
    views, _ = load_dataset(data, align=False)
    extent = json.loads((Path(data) / "gt" / "meta.json").read_text())["extent"]
    se, depth_ok = [], []
    gated, gated_gt, n_corrupt = 0, 0, 0
    pred_n, gt_n, masks = [], [], []
    for v in views:
        gt = _gt(data, v.view_id)
        out = render_view(scene, None, v.camera, ChannelConfig(True, True, False))
        rays = v.camera.unit_pixel_rays()
        glass = gt["glass"]
        if glass.any():
            se.append(((out.rgb[glass] - gt["rgb"][glass]) ** 2).ravel())
            d, valid = out.surface_depth(0.5)
            depth_ok.append(valid[glass] & (np.abs(d[glass] - gt["depth"][glass]) <= 0.02 * extent))
        c = gt["corrupt"]
        if c.any():
            n_corrupt += int(c.sum())
            gated += int((qsm_weight(out.unit_normal(), rays, tau_deg)[c] == 0).sum())
            gated_gt += int((qsm_weight(gt["normal"], rays, tau_deg)[c] == 0).sum())
        pred_n.append(out.unit_normal())
        gt_n.append(gt["normal"])
        masks.append(gt["mask"] > 0)
    se = np.concatenate(se) if se else np.zeros(1)
    depth_ok = np.concatenate(depth_ok) if depth_ok else np.zeros(1, bool)
    return {
        "glass_psnr": float(10 * np.log10(1.0 / max(se.mean(), 1e-20))),
        "glass_depth_fraction": float(depth_ok.mean()),
        "glass_pixels": int(depth_ok.size),
        "corrupt_pixels": n_corrupt,
        "corrupt_gated_fraction": gated / n_corrupt if n_corrupt else float("nan"),
        "corrupt_gated_fraction_gt_normals": gated_gt / n_corrupt if n_corrupt else float("nan"),
        "normal_mae_deg": mean_angular_error(np.stack(pred_n), np.stack(gt_n), np.stack(masks)),
        "extent": extent,
    }


def mirror_report(ckpt: Path, data: Path, mesh_path: Path) -> dict:
    """Mesh Chamfer against the analytic GT, and VSG-only PSNR on train vs held-out views."""
    scene = load_checkpoint(ckpt, with_vdg=False)
    views, _ = load_dataset(data, align=False)
    mesh = extract_mesh(fuse_scene(scene, [v.camera for v in views]))
    write_mesh(mesh_path, mesh)
    gt_mesh = read_mesh(Path(data) / "gt" / "gt_mesh.ply")
    geo = chamfer(mesh, gt_mesh, crop=True) if not mesh.empty else None
    meta = json.loads((Path(data) / "gt" / "meta.json").read_text())

    def mean_psnr(pairs):
        return float(np.mean([psnr(render_view(scene, None, cam, ChannelConfig(True, False, False)).rgb,
                                   rgb) for cam, rgb in pairs]))

    train = [(v.camera, _gt(data, v.view_id)["rgb"]) for v in views]
    test = [(camera_from_json(c), _gt(data, c["id"])["rgb"]) for c in meta["test_cameras"]]
    return {
        "cd": geo.cd if geo else float("inf"),
        "f1": geo.f1 if geo else 0.0,
        "train_psnr": mean_psnr(train),
        "test_psnr": mean_psnr(test),
        "faces": int(len(mesh.faces)),
    }


def run_glass(out: Path, iterations: int | None = None) -> dict:
    data = build_dataset("glass_pane", out / "data_glass")
    secs = train_cli(data, out / "glass", iterations)
    return {"seconds": secs, **glass_report(out / "glass" / "final.ckpt", data)}


def run_qsm(out: Path, iterations: int | None = None) -> dict:
    data = build_dataset("glass_pane", out / "data_glass_corrupt", corrupt=True)
    res = {}
    for name, flag in (("qsm_on", "true"), ("qsm_off", "false")):
        secs = train_cli(data, out / name, iterations, sets={"train.use_qsm": flag})
        res[name] = {"seconds": secs, **glass_report(out / name / "final.ckpt", data)}
    return res


def run_mirror(out: Path, iterations: int | None = None) -> dict:
    data = build_dataset("mirror_quad", out / "data_mirror", n_test=N_TEST)
    res = {}
    for name, flag in (("vdg_on", "true"), ("vdg_off", "false")):
        secs = train_cli(data, out / name, iterations, sets={"train.use_vdg": flag})
        res[name] = {"seconds": secs,
                     **mirror_report(out / name / "final.ckpt", data, out / name / "mesh.ply")}
    return res


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("experiment", choices=["glass", "qsm", "mirror", "all"])
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--iterations", type=int, help="override the desk preset's 2000")
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    runners = {"glass": run_glass, "qsm": run_qsm, "mirror": run_mirror}
    names = list(runners) if args.experiment == "all" else [args.experiment]
    for name in names:
        res = runners[name](args.out, args.iterations)
        (args.out / f"{name}.json").write_text(json.dumps(res, indent=2))
        print(json.dumps({name: res}, indent=2))


if __name__ == "__main__":
    main()
