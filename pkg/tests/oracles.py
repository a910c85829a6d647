"""Independent reference implementations used as test oracles."""
import numpy as np

from splatcar.rasterizer import RenderGrads, prepare_view, rasterize, render_backward
from splatcar.splat_model import VsgSet

CHANNELS = ("rgb", "expected_depth", "normal", "appearance_alpha", "geometry_alpha")


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def render_gradcheck(scene, camera, channels=CHANNELS, h=1e-4, seed=0, sh_dir_grad=True):
    """Relative error of every VSG parameter class for a random linear functional.

    The functional sums random weights times the requested output channels.
    """
    ref = rasterize(prepare_view(scene, camera))
    rng = np.random.default_rng(seed)
    weights = {c: rng.normal(size=getattr(ref, c).shape) for c in channels}

    def objective():
        out = rasterize(prepare_view(scene, camera))
        return sum(float(np.sum(w * getattr(out, c))) for c, w in weights.items())

    pv = prepare_view(scene, camera, sh_dir_grad=sh_dir_grad)
    analytic = render_backward(scene, pv, RenderGrads(**weights)).vsg
    errors = {}
    for name in VsgSet.param_names:
        arr = getattr(scene.vsg, name)
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = objective()
            arr[idx] = old - h
            fm = objective()
            arr[idx] = old
            fd[idx] = (fp - fm) / (2 * h)
        errors[name] = rel_error(analytic[name], fd)
    return errors


def numeric_grad(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def sphere_depth(camera, center, radius):
    """Camera-z depth of the first ray hit with an analytic sphere (0 on a miss)."""
    rays = camera.pixel_rays()
    d = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    c = camera.world_to_camera(np.asarray(center, dtype=np.float64)[None])[0]
    b = d @ c
    disc = b * b - (c @ c - radius * radius)
    hit = disc >= 0
    t = np.where(hit, b - np.sqrt(np.where(hit, disc, 0.0)), 0.0)
    return np.where(hit & (t > 0), t * d[..., 2], 0.0)


def ring_cameras(n, radius, target=(0.0, 0.0, 0.0), size=64, fov_deg=50.0, elevations=(20.0, -20.0)):
    from splatcar.camera import Camera, CameraIntrinsics, CameraPose
    f = 0.5 * size / np.tan(np.radians(fov_deg) / 2)
    intr = CameraIntrinsics(f, f, size / 2, size / 2, size, size)
    cams = []
    for k in range(n):
        az = 2 * np.pi * k / n
        el = np.radians(elevations[k % len(elevations)])
        eye = np.asarray(target) + radius * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        cams.append(Camera(intr, CameraPose.look_at(eye, target)))
    return cams


def brute_chamfer(p, g, d_thr):
    """O(n^2) Chamfer / accuracy / completeness / F1."""
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    d = np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(axis=-1))
    d_pg = d.min(axis=1)
    d_gp = d.min(axis=0)
    acc = float(np.mean(d_pg <= d_thr))
    comp = float(np.mean(d_gp <= d_thr))
    f1 = 2 * acc * comp / (acc + comp) if acc + comp > 0 else 0.0
    return 0.5 * (d_pg.mean() + d_gp.mean()), acc, comp, f1
