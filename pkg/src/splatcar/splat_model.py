"""Gaussian disk primitives, their parameterization, and checkpoint I/O.

Primitives are stored structure-of-arrays. Scales are kept as logs and both
opacities as logits so the optimizer works in unconstrained space.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

CHECKPOINT_MAGIC = "splatcar-checkpoint"
CHECKPOINT_VERSION = 1


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_count(count: int) -> int:
    degree = int(round(np.sqrt(count))) - 1
    if num_sh_coeffs(degree) != count:
        raise ValueError(f"{count} is not a valid SH coefficient count")
    return degree


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values, shape (N, (degree+1)^2), for unit directions (N, 3)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((dirs.shape[0], num_sh_coeffs(degree)))
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    if degree > 3:
        raise ValueError("SH degree above 3 is not supported")
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d dir, shape (N, K, 3)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    n = dirs.shape[0]
    g = np.zeros((n, num_sh_coeffs(degree), 3))
    if degree >= 1:
        g[:, 1, 1] = -SH_C1
        g[:, 2, 2] = SH_C1
        g[:, 3, 0] = -SH_C1
    if degree >= 2:
        c = SH_C2
        g[:, 4] = np.stack([c[0] * y, c[0] * x, 0 * x], -1)
        g[:, 5] = np.stack([0 * x, c[1] * z, c[1] * y], -1)
        g[:, 6] = np.stack([-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z], -1)
        g[:, 7] = np.stack([c[3] * z, 0 * x, c[3] * x], -1)
        g[:, 8] = np.stack([2 * c[4] * x, -2 * c[4] * y, 0 * x], -1)
    if degree >= 3:
        c = SH_C3
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9] = np.stack([6 * c[0] * x * y, c[0] * (3 * xx - 3 * yy), 0 * x], -1)
        g[:, 10] = np.stack([c[1] * y * z, c[1] * x * z, c[1] * x * y], -1)
        g[:, 11] = np.stack(
            [-2 * c[2] * x * y, c[2] * (4 * zz - xx - 3 * yy), 8 * c[2] * y * z], -1
        )
        g[:, 12] = np.stack(
            [-6 * c[3] * x * z, -6 * c[3] * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)], -1
        )
        g[:, 13] = np.stack(
            [c[4] * (4 * zz - 3 * xx - yy), -2 * c[4] * x * y, 8 * c[4] * x * z], -1
        )
        g[:, 14] = np.stack([2 * c[5] * x * z, -2 * c[5] * y * z, c[5] * (xx - yy)], -1)
        g[:, 15] = np.stack([c[6] * (3 * xx - 3 * yy), -6 * c[6] * x * y, 0 * x], -1)
    return g


def eval_sh(sh_coeffs, direction, active_degree: int) -> np.ndarray:
    """RGB = max(0, sum c_lm Y_lm(dir) + 0.5), restricted to the active degree.

    Works on a single primitive (sh (K,3), dir (3,)) or a batch
    (sh (N,K,3), dirs (N,3)).
    """
    sh = np.asarray(sh_coeffs, dtype=np.float64)
    single = sh.ndim == 2
    if single:
        sh = sh[None]
    dirs = np.atleast_2d(direction)
    degree = min(active_degree, sh_degree_from_count(sh.shape[1]))
    k = num_sh_coeffs(degree)
    basis = sh_basis(dirs, degree)
    rgb = np.einsum("nk,nkc->nc", basis, sh[:, :k]) + 0.5
    rgb = np.maximum(rgb, 0.0)
    return rgb[0] if single else rgb


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(N,4) wxyz quaternions (normalized internally) to (N,3,3) rotations."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_to_rotmat_backward(q: np.ndarray, grad_r: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the unnormalized quaternion given dL/dR (N,3,3)."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn.T
    g = grad_r
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
              - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    gqn = np.stack([gw, gx, gy, gz], axis=1)
    return (gqn - qn * np.sum(qn * gqn, axis=1, keepdims=True)) / norm


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """(N,3,3) rotation matrices to (N,4) wxyz quaternions with w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    single = r.ndim == 2
    r = np.atleast_3d(r).reshape(-1, 3, 3)
    out = np.empty((r.shape[0], 4))
    for i, m in enumerate(r):
        tr = np.trace(m)
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            out[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            out[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            out[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s,
                      (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            out[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        if out[i, 0] < 0:
            out[i] = -out[i]
    return out[0] if single else out


def frame_from_normal(normals: np.ndarray) -> np.ndarray:
    """Quaternions whose third frame axis equals the given unit normals."""
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    helper = np.where(np.abs(n[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    tu = np.cross(helper, n)
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = np.cross(n, tu)
    return rotmat_to_quat(np.stack([tu, tv, n], axis=2))


@dataclass
class SplatPrimitive:
    """One 2D Gaussian disk. ``raw_geo_opacity`` is None for view-dependent splats."""

    center: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    sh_coeffs: np.ndarray
    raw_opacity: float
    raw_geo_opacity: float | None = None

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.raw_opacity))

    @property
    def geo_opacity(self) -> float:
        if self.raw_geo_opacity is None:
            raise AttributeError("view-dependent splats carry no geometry opacity")
        return float(sigmoid(self.raw_geo_opacity))

    def tangent_frame(self) -> np.ndarray:
        """Columns t_u, t_v, n."""
        return quat_to_rotmat(self.rotation)[0]


def splat_normal(p: SplatPrimitive) -> np.ndarray:
    frame = p.tangent_frame()
    return np.cross(frame[:, 0], frame[:, 1])


def local_gaussian_weight(u, v):
    return np.exp(-0.5 * (np.asarray(u) ** 2 + np.asarray(v) ** 2))


@dataclass
class SplatSet:
    centers: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    sh: np.ndarray
    raw_opacity: np.ndarray

    param_names = ("centers", "quats", "log_scales", "sh", "raw_opacity")

    def __post_init__(self):
        for name in self.param_names:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        n = self.centers.shape[0]
        for name in self.param_names:
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"field {name} has {getattr(self, name).shape[0]} rows, expected {n}")

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_count(self.sh.shape[1])

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.raw_opacity)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def rotations(self) -> np.ndarray:
        return quat_to_rotmat(self.quats)

    def normals(self) -> np.ndarray:
        r = self.rotations()
        return np.cross(r[:, :, 0], r[:, :, 1])

    def normalize_quats(self) -> None:
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.param_names}

    def primitive(self, i: int) -> SplatPrimitive:
        return SplatPrimitive(
            center=self.centers[i].copy(),
            rotation=self.quats[i].copy(),
            log_scale=self.log_scales[i].copy(),
            sh_coeffs=self.sh[i].copy(),
            raw_opacity=float(self.raw_opacity[i]),
        )


@dataclass
class VsgSet(SplatSet):
    """View-shared splats: appearance and geometry opacity plus densification stats."""

    raw_geo_opacity: np.ndarray = None
    grad_accum: np.ndarray = None
    grad_count: np.ndarray = None

    param_names = ("centers", "quats", "log_scales", "sh", "raw_opacity", "raw_geo_opacity")

    def __post_init__(self):
        if self.raw_geo_opacity is None:
            self.raw_geo_opacity = np.array(self.raw_opacity, dtype=np.float64, copy=True)
        super().__post_init__()
        n = len(self)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_count is None:
            self.grad_count = np.zeros(n)

    @property
    def geo_opacity(self) -> np.ndarray:
        return sigmoid(self.raw_geo_opacity)

    def reset_stats(self) -> None:
        self.grad_accum = np.zeros(len(self))
        self.grad_count = np.zeros(len(self))

    def select(self, keep: np.ndarray) -> VsgSet:
        return VsgSet(**{f.name: getattr(self, f.name)[keep] for f in fields(self)})

    def concat(self, other: VsgSet) -> VsgSet:
        return VsgSet(
            **{f.name: np.concatenate([getattr(self, f.name), getattr(other, f.name)])
               for f in fields(self)}
        )

    def copy(self) -> VsgSet:
        return VsgSet(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def primitive(self, i: int) -> SplatPrimitive:
        p = super().primitive(i)
        p.raw_geo_opacity = float(self.raw_geo_opacity[i])
        return p


class VdgSet(SplatSet):
    """Per-view splats that only ever enter the appearance pass of their own view."""

    def __init__(self, centers, quats, log_scales, sh, raw_opacity, view_id: str):
        super().__init__(centers, quats, log_scales, sh, raw_opacity)
        self.view_id = view_id

    def __repr__(self) -> str:
        return f"VdgSet(view_id={self.view_id!r}, n={len(self)})"

    @property
    def raw_geo_opacity(self):
        raise AttributeError(f"VdgSet for view {self.view_id!r} has no geometry opacity")

    @property
    def geo_opacity(self):
        raise AttributeError(f"VdgSet for view {self.view_id!r} has no geometry opacity")

    def copy(self) -> VdgSet:
        return VdgSet(*(getattr(self, n).copy() for n in self.param_names), view_id=self.view_id)


@dataclass
class SceneModel:
    vsg: VsgSet
    vdg: dict[str, VdgSet] = field(default_factory=dict)
    sh_degree: int = 3
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    revision: int = 0

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)
        if self.vsg.sh_degree != self.sh_degree:
            raise ValueError("VSG SH degree does not match the scene SH degree")

    def copy(self) -> SceneModel:
        return SceneModel(
            vsg=self.vsg.copy(),
            vdg={k: v.copy() for k, v in self.vdg.items()},
            sh_degree=self.sh_degree,
            background=self.background.copy(),
            revision=self.revision,
        )

    def pack(self) -> dict[str, np.ndarray]:
        """Flatten every optimizable array into a name -> array mapping."""
        out = {f"vsg.{k}": v.copy() for k, v in self.vsg.params().items()}
        for view_id, vdg in self.vdg.items():
            for k, v in vdg.params().items():
                out[f"vdg.{view_id}.{k}"] = v.copy()
        out["background"] = self.background.copy()
        out["sh_degree"] = np.array([self.sh_degree])
        return out

    @classmethod
    def unpack(cls, packed: dict[str, np.ndarray]) -> SceneModel:
        vsg = VsgSet(**{k: packed[f"vsg.{k}"].copy() for k in VsgSet.param_names})
        vdg = {}
        view_ids = sorted({key.split(".")[1] for key in packed if key.startswith("vdg.")})
        for view_id in view_ids:
            arrays = [packed[f"vdg.{view_id}.{k}"].copy() for k in SplatSet.param_names]
            vdg[view_id] = VdgSet(*arrays, view_id=view_id)
        return cls(
            vsg=vsg,
            vdg=vdg,
            sh_degree=int(packed["sh_degree"][0]),
            background=packed["background"].copy(),
        )


# -- checkpoint files -------------------------------------------------------


def _write_atomic(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _encode(kind: str, splats: SplatSet, extra: dict[str, str]) -> bytes:
    names = list(splats.param_names)
    rows = [getattr(splats, n).reshape(len(splats), -1) for n in names]
    widths = [r.shape[1] for r in rows]
    header = [CHECKPOINT_MAGIC, f"format_version {CHECKPOINT_VERSION}", f"kind {kind}"]
    header += [f"{k} {v}" for k, v in extra.items()]
    header += [f"sh_degree {splats.sh_degree}", f"count {len(splats)}"]
    header += ["fields " + " ".join(f"{n}:{w}" for n, w in zip(names, widths)), "end_header"]
    data = np.concatenate(rows, axis=1).astype("<f8") if len(splats) else np.zeros((0, sum(widths)))
    return ("\n".join(header) + "\n").encode("ascii") + data.astype("<f8").tobytes()


def _decode(payload: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    end = payload.index(b"end_header\n") + len(b"end_header\n")
    lines = payload[:end].decode("ascii").splitlines()
    if lines[0] != CHECKPOINT_MAGIC:
        raise ValueError("not a splatcar checkpoint")
    meta = dict(line.split(" ", 1) for line in lines[1:-1])
    if int(meta["format_version"]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
    count = int(meta["count"])
    cols = [(n, int(w)) for n, w in (item.split(":") for item in meta["fields"].split())]
    total = sum(w for _, w in cols)
    flat = np.frombuffer(payload[end:], dtype="<f8").astype(np.float64).reshape(count, total)
    k = num_sh_coeffs(int(meta["sh_degree"]))
    out, start = {}, 0
    for name, width in cols:
        block = flat[:, start:start + width].copy()
        start += width
        if name == "sh":
            block = block.reshape(count, k, 3)
        elif name in ("raw_opacity", "raw_geo_opacity"):
            block = block[:, 0]
        out[name] = block
    return meta, out


def save_checkpoint(scene: SceneModel, path: str | Path) -> None:
    """Write the VSG to ``path`` and each VDG set to ``<path>.vdg/<view>.bin``."""
    path = Path(path)
    bg = " ".join(repr(float(c)) for c in scene.background)
    _write_atomic(path, _encode("vsg", scene.vsg, {"background": bg}))
    side = path.with_name(path.name + ".vdg")
    if scene.vdg:
        side.mkdir(parents=True, exist_ok=True)
    for view_id, vdg in scene.vdg.items():
        _write_atomic(side / f"{view_id}.bin", _encode("vdg", vdg, {"view_id": view_id}))


def load_checkpoint(path: str | Path, with_vdg: bool = True) -> SceneModel:
    path = Path(path)
    meta, arrays = _decode(path.read_bytes())
    vsg = VsgSet(**arrays)
    background = np.array([float(v) for v in meta["background"].split()])
    vdg = {}
    side = path.with_name(path.name + ".vdg")
    if with_vdg and side.is_dir():
        for f in sorted(side.glob("*.bin")):
            vmeta, varr = _decode(f.read_bytes())
            vdg[vmeta["view_id"]] = VdgSet(**varr, view_id=vmeta["view_id"])
    return SceneModel(vsg=vsg, vdg=vdg, sh_degree=int(meta["sh_degree"]), background=background)
