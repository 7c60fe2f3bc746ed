"""Ray casting of triangle meshes into depth / normal / mask patches."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from ..geometry import CameraIntrinsics, ray_direction
from .mesh import Mesh


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class PatchBox:
    """Square image window resampled onto a ``res`` x ``res`` grid.

    Patch pixel (i, j) looks through image coordinate
    ``(u0 + (j + 0.5) * size / res - 0.5, v0 + (i + 0.5) * size / res - 0.5)``,
    so with ``size == res`` the patch pixels are exactly image pixels
    ``u0 + j, v0 + i``.
    """

    u0: float
    v0: float
    size: float
    res: int = 64

    def pixel_coords(self) -> tuple[np.ndarray, np.ndarray]:
        step = self.size / self.res
        k = (np.arange(self.res) + 0.5) * step - 0.5
        u = self.u0 + k
        v = self.v0 + k
        uu, vv = np.meshgrid(u, v)
        return uu, vv

    def to_dict(self) -> dict:
        return {"u0": self.u0, "v0": self.v0, "size": self.size, "res": self.res}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchBox":
        return cls(float(d["u0"]), float(d["v0"]), float(d["size"]), int(d["res"]))


def ray_map(K: CameraIntrinsics, box: PatchBox) -> np.ndarray:
    uu, vv = box.pixel_coords()
    return ray_direction(K, uu, vv)


@numba.njit(cache=True)
def _cast(tris, norms, rays, uu, vv, fx, fy, cx, cy, step, u_start, v_start, depth, normal, hit_t):
    H, W = depth.shape
    T = tris.shape[0]
    eps = 1e-12
    for ti in range(T):
        # projected bounding box of the triangle in patch-pixel units
        umin = 1e30
        umax = -1e30
        vmin = 1e30
        vmax = -1e30
        behind = False
        for c in range(3):
            z = tris[ti, c, 2]
            if z <= 1e-9:
                behind = True
                break
            pu = fx * tris[ti, c, 0] / z + cx
            pv = fy * tris[ti, c, 1] / z + cy
            umin = min(umin, pu)
            umax = max(umax, pu)
            vmin = min(vmin, pv)
            vmax = max(vmax, pv)
        if behind:
            j0, j1, i0, i1 = 0, W - 1, 0, H - 1
        else:
            j0 = max(int(np.floor((umin - u_start) / step)) - 1, 0)
            j1 = min(int(np.ceil((umax - u_start) / step)) + 1, W - 1)
            i0 = max(int(np.floor((vmin - v_start) / step)) - 1, 0)
            i1 = min(int(np.ceil((vmax - v_start) / step)) + 1, H - 1)
        if j0 > j1 or i0 > i1:
            continue
        p0x, p0y, p0z = tris[ti, 0, 0], tris[ti, 0, 1], tris[ti, 0, 2]
        e1x = tris[ti, 1, 0] - p0x
        e1y = tris[ti, 1, 1] - p0y
        e1z = tris[ti, 1, 2] - p0z
        e2x = tris[ti, 2, 0] - p0x
        e2y = tris[ti, 2, 1] - p0y
        e2z = tris[ti, 2, 2] - p0z
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                dx, dy, dz = rays[i, j, 0], rays[i, j, 1], rays[i, j, 2]
                # Moller-Trumbore, ray origin at the camera centre
                px = dy * e2z - dz * e2y
                py = dz * e2x - dx * e2z
                pz = dx * e2y - dy * e2x
                det = e1x * px + e1y * py + e1z * pz
                if abs(det) < eps:
                    continue
                inv = 1.0 / det
                sx, sy, sz = -p0x, -p0y, -p0z
                bu = (sx * px + sy * py + sz * pz) * inv
                if bu < -1e-12 or bu > 1.0 + 1e-12:
                    continue
                qx = sy * e1z - sz * e1y
                qy = sz * e1x - sx * e1z
                qz = sx * e1y - sy * e1x
                bv = (dx * qx + dy * qy + dz * qz) * inv
                if bv < -1e-12 or bu + bv > 1.0 + 1e-12:
                    continue
                t = (e2x * qx + e2y * qy + e2z * qz) * inv
                if t <= 1e-9 or t >= hit_t[i, j]:
                    continue
                hit_t[i, j] = t
                depth[i, j] = t * dz
                bw = 1.0 - bu - bv
                nx = bw * norms[ti, 0, 0] + bu * norms[ti, 1, 0] + bv * norms[ti, 2, 0]
                ny = bw * norms[ti, 0, 1] + bu * norms[ti, 1, 1] + bv * norms[ti, 2, 1]
                nz = bw * norms[ti, 0, 2] + bu * norms[ti, 1, 2] + bv * norms[ti, 2, 2]
                nn = np.sqrt(nx * nx + ny * ny + nz * nz)
                nx /= nn
                ny /= nn
                nz /= nn
                if nx * dx + ny * dy + nz * dz > 0.0:
                    nx, ny, nz = -nx, -ny, -nz
                normal[i, j, 0] = nx
                normal[i, j, 1] = ny
                normal[i, j, 2] = nz


def cast_mesh(mesh: Mesh, K: CameraIntrinsics, box: PatchBox) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest-hit z-depth, camera-facing unit normal and hit mask for every patch pixel.

    ``mesh`` must already be in the camera frame.
    """
    rays = ray_map(K, box)
    uu, vv = box.pixel_coords()
    res = box.res
    depth = np.zeros((res, res))
    normal = np.zeros((res, res, 3))
    hit_t = np.full((res, res), np.inf)
    step = box.size / res
    _cast(np.ascontiguousarray(mesh.triangles), np.ascontiguousarray(mesh.normals), rays, uu, vv,
          K.fx, K.fy, K.cx, K.cy, step, uu[0, 0], vv[0, 0], depth, normal, hit_t)
    mask = np.isfinite(hit_t)
    return depth, normal, mask
