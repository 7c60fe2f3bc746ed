"""Triangle meshes of revolved profiles (plus a torus-segment handle for mugs)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .categories import CategorySpec


class GenerationError(ValueError):
    pass


@dataclass
class Mesh:
    """Triangle soup with per-corner shading normals.

    ``triangles`` and ``normals`` are both (T, 3, 3): triangle, corner, xyz.
    Winding is counter-clockwise seen from outside.
    """

    triangles: np.ndarray
    normals: np.ndarray

    def transformed(self, R: np.ndarray, t: np.ndarray) -> "Mesh":
        return Mesh(self.triangles @ R.T + t, self.normals @ R.T)

    @property
    def vertices(self) -> np.ndarray:
        return self.triangles.reshape(-1, 3)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        v = self.vertices
        return v.min(axis=0), v.max(axis=0)


def _unit_rows(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _orient_outward(tris: np.ndarray, normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    face = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    flip = np.einsum("ij,ij->i", face, normals.sum(axis=1)) < 0
    tris = tris.copy()
    normals = normals.copy()
    tris[flip] = tris[flip][:, ::-1]
    normals[flip] = normals[flip][:, ::-1]
    return tris, normals


def revolve(profile: np.ndarray, segments: int, scale: np.ndarray) -> Mesh:
    """Revolve a (radius, height) polyline about z, then scale per axis.

    Each profile segment gets its own ring of vertices so creases in the
    profile stay sharp; around the axis the normals are smooth.
    """
    profile = np.asarray(profile, dtype=np.float64)
    if profile.ndim != 2 or profile.shape[0] < 3 or profile.shape[1] != 2:
        raise GenerationError("profile needs at least 3 (radius, height) points")
    if np.any(profile[:, 0] < 0):
        raise GenerationError("profile radii must be non-negative")
    scale = np.asarray(scale, dtype=np.float64)
    phi = np.linspace(0.0, 2.0 * np.pi, segments + 1)
    phi[-1] = 0.0
    cphi, sphi = np.cos(phi), np.sin(phi)
    tris, norms = [], []
    for (r0, z0), (r1, z1) in zip(profile[:-1], profile[1:]):
        dr, dz = r1 - r0, z1 - z0
        length = np.hypot(dr, dz)
        if length == 0:
            continue
        nr, nz = dz / length, -dr / length
        for j in range(segments):
            ring = []
            for r, z in ((r0, z0), (r1, z1)):
                for k in (j, j + 1):
                    p = np.array([r * cphi[k], r * sphi[k], z])
                    n = np.array([nr * cphi[k], nr * sphi[k], nz])
                    ring.append((p, n))
            (pa, na), (pb, nb), (pc, nc), (pd, nd) = ring
            for tri in (((pa, na), (pb, nb), (pd, nd)), ((pa, na), (pd, nd), (pc, nc))):
                pts = np.array([q[0] for q in tri])
                if np.linalg.norm(np.cross(pts[1] - pts[0], pts[2] - pts[0])) < 1e-14:
                    continue
                tris.append(pts)
                norms.append(np.array([q[1] for q in tri]))
    if not tris:
        raise GenerationError("profile produced no triangles")
    tris = np.array(tris) * scale
    norms = _unit_rows(np.array(norms) / scale)
    return Mesh(*_orient_outward(tris, norms))


def torus_segment(center: np.ndarray, major: float, minor: float, arc: tuple[float, float],
                  segments: int, rings: int, scale: np.ndarray) -> Mesh:
    """Tube of radius ``minor`` around an arc of radius ``major`` in the x-z plane."""
    psi = np.linspace(arc[0], arc[1], segments + 1)
    beta = np.linspace(0.0, 2.0 * np.pi, rings + 1)
    beta[-1] = 0.0
    P = np.empty((segments + 1, rings + 1, 3))
    N = np.empty_like(P)
    for i, a in enumerate(psi):
        for k, b in enumerate(beta):
            n = np.array([np.cos(b) * np.cos(a), np.sin(b), np.cos(b) * np.sin(a)])
            P[i, k] = center + major * np.array([np.cos(a), 0.0, np.sin(a)]) + minor * n
            N[i, k] = n
    tris, norms = [], []
    for i in range(segments):
        for k in range(rings):
            idx = ((i, k), (i + 1, k), (i + 1, k + 1), (i, k + 1))
            for a, b, c in ((0, 1, 2), (0, 2, 3)):
                tris.append(np.array([P[idx[a]], P[idx[b]], P[idx[c]]]))
                norms.append(np.array([N[idx[a]], N[idx[b]], N[idx[c]]]))
    tris = np.array(tris) * scale
    norms = _unit_rows(np.array(norms) / scale)
    return Mesh(*_orient_outward(tris, norms))


def build_mesh(spec: CategorySpec, scale, segments: int = 32) -> Mesh:
    """Mesh of ``spec`` in its profile frame (base at z=0, axis along z)."""
    if segments < 8:
        raise GenerationError("segments must be >= 8")
    scale = np.asarray(scale, dtype=np.float64)
    body = revolve(np.asarray(spec.profile), segments, scale)
    if not spec.handle:
        return body
    handle = torus_segment(np.array([0.5, 0.0, 0.5]), 0.24, 0.055,
                           (np.radians(-105.0), np.radians(105.0)),
                           max(segments // 2, 8), 12, scale)
    return Mesh(np.concatenate([body.triangles, handle.triangles]),
                np.concatenate([body.normals, handle.normals]))


def box_of(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """(centre, extents) of the mesh's axis-aligned box in its own frame."""
    lo, hi = mesh.bounds()
    return (lo + hi) / 2.0, hi - lo
