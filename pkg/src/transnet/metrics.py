"""Evaluation metrics: oriented-box IoU, degree/centimetre hits, depth and normal errors."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, box_corners, symmetric_rotation_error_degrees


class EmptyMaskError(ValueError):
    pass


class PairingError(KeyError):
    pass


# ---------------------------------------------------------------- 3D IoU

def _box_faces(half: np.ndarray) -> list[np.ndarray]:
    hx, hy, hz = half
    c = np.array([[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    # index = 4*ix + 2*iy + iz
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    return [c[list(q)] for q in quads]


def _clip_polygon(poly: np.ndarray, sd: np.ndarray, eps: float):
    """Keep the part of ``poly`` with signed distance <= 0; also return points on the plane."""
    out, on_plane = [], []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        dp, dq = sd[i], sd[(i + 1) % n]
        if dp <= eps:
            out.append(p)
            if dp >= -eps:
                on_plane.append(p)
        if (dp < -eps and dq > eps) or (dp > eps and dq < -eps):
            x = p + (q - p) * (dp / (dp - dq))
            out.append(x)
            on_plane.append(x)
    return np.array(out), on_plane


def _order_on_plane(points: list[np.ndarray], normal: np.ndarray, eps: float) -> np.ndarray | None:
    pts = []
    for p in points:
        if all(np.linalg.norm(p - q) > eps for q in pts):
            pts.append(p)
    if len(pts) < 3:
        return None
    pts = np.array(pts)
    c = pts.mean(axis=0)
    u = pts[0] - c
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    ang = np.arctan2((pts - c) @ v, (pts - c) @ u)
    return pts[np.argsort(ang, kind="stable")]


def clip_polyhedron(faces: list[np.ndarray], normal: np.ndarray, offset: float, eps: float) -> list[np.ndarray]:
    """Intersect a convex polyhedron (list of ordered face polygons) with {x : n.x <= offset}."""
    new_faces, cap, coplanar = [], [], False
    for face in faces:
        sd = face @ normal - offset
        if np.all(np.abs(sd) <= eps):
            coplanar = True
        poly, on_plane = _clip_polygon(face, sd, eps)
        cap.extend(on_plane)
        if len(poly) >= 3:
            new_faces.append(poly)
    if not coplanar and new_faces:
        cap_poly = _order_on_plane(cap, normal, eps)
        if cap_poly is not None:
            new_faces.append(cap_poly)
    return new_faces


def polyhedron_volume(faces: list[np.ndarray]) -> float:
    """Volume of a convex polyhedron as a sum of pyramids over an interior point."""
    if not faces:
        return 0.0
    ref = np.concatenate(faces).mean(axis=0)
    vol = 0.0
    for f in faces:
        area_vec = 0.5 * np.sum(np.cross(f, np.roll(f, -1, axis=0)), axis=0)
        a = np.linalg.norm(area_vec)
        if a == 0:
            continue
        vol += a * abs((area_vec / a) @ (f[0] - ref)) / 3.0
    return vol


def intersection_volume(a: Pose, b: Pose) -> float:
    # express box a in box b's frame, where b is axis aligned
    R = b.R.T @ a.R
    t = b.R.T @ (a.t - b.t)
    faces = [f @ R.T + t for f in _box_faces(a.s / 2.0)]
    hb = b.s / 2.0
    eps = 1e-12 * max(float(np.max(a.s)), float(np.max(b.s)), 1.0)
    for axis in range(3):
        for sign in (1.0, -1.0):
            n = np.zeros(3)
            n[axis] = sign
            faces = clip_polyhedron(faces, n, hb[axis], eps)
            if not faces:
                return 0.0
    return polyhedron_volume(faces)


def iou3d(a: Pose, b: Pose) -> float:
    """Exact IoU of two oriented boxes."""
    inter = intersection_volume(a, b)
    union = float(np.prod(a.s) + np.prod(b.s) - inter)
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def _inside(p: np.ndarray, box: Pose) -> np.ndarray:
    local = (p - box.t) @ box.R
    return np.all(np.abs(local) <= box.s / 2.0, axis=1)


def iou3d_mc_oracle(a: Pose, b: Pose, samples: int = 2_000_000, seed=0,
                    chunk: int = 500_000) -> tuple[float, float]:
    """Monte Carlo IoU over the union's axis-aligned hull; returns (estimate, standard error)."""

    pts = np.vstack([box_corners(a), box_corners(b)])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    rng = np.random.default_rng(seed)
    both = union = 0
    left = samples
    while left > 0:
        n = min(chunk, left)
        p = lo + (hi - lo) * rng.random((n, 3))
        ia, ib = _inside(p, a), _inside(p, b)
        both += int(np.count_nonzero(ia & ib))
        union += int(np.count_nonzero(ia | ib))
        left -= n
    if union == 0:
        return 0.0, 0.0
    est = both / union
    return est, math.sqrt(max(est * (1.0 - est), 0.0) / union)


def align_symmetric(est: Pose, gt: Pose) -> Pose:
    """Spin ``est`` about its own z axis so its x axis points along GT x projected onto that plane.

    Falls back to ``est`` unchanged when the projection degenerates.
    """
    z = est.R[:, 2]
    gx = gt.R[:, 0]
    proj = gx - (gx @ z) * z
    nrm = np.linalg.norm(proj)
    if nrm < 1e-9:
        return est
    x = proj / nrm
    R = np.stack([x, np.cross(z, x), z], axis=1)
    return Pose(R, est.t, est.s)


def iou_for_symmetric(est: Pose, gt: Pose) -> float:
    return iou3d(align_symmetric(est, gt), gt)


# ---------------------------------------------------------------- pose hits

def translation_error_cm(est: Pose, gt: Pose) -> float:
    return float(np.linalg.norm(est.t - gt.t) * 100.0)


def degree_cm_hit(est: Pose, gt: Pose, deg: float, cm: float, symmetric: bool) -> bool:
    """True iff rotation error < ``deg`` degrees and translation error < ``cm`` centimetres."""
    rot = symmetric_rotation_error_degrees(est.R, gt.R, symmetric)
    return bool(rot < deg and translation_error_cm(est, gt) < cm)


# ---------------------------------------------------------------- dense metrics

def _masked(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMaskError("metric needs at least one masked pixel")
    return m


def depth_metrics(pred: np.ndarray, gt: np.ndarray, mask) -> dict[str, float]:
    m = _masked(mask)
    p, g = np.asarray(pred, float)[m], np.asarray(gt, float)[m]
    err = p - g
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    ratio = np.where(np.isfinite(ratio) & (p > 0), ratio, np.inf)
    out = {
        "RMSE": float(np.sqrt(np.mean(err ** 2))),
        "REL": float(np.mean(np.abs(err) / g)),
        "MAE": float(np.mean(np.abs(err))),
    }
    for n in (1.05, 1.10, 1.25):
        out[f"d{n:.2f}"] = float(np.mean(ratio < n))
    return out


def angular_errors_degrees(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel angle between unit vectors (atan2 form, exact at zero)."""
    sin = np.linalg.norm(np.cross(pred, gt), axis=-1)
    cos = np.einsum("...k,...k->...", pred, gt)
    return np.degrees(np.arctan2(sin, cos))


def normal_metrics(pred: np.ndarray, gt: np.ndarray, mask) -> dict[str, float]:
    m = _masked(mask)
    p, g = np.asarray(pred, float)[m], np.asarray(gt, float)[m]
    diff = p - g
    ang = angular_errors_degrees(p, g)
    out = {
        "RMSE": float(np.sqrt(np.mean(diff ** 2))),
        "MAE": float(np.mean(np.abs(diff))),
        "MEAN": float(np.mean(ang)),
    }
    # threshold tests use angles rounded to 1e-9 deg so an error of exactly thr is never a hit
    ang_r = np.round(ang, 9)
    for thr in (11.25, 22.5, 30.0):
        out[f"a{thr:g}"] = float(np.mean(ang_r < thr))
    return out


# ---------------------------------------------------------------- report

POSE_COLUMNS = ("3D25", "3D50", "3D75", "5deg5cm", "10deg5cm", "10deg10cm")
DEPTH_COLUMNS = ("depth_RMSE", "depth_REL", "depth_MAE", "depth_d1.05", "depth_d1.10", "depth_d1.25")
NORMAL_COLUMNS = ("normal_RMSE", "normal_MAE", "normal_MEAN", "normal_11.25", "normal_22.5", "normal_30")
EXTRA_COLUMNS = ("rot_err_mean_deg", "trans_err_mean_cm")
CSV_COLUMNS = ("category", "n") + POSE_COLUMNS + DEPTH_COLUMNS + NORMAL_COLUMNS + EXTRA_COLUMNS


@dataclass
class GroundTruth:
    category: str
    pose: Pose
    symmetric: bool
    depth: np.ndarray | None = None
    normal: np.ndarray | None = None
    mask: np.ndarray | None = None


@dataclass
class Prediction:
    pose: Pose | None = None
    depth: np.ndarray | None = None
    normal: np.ndarray | None = None


@dataclass
class MetricReport:
    rows: dict[str, dict[str, float]]
    header: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for cat in self.rows:
            row = self.rows[cat]
            w.writerow([cat] + [_fmt(row.get(c, float("nan"))) for c in CSV_COLUMNS[1:]])
        return buf.getvalue()

    def to_json(self) -> str:
        rows = {c: {k: _json_num(v) for k, v in r.items()} for c, r in self.rows.items()}
        return json.dumps({"header": self.header, "rows": rows}, indent=1, sort_keys=True) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(round(v, 12))


def _json_num(v):
    if isinstance(v, (int, np.integer)):
        return int(v)
    v = float(v)
    return None if math.isnan(v) else round(v, 12)


def pose_record(est: Pose, gt: GroundTruth) -> dict[str, float]:
    iou = iou_for_symmetric(est, gt.pose) if gt.symmetric else iou3d(est, gt.pose)
    rec = {
        "3D25": float(iou > 0.25), "3D50": float(iou > 0.50), "3D75": float(iou > 0.75),
        "5deg5cm": float(degree_cm_hit(est, gt.pose, 5, 5, gt.symmetric)),
        "10deg5cm": float(degree_cm_hit(est, gt.pose, 10, 5, gt.symmetric)),
        "10deg10cm": float(degree_cm_hit(est, gt.pose, 10, 10, gt.symmetric)),
        "rot_err_mean_deg": symmetric_rotation_error_degrees(est.R, gt.pose.R, gt.symmetric),
        "trans_err_mean_cm": translation_error_cm(est, gt.pose),
    }
    return rec


def evaluate(predictions: dict[str, Prediction], truth: dict[str, GroundTruth],
             header: dict | None = None) -> MetricReport:
    """Aggregate every metric per category and overall ("all").

    Pose metrics are fractions of objects; dense metrics are averaged per image.
    """
    missing = sorted(set(truth) - set(predictions))
    extra = sorted(set(predictions) - set(truth))
    if missing or extra:
        raise PairingError(f"unpaired ids: missing predictions {missing}, unknown predictions {extra}")
    per_cat: dict[str, list[dict[str, float]]] = {}
    for key in sorted(truth):
        gt, pred = truth[key], predictions[key]
        rec: dict[str, float] = {}
        if pred.pose is not None:
            rec.update(pose_record(pred.pose, gt))
        if pred.depth is not None and gt.depth is not None:
            for k, v in depth_metrics(pred.depth, gt.depth, gt.mask).items():
                rec[f"depth_{k}"] = v
        if pred.normal is not None and gt.normal is not None:
            for k, v in normal_metrics(pred.normal, gt.normal, gt.mask).items():
                name = {"a11.25": "11.25", "a22.5": "22.5", "a30": "30"}.get(k, k)
                rec[f"normal_{name}"] = v
        per_cat.setdefault(gt.category, []).append(rec)
    rows: dict[str, dict[str, float]] = {}
    everything: list[dict[str, float]] = []
    for cat in sorted(per_cat):
        rows[cat] = _aggregate(per_cat[cat])
        everything.extend(per_cat[cat])
    rows["all"] = _aggregate(everything)
    return MetricReport(rows, dict(header or {}))


def _aggregate(records: list[dict[str, float]]) -> dict[str, float]:
    out: dict[str, float] = {"n": len(records)}
    for col in CSV_COLUMNS[2:]:
        vals = [r[col] for r in records if col in r]
        out[col] = float(np.mean(vals)) if vals else float("nan")
    return out


def monotonicity_violations(row: dict[str, float]) -> list[str]:
    """Names of violated ordering invariants in one report row (NaN columns are skipped)."""
    chains = [("3D25", "3D50", "3D75"), ("10deg5cm", "5deg5cm"), ("10deg10cm", "10deg5cm"),
              ("depth_d1.25", "depth_d1.10", "depth_d1.05"), ("normal_30", "normal_22.5", "normal_11.25")]
    bad = []
    for chain in chains:
        for hi, lo in zip(chain[:-1], chain[1:]):
            a, b = row.get(hi, float("nan")), row.get(lo, float("nan"))
            if not (math.isnan(a) or math.isnan(b)) and a < b:
                bad.append(f"{hi} < {lo}")
    for col in POSE_COLUMNS + ("depth_d1.05", "depth_d1.10", "depth_d1.25", "normal_11.25", "normal_22.5", "normal_30"):
        v = row.get(col, float("nan"))
        if not math.isnan(v) and not 0.0 <= v <= 1.0:
            bad.append(f"{col} outside [0, 1]")
    return bad
