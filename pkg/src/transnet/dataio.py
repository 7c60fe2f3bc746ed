"""On-disk formats: ``.tnsr`` tensor files, scene directories, JSON manifests.

Tensor file layout (all little-endian)::

    b"TNSR" | u32 version=1 | u32 dtype | u32 rank | rank x u64 dims | payload

dtype codes: 0 float64, 1 float32, 2 uint8. Payload is row-major.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose, is_rotation
from .synth.render import PatchBox, ray_map
from .synth.scene import PatchBundle

MAGIC = b"TNSR"
VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("uint8"): 2}

SCENE_FILES = ("rgb.tnsr", "depth_gt.tnsr", "depth_raw.tnsr", "normal_gt.tnsr", "mask.tnsr", "meta.json")


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class LoadError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def encode_tensor(array) -> bytes:
    a = np.asarray(array)
    code = DTYPE_CODES.get(a.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {a.dtype}")
    header = MAGIC + struct.pack("<III", VERSION, code, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + np.ascontiguousarray(a, dtype=DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic", 0)
    if len(buf) < 16:
        raise FormatError("truncated header", len(buf))
    version, code, rank = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}", 8)
    dims_end = 16 + 8 * rank
    if len(buf) < dims_end:
        raise FormatError("truncated dims", len(buf))
    dims = struct.unpack_from(f"<{rank}Q", buf, 16)
    dtype = DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    need = dims_end + n * dtype.itemsize
    if len(buf) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, got {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError(f"trailing bytes after payload", need)
    return np.frombuffer(buf, dtype=dtype, count=n, offset=dims_end).reshape(dims).copy()


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array.data if hasattr(array, "requires_grad") else array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------- scenes

def scene_annotation(bundle: PatchBundle) -> dict:
    return {
        "generator_version": "1",
        "K": bundle.K.to_dict(),
        "patch": bundle.box.to_dict(),
        "seeds": dict(bundle.seeds),
        "scene_id": bundle.scene_id,
        "objects": [{
            "category": bundle.category,
            "R": [float(x) for x in bundle.pose.R.reshape(-1)],
            "t": [float(x) for x in bundle.pose.t],
            "s": [float(x) for x in bundle.pose.s],
            "symmetric": bool(bundle.symmetric),
        }],
    }


def save_scene(directory, bundle: PatchBundle) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "rgb.tnsr", bundle.rgb.astype(np.float64))
    write_tensor(d / "depth_gt.tnsr", bundle.depth_gt.astype(np.float64))
    write_tensor(d / "depth_raw.tnsr", bundle.depth_raw.astype(np.float64))
    write_tensor(d / "normal_gt.tnsr", bundle.normal_gt.astype(np.float64))
    write_tensor(d / "mask.tnsr", bundle.mask.astype(np.uint8))
    dump_json(d / "meta.json", scene_annotation(bundle))


def _validate_annotation(meta: dict) -> None:
    try:
        CameraIntrinsics.from_dict(meta["K"])
    except (KeyError, ValueError, TypeError) as exc:
        raise LoadError("K", str(exc)) from exc
    objects = meta.get("objects")
    if not objects:
        raise LoadError("objects", "no objects annotated")
    for i, obj in enumerate(objects):
        R = np.asarray(obj.get("R", []), dtype=np.float64)
        if R.size != 9 or not is_rotation(R.reshape(3, 3), 1e-6):
            raise LoadError(f"objects[{i}].R", "not a valid rotation")
        if np.asarray(obj.get("t", [])).size != 3:
            raise LoadError(f"objects[{i}].t", "expected 3 numbers")
        s = np.asarray(obj.get("s", []), dtype=np.float64)
        if s.size != 3 or np.any(s <= 0):
            raise LoadError(f"objects[{i}].s", "expected 3 positive numbers")


def load_scene(directory) -> tuple[PatchBundle, dict]:
    d = Path(directory)
    for name in SCENE_FILES:
        if not (d / name).is_file():
            raise LoadError(name, f"missing in {d}")
    meta = load_json(d / "meta.json")
    _validate_annotation(meta)
    arrays = {name: read_tensor(d / f"{name}.tnsr") for name in ("rgb", "depth_gt", "depth_raw", "normal_gt", "mask")}
    hw = arrays["depth_gt"].shape
    expected = {"rgb": hw + (3,), "depth_gt": hw, "depth_raw": hw, "normal_gt": hw + (3,), "mask": hw}
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise LoadError(name, f"shape {arrays[name].shape}, expected {shape}")
    K = CameraIntrinsics.from_dict(meta["K"])
    box = PatchBox.from_dict(meta["patch"])
    if box.res != hw[0] or hw[0] != hw[1]:
        raise LoadError("patch", f"resolution {box.res} does not match arrays {hw}")
    obj = meta["objects"][0]
    pose = Pose(np.reshape(obj["R"], (3, 3)), obj["t"], obj["s"])
    bundle = PatchBundle(
        rgb=arrays["rgb"].astype(np.float64), depth_raw=arrays["depth_raw"].astype(np.float64),
        depth_gt=arrays["depth_gt"].astype(np.float64), normal_gt=arrays["normal_gt"].astype(np.float64),
        mask=arrays["mask"].astype(bool), rays=ray_map(K, box), K=K, box=box,
        category=obj["category"], pose=pose, symmetric=bool(obj["symmetric"]),
        scene_id=meta.get("scene_id", d.name), seeds=meta.get("seeds", {}))
    return bundle, meta


def directory_hash(root) -> str:
    """SHA-256 over relative paths and bytes of every file below ``root`` (sorted)."""
    h = hashlib.sha256()
    root = Path(root)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(directory, tensors: dict[str, np.ndarray], manifest: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        fname = name.replace("/", "__") + ".tnsr"
        write_tensor(d / fname, np.asarray(tensors[name], dtype=np.float64))
        entries[name] = {"file": fname, "shape": list(np.shape(tensors[name]))}
    dump_json(d / "manifest.json", dict(manifest, tensors=entries))


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    if not (d / "manifest.json").is_file():
        raise LoadError("manifest.json", f"missing in {d}")
    manifest = load_json(d / "manifest.json")
    tensors = {}
    for name, entry in manifest["tensors"].items():
        arr = read_tensor(d / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise LoadError(name, f"shape {arr.shape} disagrees with manifest {entry['shape']}")
        tensors[name] = arr
    return tensors, manifest
