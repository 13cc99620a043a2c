"""On-disk dataset layout.

``scene.json``
    experiment config, intrinsics and the frame table (id, role, pixel count).
``poses.txt``
    one 4x4 world-from-camera block per frame, in frame-table order.
``samples.bin``
    little-endian records ``u32 frame_id, f32[2] pixel, f32[3] gt_coord,
    u8 source, u8 corrupted, f32[dim] feature`` in frame-table order. The
    corrupted byte is always written as 0; the real flags live in the sidecar.
``oracle.bin``
    magic, ``u32`` count, then ``u32 frame_id, f32[2] pixel, u8 corrupted``
    per rendered pixel. Only evaluation reads it.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, SchemaMismatch
from .geometry import Intrinsics, format_pose, parse_poses
from .poi import pixel_keys
from .scene import Frame, Source

FORMAT = "poiloc-dataset"
VERSION = 1
ORACLE_MAGIC = b"POIORAC\x00"

ROLE_TRAIN = "train"
ROLE_TEST = "test"
ROLE_RENDERED = "rendered"


def record_dtype(dim: int) -> np.dtype:
    return np.dtype([("frame_id", "<u4"), ("pixel", "<f4", (2,)), ("gt_coord", "<f4", (3,)),
                     ("source", "u1"), ("corrupted", "u1"), ("feature", "<f4", (dim,))])


ORACLE_DTYPE = np.dtype([("frame_id", "<u4"), ("pixel", "<f4", (2,)), ("corrupted", "u1")])


@dataclass
class Dataset:
    config: dict
    intrinsics: Intrinsics
    frames: list[Frame]
    roles: list[str]
    feature_dim: int
    oracle: dict = field(default_factory=dict)

    def by_role(self, role: str) -> list[Frame]:
        return [f for f, r in zip(self.frames, self.roles) if r == role]

    @property
    def train_frames(self) -> list[Frame]:
        return self.by_role(ROLE_TRAIN)

    @property
    def test_frames(self) -> list[Frame]:
        return self.by_role(ROLE_TEST)

    @property
    def rendered_frames(self) -> list[Frame]:
        return self.by_role(ROLE_RENDERED)


def _records(frames: list[Frame], dim: int) -> np.ndarray:
    n = sum(len(f) for f in frames)
    rec = np.zeros(n, dtype=record_dtype(dim))
    pos = 0
    for f in frames:
        s = slice(pos, pos + len(f))
        rec["frame_id"][s] = f.frame_id
        rec["pixel"][s] = f.pixels
        rec["gt_coord"][s] = f.gt_coords
        rec["source"][s] = int(f.source)
        rec["feature"][s] = f.features
        pos += len(f)
    return rec


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_dataset(root, ds: Dataset) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT, "version": VERSION, "feature_dim": ds.feature_dim,
        "intrinsics": ds.intrinsics.to_dict(), "config": ds.config,
        "frames": [{"frame_id": f.frame_id, "role": r, "n_pixels": len(f), "exposure": f.exposure}
                   for f, r in zip(ds.frames, ds.roles)],
    }
    _atomic_write(root / "scene.json", (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    _atomic_write(root / "poses.txt", "".join(format_pose(f.pose) + "\n" for f in ds.frames).encode())
    _atomic_write(root / "samples.bin", _records(ds.frames, ds.feature_dim).tobytes())
    rendered = [f for f, r in zip(ds.frames, ds.roles) if r == ROLE_RENDERED]
    if rendered or (root / "oracle.bin").exists():
        _atomic_write(root / "oracle.bin", oracle_bytes(rendered))


def oracle_bytes(frames: list[Frame]) -> bytes:
    n = sum(len(f) for f in frames)
    rec = np.zeros(n, dtype=ORACLE_DTYPE)
    pos = 0
    for f in frames:
        s = slice(pos, pos + len(f))
        rec["frame_id"][s] = f.frame_id
        rec["pixel"][s] = f.pixels
        rec["corrupted"][s] = f.corrupted
        pos += len(f)
    return ORACLE_MAGIC + struct.pack("<I", n) + rec.tobytes()


def read_oracle(path) -> dict:
    """``{(frame_id, u, v): corrupted}`` keyed like the ledger."""
    blob = Path(path).read_bytes()
    if blob[:8] != ORACLE_MAGIC or len(blob) < 12:
        raise SchemaMismatch(f"{path}: not an oracle sidecar")
    (n,) = struct.unpack("<I", blob[8:12])
    body = blob[12:]
    if len(body) != n * ORACLE_DTYPE.itemsize:
        raise SchemaMismatch(f"{path}: record count does not match payload")
    rec = np.frombuffer(body, dtype=ORACLE_DTYPE)
    keys = pixel_keys(rec["frame_id"].astype(np.int64), rec["pixel"])
    return dict(zip(keys, rec["corrupted"].astype(bool).tolist()))


def load_dataset(root, with_oracle: bool = False) -> Dataset:
    root = Path(root)
    try:
        meta = json.loads((root / "scene.json").read_text())
        poses = parse_poses((root / "poses.txt").read_text())
        blob = (root / "samples.bin").read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"dataset file missing: {exc.filename}") from exc
    except (json.JSONDecodeError, ValueError) as exc:
        raise SchemaMismatch(f"dataset {root} is malformed: {exc}") from exc
    if meta.get("format") != FORMAT or meta.get("version") != VERSION:
        raise SchemaMismatch(f"{root}: unsupported dataset format")
    dim = int(meta["feature_dim"])
    table = meta["frames"]
    dt = record_dtype(dim)
    if len(poses) != len(table) or len(blob) % dt.itemsize:
        raise SchemaMismatch(f"{root}: poses/samples do not match the frame table")
    rec = np.frombuffer(blob, dtype=dt)
    if len(rec) != sum(t["n_pixels"] for t in table):
        raise SchemaMismatch(f"{root}: sample count does not match the frame table")
    k = Intrinsics(**meta["intrinsics"])
    frames, roles, pos = [], [], 0
    for t, pose in zip(table, poses):
        r = rec[pos:pos + t["n_pixels"]]
        pos += t["n_pixels"]
        if np.any(r["frame_id"] != t["frame_id"]):
            raise SchemaMismatch(f"{root}: samples of frame {t['frame_id']} are out of order")
        frames.append(Frame(
            frame_id=int(t["frame_id"]), pose=pose, intrinsics=k,
            pixels=r["pixel"].astype(np.float64), gt_coords=r["gt_coord"].astype(np.float64),
            appearance=np.zeros(len(r), dtype=np.int64),
            source=Source(int(r["source"][0])) if len(r) else Source.QUERY,
            features=r["feature"].astype(np.float32), exposure=float(t.get("exposure", 0.0))))
        roles.append(t["role"])
    ds = Dataset(meta["config"], k, frames, roles, dim)
    if with_oracle and (root / "oracle.bin").exists():
        ds.oracle = read_oracle(root / "oracle.bin")
        for f, role in zip(ds.frames, ds.roles):
            if role == ROLE_RENDERED:
                f.corrupted = np.array([ds.oracle.get(key, False) for key in
                                        pixel_keys(np.full(len(f), f.frame_id), f.pixels)])
    return ds


def write_summary(path, summary: dict) -> None:
    """Machine-readable ``key=value`` lines, sorted by key."""
    with open(path, "w") as fh:
        for key in sorted(summary):
            v = summary[key]
            fh.write(f"{key}={v:.9g}\n" if isinstance(v, float) else f"{key}={v}\n")


def read_summary(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" not in line:
                continue
            key, raw = line.rstrip("\n").split("=", 1)
            try:
                out[key] = int(raw)
            except ValueError:
                try:
                    out[key] = float(raw)
                except ValueError:
                    out[key] = raw
    return out

