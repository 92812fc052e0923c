"""Scene bundle reading/writing.

On-disk layout of a bundle directory::

    manifest.json               scene id, frame list, embedding dim, image size
    frame_<i>/pose.txt          4x4 row-major camera-to-world, meters
    frame_<i>/intrinsics.txt    fx fy cx cy (pixels)
    frame_<i>/rgb.png           8-bit RGB
    frame_<i>/depth.bin         b"CSDEPTH1", uint32 H, uint32 W, float32 LE meters
      or  frame_<i>/depth.png   16-bit millimeters
    frame_<i>/masks.rle         "H W" header, then "<id> <start> <len> ..." per mask
    frame_<i>/embeddings.f32    records of int32 mask id + D float32, little endian

Poses are CAMERA-TO-WORLD. Depth 0 marks an invalid pixel.
Fixture bundles additionally carry ``frame_<i>/gt_labels.rle`` and
``gt_instances.json``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

DEPTH_MAGIC = b"CSDEPTH1"
PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


class BundleError(ValueError):
    """Raised for malformed scene bundles; message starts with the error kind."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def normalize_embedding(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0.0:
        raise BundleError("invalid embedding: zero or non-finite vector")
    return v / n


def check_rotation(pose: np.ndarray, tol: float = 1e-6) -> None:
    R = pose[:3, :3]
    if not np.all(np.isfinite(pose)):
        raise BundleError("invalid pose: non-finite entries")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise BundleError("invalid pose: upper-left block is not a rotation")
    if np.abs(pose[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > tol:
        raise BundleError("invalid pose: last row must be [0 0 0 1]")


@dataclass(frozen=True)
class CameraFrame:
    index: int
    intrinsics: np.ndarray          # fx, fy, cx, cy
    pose: np.ndarray                # 4x4 camera-to-world
    rgb: np.ndarray                 # H x W x 3, [0, 1]
    depth: np.ndarray               # H x W meters, 0 = invalid
    masks: Mapping[int, np.ndarray] = field(default_factory=dict)
    embeddings: Mapping[int, np.ndarray] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def camera_center(self) -> np.ndarray:
        return self.pose[:3, 3]

    def validate(self) -> "CameraFrame":
        H, W = self.depth.shape
        if self.rgb.shape != (H, W, 3):
            raise BundleError(f"geometry mismatch: frame {self.index} rgb {self.rgb.shape} vs depth {(H, W)}")
        check_rotation(self.pose)
        if not np.all(np.isfinite(self.depth)) or (self.depth < 0).any():
            raise BundleError(f"invalid depth: frame {self.index} has negative or non-finite values")
        for mid, m in self.masks.items():
            if m.shape != (H, W):
                raise BundleError(f"geometry mismatch: frame {self.index} mask {mid} is {m.shape}, image is {(H, W)}")
        if set(self.masks) != set(self.embeddings):
            raise BundleError(f"incomplete bundle: frame {self.index} masks and embeddings disagree")
        return self


@dataclass(frozen=True)
class SceneBundle:
    frames: tuple[CameraFrame, ...]
    scene_id: str = "scene"
    embedding_dim: int = 0
    units: str = "meters"
    gravity_axis: str = "z"

    def __post_init__(self):
        if len(self.frames) < 2:
            raise BundleError("incomplete bundle: at least 2 frames are required")
        idx = [f.index for f in self.frames]
        if idx != list(range(len(idx))):
            raise BundleError(f"incomplete bundle: frame indices must be 0..n-1, got {idx}")

    @property
    def mask_count(self) -> int:
        return sum(len(f.masks) for f in self.frames)


# ---------------------------------------------------------------- RLE / binaries

def encode_rle(mask: np.ndarray) -> list[int]:
    """Runs (start, length) over the row-major flattened mask."""
    flat = np.concatenate([[False], np.asarray(mask, bool).ravel(), [False]])
    d = np.flatnonzero(flat[1:] != flat[:-1])
    starts, ends = d[0::2], d[1::2]
    out = np.empty(2 * len(starts), dtype=np.int64)
    out[0::2] = starts
    out[1::2] = ends - starts
    return out.tolist()


def decode_rle(runs: Iterable[int], shape: tuple[int, int]) -> np.ndarray:
    runs = np.asarray(list(runs), dtype=np.int64)
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    for s, n in zip(runs[0::2], runs[1::2]):
        flat[s:s + n] = True
    return flat.reshape(shape)


def write_rle_file(path: Path, masks: Mapping[int, np.ndarray], shape: tuple[int, int]) -> None:
    lines = [f"{shape[0]} {shape[1]}"]
    for mid in sorted(masks):
        lines.append(" ".join(str(x) for x in [int(mid), *encode_rle(masks[mid])]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_rle_file(path: Path) -> tuple[dict[int, np.ndarray], tuple[int, int]]:
    text = Path(path).read_text().splitlines()
    if not text:
        raise BundleError(f"incomplete bundle: empty mask file {path}")
    H, W = (int(x) for x in text[0].split())
    masks = {}
    for line in text[1:]:
        parts = line.split()
        if not parts:
            continue
        mid = int(parts[0])
        masks[mid] = decode_rle((int(x) for x in parts[1:]), (H, W))
    return masks, (H, W)


def write_embeddings(path: Path, embeddings: Mapping[int, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for mid in sorted(embeddings):
            fh.write(struct.pack("<i", int(mid)))
            fh.write(np.asarray(embeddings[mid], dtype="<f4").tobytes())


def read_embeddings(path: Path, dim: int) -> dict[int, np.ndarray]:
    raw = Path(path).read_bytes()
    rec = 4 + 4 * dim
    if dim <= 0 or len(raw) % rec:
        raise BundleError(f"geometry mismatch: {path} is not a multiple of {rec}-byte records")
    out = {}
    for off in range(0, len(raw), rec):
        (mid,) = struct.unpack_from("<i", raw, off)
        out[mid] = np.frombuffer(raw, dtype="<f4", count=dim, offset=off + 4).astype(np.float64)
    return out


def write_depth(path: Path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<II", *depth.shape))
        fh.write(depth.tobytes())


def read_depth(path: Path) -> np.ndarray:
    """Read float32 meters (``depth.bin``) or 16-bit millimeter PNG, sniffed by header."""
    raw = Path(path).read_bytes()
    if raw.startswith(DEPTH_MAGIC):
        H, W = struct.unpack_from("<II", raw, len(DEPTH_MAGIC))
        data = np.frombuffer(raw, dtype="<f4", offset=len(DEPTH_MAGIC) + 8)
        if data.size != H * W:
            raise BundleError(f"geometry mismatch: {path} holds {data.size} values, header says {H}x{W}")
        return data.reshape(H, W).astype(np.float64)
    if raw.startswith(PNG_MAGIC):
        img = np.asarray(Image.open(path))
        return img.astype(np.float64) / 1000.0
    raise BundleError(f"incomplete bundle: unrecognized depth format in {path}")


def write_rgb(path: Path, rgb: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


def quantize_rgb(rgb: np.ndarray) -> np.ndarray:
    """What an rgb image becomes after a PNG round trip."""
    return np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255) / 255.0


# ---------------------------------------------------------------- frames / bundles

FRAME_FILES = ("pose.txt", "intrinsics.txt", "rgb.png", "masks.rle", "embeddings.f32")


def load_frame(fdir: Path, index: int, dim: int, require_depth: bool = True) -> CameraFrame:
    fdir = Path(fdir)
    for name in FRAME_FILES:
        if not (fdir / name).exists():
            raise BundleError(f"incomplete bundle: missing {fdir.name}/{name}")
    depth_path = next((fdir / n for n in ("depth.bin", "depth.png") if (fdir / n).exists()), None)
    rgb = np.asarray(Image.open(fdir / "rgb.png").convert("RGB"), dtype=np.float64) / 255.0
    if depth_path is None:
        if require_depth:
            raise BundleError(f"incomplete bundle: missing {fdir.name}/depth.bin or depth.png")
        depth = np.zeros(rgb.shape[:2])
    else:
        depth = read_depth(depth_path)
    try:
        pose = np.loadtxt(fdir / "pose.txt", dtype=np.float64).reshape(4, 4)
        intr = np.loadtxt(fdir / "intrinsics.txt", dtype=np.float64).reshape(4)
    except ValueError as exc:
        raise BundleError(f"invalid pose: cannot parse pose/intrinsics in {fdir.name}: {exc}") from None
    masks, shape = read_rle_file(fdir / "masks.rle")
    if shape != depth.shape:
        raise BundleError(f"geometry mismatch: masks {shape} vs depth {depth.shape} in {fdir.name}")
    emb_raw = read_embeddings(fdir / "embeddings.f32", dim)
    emb = {k: _frozen(normalize_embedding(v)) for k, v in emb_raw.items()}
    frame = CameraFrame(
        index=index,
        intrinsics=_frozen(intr),
        pose=_frozen(pose),
        rgb=_frozen(rgb),
        depth=_frozen(depth),
        masks={k: _frozen(v) for k, v in masks.items()},
        embeddings=emb,
    )
    return frame.validate()


def load_scene_bundle(path: str | Path) -> SceneBundle:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise BundleError(f"incomplete bundle: no manifest.json in {path}")
    meta = json.loads(manifest_path.read_text())
    dim = int(meta.get("embedding_dim", 0))
    frames = []
    for i in meta.get("frames", []):
        fdir = path / f"frame_{int(i)}"
        if not fdir.is_dir():
            raise BundleError(f"incomplete bundle: missing directory frame_{i}")
        frames.append(load_frame(fdir, int(i), dim))
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise BundleError(f"geometry mismatch: frames have differing sizes {sorted(shapes)}")
    return SceneBundle(
        frames=tuple(frames),
        scene_id=str(meta.get("scene_id", path.name)),
        embedding_dim=dim,
        units=str(meta.get("units", "meters")),
        gravity_axis=str(meta.get("gravity_axis", "z")),
    )


def write_frame(fdir: Path, frame: CameraFrame, depth_format: str = "bin") -> None:
    fdir = Path(fdir)
    fdir.mkdir(parents=True, exist_ok=True)
    np.savetxt(fdir / "pose.txt", frame.pose, fmt="%.17g")
    np.savetxt(fdir / "intrinsics.txt", np.asarray(frame.intrinsics)[None], fmt="%.17g")
    write_rgb(fdir / "rgb.png", frame.rgb)
    if depth_format == "png":
        mm = np.clip(np.round(np.asarray(frame.depth) * 1000.0), 0, 65535).astype(np.uint16)
        Image.fromarray(mm).save(fdir / "depth.png")
    else:
        write_depth(fdir / "depth.bin", frame.depth)
    write_rle_file(fdir / "masks.rle", frame.masks, frame.shape)
    write_embeddings(fdir / "embeddings.f32", frame.embeddings)


def write_scene_bundle(path: str | Path, bundle: SceneBundle, depth_format: str = "bin") -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    H, W = bundle.frames[0].shape
    manifest = {
        "scene_id": bundle.scene_id,
        "frames": [f.index for f in bundle.frames],
        "embedding_dim": bundle.embedding_dim,
        "units": bundle.units,
        "gravity_axis": bundle.gravity_axis,
        "height": H,
        "width": W,
        "pose_convention": "camera_to_world",
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    for f in bundle.frames:
        write_frame(path / f"frame_{f.index}", f, depth_format=depth_format)
    return path


def read_query_embedding(path: str | Path, dim: int | None = None) -> np.ndarray:
    """A query file uses the embeddings.f32 record format; the first record is the query."""
    raw = Path(path).read_bytes()
    if dim is None:
        dim = (len(raw) - 4) // 4
    recs = read_embeddings(Path(path), dim)
    if not recs:
        raise BundleError(f"incomplete bundle: empty query file {path}")
    return normalize_embedding(recs[min(recs)])


# ---------------------------------------------------------------- instance output

POINT_DTYPE = np.dtype([
    ("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
    ("red", "<f4"), ("green", "<f4"), ("blue", "<f4"),
    ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
    ("label", "<i4"), ("supervoxel", "<i4"),
])

UNASSIGNED = -1


def _instance_palette(n: int) -> np.ndarray:
    rng = np.random.default_rng(12345)
    return rng.uniform(0.15, 1.0, size=(max(n, 1), 3))


def write_point_file(path: Path, positions, colors, normals, labels, supervoxels) -> None:
    n = len(positions)
    rec = np.empty(n, dtype=POINT_DTYPE)
    for i, k in enumerate("xyz"):
        rec[k] = positions[:, i]
    for i, k in enumerate(("red", "green", "blue")):
        rec[k] = colors[:, i]
    for i, k in enumerate(("nx", "ny", "nz")):
        rec[k] = normals[:, i] if normals is not None else 0.0
    rec["label"] = labels
    rec["supervoxel"] = supervoxels
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    types = {"<f8": "double", "<f4": "float", "<i4": "int"}
    for name in POINT_DTYPE.names:
        header.append(f"property {types[POINT_DTYPE[name].str]} {name}")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def read_point_file(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    head = raw[:end].decode("ascii").splitlines()
    n = int(next(l for l in head if l.startswith("element vertex")).split()[-1])
    return np.frombuffer(raw, dtype=POINT_DTYPE, count=n, offset=end).copy()


def write_color_debug(path: Path, positions, labels) -> None:
    """ASCII ply with one color per instance, background gray."""
    pal = _instance_palette(int(labels.max()) + 1 if len(labels) else 1)
    cols = np.full((len(labels), 3), 0.5)
    lab = labels >= 0
    cols[lab] = pal[labels[lab]]
    cols = (cols * 255).astype(int)
    with open(path, "w") as fh:
        fh.write(f"ply\nformat ascii 1.0\nelement vertex {len(labels)}\n"
                 "property float x\nproperty float y\nproperty float z\n"
                 "property uchar red\nproperty uchar green\nproperty uchar blue\n"
                 "property int label\nend_header\n")
        for p, c, l in zip(positions, cols, labels):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]} {l}\n")


def write_instance_output(instances, cloud, supervoxels, path: str | Path, extra: dict | None = None) -> Path:
    """Write ``points.ply`` (per-point label, color, super-voxel) and ``instances.json``.

    Points belonging to no instance carry label -1.
    """
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise BundleError(f"unwritable path: {path}: {exc}") from None
    labels = np.full(len(cloud.positions), UNASSIGNED, dtype=np.int32)
    point_sv = supervoxels.point_labels
    for inst in instances:
        if len(inst.supervoxels) and (np.asarray(inst.supervoxels).max() >= supervoxels.count or
                                      np.asarray(inst.supervoxels).min() < 0):
            raise BundleError(f"instance {inst.id} references unknown super-voxels")
        labels[np.isin(point_sv, inst.supervoxels)] = inst.id
    write_point_file(path / "points.ply", cloud.positions, cloud.colors, cloud.normals, labels, point_sv)
    manifest = {
        "instances": [
            {
                "id": int(inst.id),
                "confidence": float(inst.confidence),
                "supervoxels": [int(s) for s in inst.supervoxels],
                "n_points": int((labels == inst.id).sum()),
                "members": [[int(f), int(m)] for f, m in inst.members],
                "embedding": [float(x) for x in inst.embedding],
            }
            for inst in instances
        ],
        "n_points": int(len(labels)),
        "n_supervoxels": int(supervoxels.count),
    }
    if extra:
        manifest.update(extra)
    (path / "instances.json").write_text(json.dumps(manifest, indent=1))
    return path


def read_instance_manifest(path: str | Path) -> dict:
    path = Path(path)
    mf = path / "instances.json" if path.is_dir() else path
    if not mf.exists():
        raise BundleError(f"incomplete bundle: no instances.json in {path}")
    return json.loads(mf.read_text())
