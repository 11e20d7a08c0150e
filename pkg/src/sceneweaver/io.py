"""File formats, checkpoints, and run-directory layout.

Supervision signals are never re-quantized between stages: RGB images are
lossless 8-bit PNG, depth maps are 32-bit float PFM, masks are 1-bit PNG.
Grid checkpoints are a binary header + raw float64 payload + sha256,
verified on load.  All writes are atomic (write temp, rename).
"""

from __future__ import annotations

import hashlib
import io as _stdio
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraView, DepthMap, Intrinsics, Pose, TrajectorySpec
from .field import RadianceGrid

__all__ = [
    "quantize8",
    "rgb_to_png_bytes",
    "png_bytes_to_rgb",
    "mask_to_png_bytes",
    "png_bytes_to_mask",
    "write_pfm_bytes",
    "read_pfm_bytes",
    "atomic_write_bytes",
    "grid_to_bytes",
    "grid_from_bytes",
    "checkpoint_hash",
    "save_grid",
    "load_grid",
    "CheckpointError",
    "RunConfig",
    "RunDirectory",
    "view_to_dict",
    "view_from_dict",
]

CKPT_MAGIC = b"SWFIELD1"
CKPT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised for malformed, corrupted, or version-mismatched checkpoints."""


# ---------------------------------------------------------------------------
# images


def quantize8(image: np.ndarray) -> np.ndarray:
    """Snap a [0, 1] float image to the 8-bit lattice (k / 255).

    Everything that crosses the wire or the disk lives on this lattice, so
    in-memory supervision round-trips files bit-exactly.
    """
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(arr * 255.0) / 255.0


def rgb_to_png_bytes(image: np.ndarray) -> bytes:
    arr = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    buf = _stdio.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_rgb(data: bytes) -> np.ndarray:
    img = Image.open(_stdio.BytesIO(data)).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def mask_to_png_bytes(mask: np.ndarray) -> bytes:
    arr = np.asarray(mask, dtype=bool)
    buf = _stdio.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG", bits=1)
    return buf.getvalue()


def png_bytes_to_mask(data: bytes) -> np.ndarray:
    img = Image.open(_stdio.BytesIO(data)).convert("L")
    return np.asarray(img) > 127


# ---------------------------------------------------------------------------
# PFM (portable float map, 32-bit, grayscale)


def write_pfm_bytes(values: np.ndarray) -> bytes:
    """Grayscale PFM, little-endian float32, bottom-to-top row order."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    return header + arr[::-1].tobytes()


def read_pfm_bytes(data: bytes) -> np.ndarray:
    buf = _stdio.BytesIO(data)

    def token():
        out = b""
        while True:
            c = buf.read(1)
            if not c:
                raise CheckpointError("truncated PFM header")
            if c.isspace():
                if out:
                    return out
                continue
            out += c

    kind = token()
    if kind != b"Pf":
        raise CheckpointError(f"not a grayscale PFM (got {kind!r})")
    w, h = int(token()), int(token())
    scale = float(token())
    dtype = "<f4" if scale < 0 else ">f4"
    raw = buf.read(4 * w * h)
    if len(raw) != 4 * w * h:
        raise CheckpointError("truncated PFM payload")
    arr = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return arr[::-1].astype(np.float64)


def depth_to_pfm_bytes(depth: DepthMap) -> bytes:
    return write_pfm_bytes(depth.values)


def pfm_bytes_to_depth(data: bytes) -> DepthMap:
    vals = read_pfm_bytes(data)
    return DepthMap(vals, vals > 0)


# ---------------------------------------------------------------------------
# atomic writes


def atomic_write_bytes(path: Path | str, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def append_jsonl(path: Path | str, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# grid checkpoints


def grid_to_bytes(grid: RadianceGrid) -> bytes:
    header = json.dumps(
        {
            "version": CKPT_VERSION,
            "resolution": list(grid.resolution),
            "bbox_min": grid.bbox_min.tolist(),
            "bbox_max": grid.bbox_max.tolist(),
            "dtype": "<f8",
            "byteorder": "little",
        },
        sort_keys=True,
    ).encode("utf-8")
    body = (
        CKPT_MAGIC
        + struct.pack("<I", len(header))
        + header
        + grid.density.astype("<f8").tobytes()
        + grid.color.astype("<f8").tobytes()
    )
    return body + hashlib.sha256(body).digest()


def grid_from_bytes(data: bytes) -> RadianceGrid:
    if len(data) < len(CKPT_MAGIC) + 4 + 32:
        raise CheckpointError("checkpoint too short")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint hash mismatch")
    if body[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    off = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<I", body, off)
    off += 4
    header = json.loads(body[off : off + hlen].decode("utf-8"))
    off += hlen
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    nx, ny, nz = header["resolution"]
    n_density = nx * ny * nz
    density = np.frombuffer(body, dtype="<f8", count=n_density, offset=off).reshape(nx, ny, nz)
    off += 8 * n_density
    color = np.frombuffer(body, dtype="<f8", count=n_density * 3, offset=off).reshape(nx, ny, nz, 3)
    return RadianceGrid(np.array(header["bbox_min"]), np.array(header["bbox_max"]),
                        density.copy(), color.copy())


def checkpoint_hash(grid: RadianceGrid) -> str:
    return hashlib.sha256(grid_to_bytes(grid)).hexdigest()


def save_grid(path: Path | str, grid: RadianceGrid) -> str:
    data = grid_to_bytes(grid)
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def load_grid(path: Path | str) -> RadianceGrid:
    return grid_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# camera (de)serialization


def view_to_dict(view: CameraView) -> dict:
    k = view.intrinsics
    return {
        "id": view.id,
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                       "width": k.width, "height": k.height},
        "rotation": view.pose.rotation.tolist(),
        "translation": view.pose.translation.tolist(),
    }


def view_from_dict(d: dict) -> CameraView:
    return CameraView(
        Intrinsics(**d["intrinsics"]),
        Pose(np.array(d["rotation"]), np.array(d["translation"])),
        id=d["id"],
    )


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Everything a generation run needs; serialized verbatim alongside it."""

    prompt: str = "a cozy room"
    width: int = 128
    height: int = 128
    trajectory: dict = field(default_factory=lambda: {"pattern": "orbit", "steps": 8})
    support_count: int = 8
    support_shift: float = 0.2
    lambda_depth: float = 0.005
    lambda_trans: float = 1000.0
    iterations_init: int = 1200
    iterations_update: int = 600
    batch_size: int = 4096
    render_steps: int = 96
    near: float = 0.05
    lr_init: float = 0.02
    lr_final: float = 0.002
    grid_resolution: int = 96
    bbox_half_extent: tuple = (2.2, 1.8, 2.2)
    provider: str = "oracle"  # "oracle" or a remote base URL
    oracle_seed: int = 7
    oracle_depth_noise: bool = False
    candidate_count: int = 30
    min_mask_fraction: float = 0.002
    close_pinholes: bool = True
    seed: int = 0
    output_dir: str = "runs/out"

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("resolution must be positive")
        if self.support_count < 0 or self.support_shift < 0:
            raise ValueError("support set parameters must be non-negative")
        if self.lambda_depth < 0 or self.lambda_trans < 0:
            raise ValueError("loss weights must be non-negative")
        if self.grid_resolution < 2:
            raise ValueError("grid resolution must be at least 2")
        if not (0 <= self.min_mask_fraction <= 1):
            raise ValueError("min_mask_fraction must be a fraction")
        if self.candidate_count < 1:
            raise ValueError("need at least one inpainting candidate")
        TrajectorySpec.from_dict(self.trajectory)  # raises on bad spec

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        data = json.loads(text)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.bbox_half_extent = tuple(cfg.bbox_half_extent)
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        d = asdict(self)
        d["bbox_half_extent"] = list(self.bbox_half_extent)
        return json.dumps(d, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# run directory


class RunDirectory:
    """Filesystem layout of one generation run.

    config.json + state.json + append-only log.jsonl, per-view supervision
    artifacts under views/, inpainting artifacts under inpaint/, and
    content-hashed grid checkpoints under checkpoints/.
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)

    def create(self, config: RunConfig) -> "RunDirectory":
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "views").mkdir(exist_ok=True)
        (self.root / "inpaint").mkdir(exist_ok=True)
        (self.root / "checkpoints").mkdir(exist_ok=True)
        atomic_write_bytes(self.root / "config.json", config.to_json().encode())
        return self

    def log(self, record: dict) -> None:
        append_jsonl(self.root / "log.jsonl", record)

    def save_view(self, view_id: int, image: np.ndarray, depth: DepthMap,
                  mask: np.ndarray) -> None:
        stem = self.root / "views" / f"{view_id:03d}"
        atomic_write_bytes(stem.with_name(stem.name + "_image.png"), rgb_to_png_bytes(image))
        atomic_write_bytes(stem.with_name(stem.name + "_depth.pfm"), depth_to_pfm_bytes(depth))
        atomic_write_bytes(stem.with_name(stem.name + "_mask.png"), mask_to_png_bytes(mask))

    def load_view(self, view_id: int):
        stem = self.root / "views" / f"{view_id:03d}"
        image = png_bytes_to_rgb(stem.with_name(stem.name + "_image.png").read_bytes())
        vals = read_pfm_bytes(stem.with_name(stem.name + "_depth.pfm").read_bytes())
        mask = png_bytes_to_mask(stem.with_name(stem.name + "_mask.png").read_bytes())
        return image, DepthMap(vals, vals > 0), mask

    def save_inpaint(self, view_id: int, rendered: np.ndarray, missing: np.ndarray,
                     selected: np.ndarray) -> None:
        stem = self.root / "inpaint" / f"{view_id:03d}"
        atomic_write_bytes(stem.with_name(stem.name + "_input.png"), rgb_to_png_bytes(rendered))
        atomic_write_bytes(stem.with_name(stem.name + "_missing.png"), mask_to_png_bytes(missing))
        atomic_write_bytes(stem.with_name(stem.name + "_selected.png"), rgb_to_png_bytes(selected))

    def save_checkpoint(self, name: str, grid: RadianceGrid) -> str:
        return save_grid(self.root / "checkpoints" / f"{name}.ckpt", grid)

    def load_checkpoint(self, name: str) -> RadianceGrid:
        return load_grid(self.root / "checkpoints" / f"{name}.ckpt")

    def save_state(self, state: dict) -> None:
        atomic_write_bytes(self.root / "state.json",
                           json.dumps(state, indent=2, sort_keys=True).encode())

    def load_state(self) -> dict:
        return json.loads((self.root / "state.json").read_text())
