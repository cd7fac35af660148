"""Binary PPM/PGM frames and OTB-style ``groundtruth.txt`` files."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import BBox

_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _header(blob: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    for _ in range(count):
        m = _TOKEN.match(blob, pos)
        if m is None:
            raise DataError("truncated image header")
        tokens.append(m.group(2))
        pos = m.end()
    return tokens, pos + 1  # one whitespace byte separates header and raster


def read_ppm(path) -> np.ndarray:
    """Binary P6 -> (H, W, 3) float64 in [0, 1]."""
    blob = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _header(blob, 4)
    if magic != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {magic!r})")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise DataError(f"{path}: bad header") from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise DataError(f"{path}: bad dimensions {w}x{h} / maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * 3 * dtype.itemsize
    if len(blob) - pos < need:
        raise DataError(f"{path}: raster truncated")
    raster = np.frombuffer(blob, dtype=dtype, count=w * h * 3, offset=pos)
    return raster.reshape(h, w, 3).astype(np.float64) / maxval


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + _to_bytes(img).tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    """(H, W) values in [0, 1] -> binary 8-bit P5."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected (H, W), got {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + _to_bytes(img).tobytes())


def read_groundtruth(path) -> list[BBox]:
    """One ``x,y,w,h`` (top-left, pixels) per line; commas, tabs or spaces accepted."""
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = [p for p in re.split(r"[,\s]+", line.strip()) if p]
        try:
            x, y, w, h = (float(p) for p in parts)
            boxes.append(BBox.from_xywh(x, y, w, h))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: expected x,y,w,h with w,h > 0, got {line!r}") from exc
    return boxes


def write_groundtruth(path, boxes) -> None:
    Path(path).write_text("".join("{:.4f},{:.4f},{:.4f},{:.4f}\n".format(*b.to_xywh()) for b in boxes))


class FrameDir:
    """Sorted ``*.ppm`` frames of a directory, read on access."""

    def __init__(self, root):
        self.root = Path(root)
        self.files = sorted(self.root.glob("*.ppm"))

    def __len__(self) -> int:
        return len(self.files)

    def __getitem__(self, t: int) -> np.ndarray:
        return read_ppm(self.files[t])


def load_sequence_dir(root) -> tuple[FrameDir, list[BBox]]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    gt_path = root / "groundtruth.txt"
    if not gt_path.exists():
        raise DataError(f"{root} has no groundtruth.txt")
    frames = FrameDir(root)
    boxes = read_groundtruth(gt_path)
    if len(frames) == 0:
        raise DataError(f"{root} contains no .ppm frames")
    if len(boxes) != len(frames):
        raise DataError(f"{root}: {len(frames)} frames but {len(boxes)} ground-truth lines")
    return frames, boxes


def write_sequence_dir(root, frames, boxes) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for t in range(len(frames)):
        write_ppm(root / f"{t:05d}.ppm", frames[t])
    write_groundtruth(root / "groundtruth.txt", boxes)
