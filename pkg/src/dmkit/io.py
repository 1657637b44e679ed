"""File formats for scene and fit artifacts.

Float rasters are PFM (little-endian, scale header -1.0, bottom-up rows
as the format requires): ``Pf`` for one channel, ``PF`` for three. 8-bit
images are binary PPM (P6) and masks PGM (P5), so every artifact opens in
a stock image viewer with no extra dependencies.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np


def write_pfm(path, data: np.ndarray):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM wants (H, W) or (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"Pf", b"PF"):
            raise ValueError(f"not a PFM file: {path}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        channels = 3 if tag == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        buf = f.read(w * h * channels * 4)
    data = np.frombuffer(buf, dtype=dtype).reshape(h, w, channels)
    data = np.flipud(data).astype(np.float64)
    return data[:, :, 0] if channels == 1 else data


def write_ppm(path, image: np.ndarray):
    """Write an (H, W, 3) float image in [0, 1] as 8-bit binary PPM."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM wants (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(quantized.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise ValueError(f"not a binary PPM: {path}")
        w, h = _read_header_dims(f)
        maxval = int(_read_header_line(f))
        buf = f.read(w * h * 3)
    img = np.frombuffer(buf, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / maxval


def write_pgm(path, mask: np.ndarray):
    """Write an (H, W) integer map (mask / id map) as 8-bit binary PGM."""
    if mask.ndim != 2:
        raise ValueError(f"PGM wants (H, W), got {mask.shape}")
    h, w = mask.shape
    data = np.clip(np.asarray(mask), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P5":
            raise ValueError(f"not a binary PGM: {path}")
        w, h = _read_header_dims(f)
        _read_header_line(f)  # maxval
        buf = f.read(w * h)
    return np.frombuffer(buf, dtype=np.uint8).reshape(h, w).copy()


def _read_header_line(f) -> bytes:
    line = f.readline()
    while line.startswith(b"#"):
        line = f.readline()
    return line


def _read_header_dims(f) -> tuple[int, int]:
    parts = _read_header_line(f).split()
    return int(parts[0]), int(parts[1])


# ---------------------------------------------------------------------------
# JSON + manifest helpers
# ---------------------------------------------------------------------------


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def config_hash(obj) -> str:
    """Stable hash of a JSON-serializable config."""
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


class Manifest:
    """One per output directory: command, config hash, seed, artifacts,
    wall-clock. Identical manifest inputs must reproduce identical float
    rasters."""

    def __init__(self, command: str, config, seed: int | None):
        from . import __version__

        self._t0 = time.monotonic()
        self.data = {
            "command": command,
            "config_hash": config_hash(config),
            "seed": seed,
            "artifacts": [],
            "version": __version__,
            "extra": {},
        }

    def add(self, path):
        self.data["artifacts"].append(Path(path).name)

    def note(self, key: str, value):
        self.data["extra"][key] = value

    def write(self, out_dir):
        self.data["wall_clock_s"] = round(time.monotonic() - self._t0, 3)
        write_json(Path(out_dir) / "manifest.json", self.data)
