"""Image, depth and trace file formats."""
from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image):
    """Binary P6, 8 bits per channel."""
    data = to_uint8(image)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    match = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if match is None:
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    data = np.frombuffer(raw[match.end():match.end() + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_png(path, image):
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    """Read a PPM or PNG as float RGB in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_pfm(path, data):
    """Single-channel little-endian float32 PFM (rows stored bottom-up)."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("PFM writer expects a 2-D map")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(np.flipud(data)).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline().strip())
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * channels * 4), dtype=dtype)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_csv_map(path, data):
    np.savetxt(path, np.asarray(data, dtype=np.float64), delimiter=",", fmt="%.9g")


def read_csv_map(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


def read_depth(path) -> np.ndarray:
    """Depth map from ``.pfm`` or ``.csv``."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    if path.suffix.lower() == ".csv":
        return read_csv_map(path)
    raise ValueError(f"{path}: unsupported depth format (use .pfm or .csv)")


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "s", "pose_jitter"])
        for row in trace:
            writer.writerow([row["step"], repr(row["loss"]), repr(row["s"]),
                             repr(row["pose_jitter"])])


def write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
