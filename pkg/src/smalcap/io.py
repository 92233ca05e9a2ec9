"""File formats: PNG images/masks, canonical JSON, hashing."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image


def read_image(path):
    """RGB image as float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_image(path, image):
    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def read_mask(path):
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.float64)


def write_mask(path, mask):
    Image.fromarray(((np.asarray(mask) > 0.5) * 255).astype(np.uint8)).save(path, format="PNG")


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def dumps(obj):
    """Canonical JSON: sorted keys, fixed separators, shortest float repr."""
    return json.dumps(obj, sort_keys=True, indent=1, default=_default)


def write_json(path, obj):
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
