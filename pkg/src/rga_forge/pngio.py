"""8-bit PNG image I/O and atomic file writing.

Intensities map by v / 255 on load and round(v * 255) on save.
"""

import json
import os

import numpy as np
from PIL import Image


def image_to_u8(img):
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def u8_to_image(u8):
    return (u8.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def quantize(img):
    """Snap intensities to the 8-bit grid, round to nearest /255 level."""
    return u8_to_image(image_to_u8(img))


def load_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return u8_to_image(arr)


def save_image_u8(path, u8):
    _atomic_save_png(path, Image.fromarray(u8, mode="RGB"))


def save_image(path, img):
    save_image_u8(path, image_to_u8(img))


def save_mask(path, mask):
    u8 = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    _atomic_save_png(path, Image.fromarray(u8, mode="L"))


def load_mask(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return arr >= 128


def _atomic_save_png(path, pil_image):
    tmp = _tmp_name(path)
    pil_image.save(tmp, format="PNG")
    os.replace(tmp, path)


def atomic_write_text(path, text):
    tmp = _tmp_name(path)
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def atomic_write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _tmp_name(path):
    return f"{path}.tmp-{os.getpid()}"
