"""Binary PPM (P6) reader and writer.

PPM was picked because it round-trips bit-exactly with no codec
dependency.  The writer emits the canonical header "P6\\n{w} {h}\\n255\\n"
followed by raw RGB bytes; the reader accepts any whitespace-separated P6
header with maxval 255 and rejects everything else with a FormatError
naming the file.
"""

import numpy as np

from ..errors import FormatError


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected [H,W,3], got shape {image.shape}")
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {image.dtype}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def _read_header_token(data: bytes, pos: int, path) -> tuple[bytes, int]:
    n = len(data)
    while pos < n and data[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError(f"{path}: truncated PPM header")
    return data[start:pos], pos


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM (missing P6 magic)")
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_header_token(data, pos, path)
        if not token.isdigit():
            raise FormatError(f"{path}: non-numeric PPM header field {token!r}")
        fields.append(int(token))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: bad dimensions {w}x{h}")
    pos += 1  # single whitespace byte after maxval
    expected = w * h * 3
    raster = data[pos:]
    if len(raster) != expected:
        raise FormatError(f"{path}: expected {expected} raster bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def write_mask_ppm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected [H,W] mask, got shape {mask.shape}")
    if mask.dtype != np.bool_:
        raise ValueError(f"expected boolean mask, got {mask.dtype}")
    image = np.where(mask[..., None], 255, 0).astype(np.uint8)
    write_ppm(path, np.repeat(image, 3, axis=2))


def read_mask_ppm(path) -> np.ndarray:
    image = read_ppm(path)
    flat = np.unique(image)
    if not set(flat.tolist()) <= {0, 255}:
        raise FormatError(f"{path}: mask pixels must be 0 or 255")
    if np.any(image[..., 0] != image[..., 1]) or np.any(image[..., 0] != image[..., 2]):
        raise FormatError(f"{path}: mask channels disagree")
    return image[..., 0] == 255
