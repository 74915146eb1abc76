"""Raster I/O and the half-resolution resampling used around classification.

Images are plain numpy arrays: ``(H, W)`` for single-channel maps and
``(H, W, C)`` for multi-channel ones.  Two on-disk formats are supported:

* 8-bit grayscale / RGB PNG (via Pillow), loaded bit-exactly as ``uint8``.
* FMAP, a minimal little-endian float container::

      b"FMAP" | uint32 width | uint32 height | uint32 channels | float32 * (w*h*c)

  Samples are row-major and channel-interleaved, so an ``(H, W, C)`` float32
  array round-trips without any reordering.
"""
import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

__all__ = [
    "ImageFormatError",
    "CorruptImageError",
    "load_image",
    "save_image",
    "read_fmap",
    "write_fmap",
    "fmap_bytes",
    "fmap_from_bytes",
    "downsample_half",
    "upsample_bilinear",
    "resample_bilinear",
]

FMAP_MAGIC = b"FMAP"
_FMAP_HEADER = struct.Struct("<4sIII")


class ImageFormatError(ValueError):
    """The file is not in a supported format."""


class CorruptImageError(ValueError):
    """The file claims a supported format but its contents are inconsistent."""


def fmap_bytes(arr):
    """Encode an array of shape (H, W) or (H, W, C) as an FMAP byte string."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"FMAP holds 2-D or 3-D arrays, got shape {arr.shape}")
    h, w, c = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return _FMAP_HEADER.pack(FMAP_MAGIC, w, h, c) + payload


def fmap_from_bytes(buf, source="<bytes>"):
    """Decode an FMAP byte string; returns (H, W) when channels == 1.

    Returns the decoded array and the number of bytes consumed, so several
    FMAP blobs can be concatenated in one container.
    """
    if len(buf) < _FMAP_HEADER.size:
        raise CorruptImageError(f"{source}: truncated FMAP header")
    magic, w, h, c = _FMAP_HEADER.unpack_from(buf, 0)
    if magic != FMAP_MAGIC:
        raise ImageFormatError(f"{source}: bad FMAP magic {magic!r}")
    if c < 1:
        raise CorruptImageError(f"{source}: FMAP header declares 0 channels")
    n = w * h * c
    end = _FMAP_HEADER.size + 4 * n
    if len(buf) < end:
        raise CorruptImageError(
            f"{source}: FMAP payload has {len(buf) - _FMAP_HEADER.size} bytes, "
            f"header requires {4 * n}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_FMAP_HEADER.size)
    arr = data.astype(np.float32).reshape(h, w, c)
    if c == 1:
        arr = arr[:, :, 0]
    return arr, end


def write_fmap(arr, path):
    Path(path).write_bytes(fmap_bytes(arr))


def read_fmap(path):
    path = Path(path)
    buf = path.read_bytes()
    arr, end = fmap_from_bytes(buf, source=str(path))
    if end != len(buf):
        raise CorruptImageError(f"{path}: {len(buf) - end} trailing bytes after FMAP payload")
    return arr


def load_image(path):
    """Load a PNG (8-bit gray or RGB) or FMAP file.

    PNG data comes back as ``uint8`` exactly as stored; FMAP data as float32.

    Raises
    ------
    FileNotFoundError
        The path does not exist.
    ImageFormatError
        Neither PNG nor FMAP, or a PNG mode other than 8-bit L / RGB.
    CorruptImageError
        Header or payload inconsistent with the declared format.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head[:4] == FMAP_MAGIC:
        return read_fmap(path)
    if head != b"\x89PNG\r\n\x1a\n":
        raise ImageFormatError(f"{path}: unsupported image format")
    try:
        with PILImage.open(path) as im:
            mode = im.mode
            if mode not in ("L", "RGB"):
                raise ImageFormatError(f"{path}: unsupported PNG mode {mode!r}")
            im.load()
            return np.array(im, dtype=np.uint8)
    except ImageFormatError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptImageError(f"{path}: {exc}") from exc


def save_image(img, path):
    """Write ``img`` to ``path``; the extension selects PNG or FMAP.

    PNG output requires integer samples in [0, 255] and 1 or 3 channels.
    """
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"directory does not exist: {path.parent}")
    arr = np.asarray(img)
    suffix = path.suffix.lower()
    if suffix == ".fmap":
        write_fmap(arr, path)
        return
    if suffix != ".png":
        raise ImageFormatError(f"{path}: unknown extension {suffix!r}")
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if not (arr.ndim == 2 or (arr.ndim == 3 and arr.shape[2] == 3)):
        raise ImageFormatError(f"PNG needs 1 or 3 channels, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255 or not np.all(arr == np.round(arr))):
            raise ValueError("PNG output requires integer samples in [0, 255]")
        arr = arr.astype(np.uint8)
    PILImage.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(path)


def _interp_axis(arr, coords, axis):
    """Linear interpolation of ``arr`` along ``axis`` at real ``coords``, clamped."""
    n = arr.shape[axis]
    coords = np.clip(coords, 0.0, n - 1)
    i0 = np.floor(coords).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    t = coords - i0
    shape = [1] * arr.ndim
    shape[axis] = len(coords)
    t = t.reshape(shape)
    a0 = np.take(arr, i0, axis=axis)
    a1 = np.take(arr, i1, axis=axis)
    return a0 + t * (a1 - a0)


def resample_bilinear(img, ys, xs):
    """Sample ``img`` bilinearly on the separable grid ``ys`` x ``xs``.

    Coordinates are in source pixel units (pixel centers at integers);
    samples outside the image are clamped to the border.
    """
    arr = np.asarray(img, dtype=np.float64)
    out = _interp_axis(arr, np.asarray(ys, dtype=np.float64), 0)
    return _interp_axis(out, np.asarray(xs, dtype=np.float64), 1)


def downsample_half(img):
    """Bilinear resample to ``floor(H/2) x floor(W/2)``.

    Output pixel ``i`` samples the source at ``(i + 0.5) * H / H_out - 0.5``,
    i.e. the pixel-center correspondence; for even sizes this is the mean of
    each 2x2 block.
    """
    arr = np.asarray(img)
    h, w = arr.shape[:2]
    if h < 2 or w < 2:
        raise ValueError(f"cannot halve a {h}x{w} image")
    ho, wo = h // 2, w // 2
    ys = (np.arange(ho) + 0.5) * (h / ho) - 0.5
    xs = (np.arange(wo) + 0.5) * (w / wo) - 0.5
    return resample_bilinear(arr, ys, xs)


def upsample_bilinear(img, target_w, target_h):
    """Corner-aligned bilinear upsampling to ``target_h x target_w``."""
    arr = np.asarray(img)
    h, w = arr.shape[:2]
    if target_w < w or target_h < h:
        raise ValueError(f"target {target_w}x{target_h} smaller than source {w}x{h}")
    ys = np.arange(target_h) * ((h - 1) / (target_h - 1)) if target_h > 1 else np.zeros(1)
    xs = np.arange(target_w) * ((w - 1) / (target_w - 1)) if target_w > 1 else np.zeros(1)
    return resample_bilinear(arr, ys, xs)
