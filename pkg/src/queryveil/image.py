"""Image type and file I/O.

Images are (height, width, 3) float arrays with values in [0, 1]. The
canonical on-disk artifact for optimized images is 16-bit PNG (lossless
enough that quantization does not disturb descriptors); ordinary 8-bit
PNG/JPEG is supported for dataset images.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image as PILImage

from .errors import InvalidInputError


@dataclass(frozen=True)
class Image:
    """An RGB image in [0,1], the unit of attack and of retrieval."""

    pixels: np.ndarray
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise InvalidInputError(f"expected (H, W, 3) pixels, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise InvalidInputError("image must be at least 1x1")
        if not np.isfinite(px).all():
            raise InvalidInputError("pixels must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise InvalidInputError(
                f"pixels out of [0,1]: min={px.min()}, max={px.max()}"
            )
        px = np.ascontiguousarray(px)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def max_dim(self) -> int:
        return max(self.width, self.height)

    def content_hash(self) -> str:
        return hashlib.sha256(self.pixels.tobytes()).hexdigest()[:16]

    @classmethod
    def from_array(cls, arr, id: str = "") -> "Image":
        """Build an image from an array, clipping tiny numeric excursions."""
        px = np.clip(np.asarray(arr, dtype=np.float32), 0.0, 1.0)
        return cls(px, id=id)


def to_tensor(image: Image, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Image -> (3, H, W) tensor, the layout used on the differentiable path."""
    return torch.from_numpy(np.array(image.pixels)).permute(2, 0, 1).to(dtype)


def from_tensor(t: torch.Tensor, id: str = "") -> Image:
    """(3, H, W) tensor -> Image; values clamped to [0,1]."""
    arr = t.detach().clamp(0.0, 1.0).permute(1, 2, 0).cpu().numpy()
    return Image.from_array(arr, id=id)


# ---------------------------------------------------------------------------
# 16-bit PNG (Pillow cannot write 48-bit RGB, so we encode/decode directly).

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + tag
        + payload
        + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
    )


def write_png16(path, image: Image, text: dict | None = None) -> None:
    """Write a 16-bit-per-channel RGB PNG (colour type 2, filter 0).

    `text` entries become tEXt chunks (e.g. the resolved config hash).
    """
    arr = np.round(np.asarray(image.pixels, dtype=np.float64) * 65535.0)
    arr = arr.astype(">u2")
    h, w, _ = arr.shape
    raw = bytearray()
    for row in range(h):
        raw.append(0)  # per-scanline filter: None
        raw.extend(arr[row].tobytes())
    ihdr = struct.pack(">IIBBBBB", w, h, 16, 2, 0, 0, 0)
    with open(path, "wb") as f:
        f.write(_PNG_SIG)
        f.write(_chunk(b"IHDR", ihdr))
        for key, value in (text or {}).items():
            f.write(_chunk(b"tEXt", key.encode("latin-1") + b"\x00"
                           + str(value).encode("latin-1")))
        f.write(_chunk(b"IDAT", zlib.compress(bytes(raw), level=6)))
        f.write(_chunk(b"IEND", b""))


def read_png16(path, id: str = "") -> Image:
    """Read a 16-bit RGB PNG written by :func:`write_png16`."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(_PNG_SIG):
        raise InvalidInputError(f"{path}: not a PNG file")
    pos = len(_PNG_SIG)
    ihdr = None
    idat = bytearray()
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        tag = data[pos + 4 : pos + 8]
        payload = data[pos + 8 : pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat.extend(payload)
        elif tag == b"IEND":
            break
    if ihdr is None:
        raise InvalidInputError(f"{path}: missing IHDR")
    w, h, depth, colour, _, _, interlace = ihdr
    if depth != 16 or colour != 2 or interlace != 0:
        raise InvalidInputError(
            f"{path}: unsupported PNG layout (need 16-bit RGB non-interlaced)"
        )
    raw = zlib.decompress(bytes(idat))
    stride = 1 + w * 6
    rows = []
    for row in range(h):
        line = raw[row * stride : (row + 1) * stride]
        if line[0] != 0:
            raise InvalidInputError(f"{path}: unexpected scanline filter {line[0]}")
        rows.append(np.frombuffer(line[1:], dtype=">u2").reshape(w, 3))
    arr = np.stack(rows).astype(np.float32) / 65535.0
    return Image(arr, id=id)


def read_png_text(path) -> dict:
    """Collect tEXt chunk key/value pairs from a PNG."""
    with open(path, "rb") as f:
        data = f.read()
    out = {}
    pos = len(_PNG_SIG)
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        tag = data[pos + 4 : pos + 8]
        if tag == b"tEXt":
            payload = data[pos + 8 : pos + 8 + length]
            key, _, value = payload.partition(b"\x00")
            out[key.decode("latin-1")] = value.decode("latin-1")
        if tag == b"IEND":
            break
        pos += 12 + length
    return out


def _png_bit_depth(path) -> int | None:
    try:
        with open(path, "rb") as f:
            head = f.read(26)
        if not head.startswith(_PNG_SIG):
            return None
        return head[24]
    except OSError:
        return None


def load_image(path, id: str | None = None) -> Image:
    """Load PNG/JPEG as RGB in [0,1]; 16-bit PNGs keep full precision."""
    name = str(path)
    img_id = id if id is not None else name
    if _png_bit_depth(path) == 16:
        return read_png16(path, id=img_id)
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return Image(arr, id=img_id)


def save_image_png8(path, image: Image) -> None:
    """8-bit PNG export (lossy for optimized images; see write_png16)."""
    arr = np.round(np.asarray(image.pixels, dtype=np.float64) * 255.0).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")
