"""Image and corpus handling: PNG I/O, HR/LR pairing, synthetic corpora.

PNGs are restricted to what the pipeline can represent exactly:
non-interlaced 8-bit RGB or grayscale (grayscale is replicated to three
channels). Pixel values map to [0, 1] as i/255 so a tensor -> PNG ->
tensor round trip is exact on the 8-bit grid. LR images are never loaded
from disk: they are always derived from HR by bicubic downsampling, so
the degradation model and the LR-consistency metric agree by
construction.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .resample import bicubic_resize
from .rng import Rng
from .tensor import ShapeError, Tensor


class ImageFormatError(ValueError):
    """The file is not a PNG this pipeline accepts."""


def _read_ihdr(path: Path) -> tuple[int, int, int]:
    """Return (bit_depth, color_type, interlace) from the PNG header."""
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != b"\x89PNG\r\n\x1a\n":
        raise ImageFormatError(f"{path}: not a PNG file")
    length, ctype = struct.unpack(">I4s", head[8:16])
    if ctype != b"IHDR" or length != 13:
        raise ImageFormatError(f"{path}: malformed PNG header")
    _w, _h, bit_depth, color_type, _comp, _filt, interlace = struct.unpack(
        ">IIBBBBB", head[16:29])
    return bit_depth, color_type, interlace


def load_png(path) -> Tensor:
    """Load an 8-bit RGB or grayscale PNG as a (1, 3, H, W) tensor in [0, 1]."""
    path = Path(path)
    bit_depth, color_type, interlace = _read_ihdr(path)
    if interlace != 0:
        raise ImageFormatError(f"{path}: interlaced PNGs are not supported")
    if bit_depth != 8:
        raise ImageFormatError(f"{path}: bit depth {bit_depth} unsupported (8-bit only)")
    if color_type not in (0, 2):
        kind = {3: "palette", 4: "gray+alpha", 6: "RGBA"}.get(color_type, str(color_type))
        raise ImageFormatError(f"{path}: color type {kind} unsupported (RGB or grayscale only)")
    try:
        with Image.open(path) as img:
            arr = np.asarray(img, dtype=np.uint8)
    except (OSError, SyntaxError, zlib.error) as exc:
        raise ImageFormatError(f"{path}: failed to decode PNG ({exc})") from exc
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    data = arr.astype(np.float64).transpose(2, 0, 1)[None] / 255.0
    return Tensor(data)


def save_png(path, image: Tensor) -> None:
    """Write a (1, 3, H, W) tensor in [0, 1] as an 8-bit RGB PNG.

    Values are clipped and rounded to the 1/255 grid.
    """
    if image.shape[0] != 1 or image.shape[1] != 3:
        raise ShapeError(f"save_png expects shape (1, 3, H, W), got {image.shape}")
    arr = np.clip(np.round(image.data[0] * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def quantize(image: Tensor) -> Tensor:
    """Snap values to the 8-bit i/255 grid (what a PNG round trip would do)."""
    return Tensor(np.clip(np.round(image.data * 255.0), 0, 255) / 255.0)


# ---------------------------------------------------------------------------
# records, pairing, manifests
# ---------------------------------------------------------------------------

@dataclass
class ImageRecord:
    """One corpus entry: id, optional source path, HR tensor in [0, 1]."""

    id: str
    hr: Tensor
    hr_path: str | None = None

    def pair(self, scale: int, levels: int = 0) -> tuple[Tensor, Tensor]:
        return make_pair(self.hr, scale, levels)


def make_pair(hr: Tensor, scale: int, levels: int = 0) -> tuple[Tensor, Tensor]:
    """Center-crop HR to divisibility and derive LR by bicubic downsampling.

    ``levels`` adds the flow's 2^levels squeeze factor to the
    divisibility requirement (pass 0 for plain pairing).
    """
    if scale not in (2, 4, 8):
        raise ValueError(f"scale must be 2, 4 or 8, got {scale}")
    div = scale * 2**levels
    n, c, h, w = hr.shape
    ch, cw = (h // div) * div, (w // div) * div
    if ch < div or cw < div:
        raise ShapeError(f"image {h}x{w} too small for scale {scale} with {levels} levels")
    top, left = (h - ch) // 2, (w - cw) // 2
    cropped = Tensor(hr.data[:, :, top:top + ch, left:left + cw])
    lr = bicubic_resize(cropped, 1.0 / scale)
    return cropped, lr


def write_manifest(path, records: list[ImageRecord]) -> None:
    lines = [f"{rec.id}\t{rec.hr_path}" for rec in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[ImageRecord]:
    """Load `id<TAB>hr_path` lines; paths are resolved against the manifest."""
    path = Path(path)
    records = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{ln}: expected 'id<TAB>hr_path', got {line!r}")
        rid, hr_path = parts
        full = Path(hr_path)
        if not full.is_absolute():
            full = path.parent / full
        records.append(ImageRecord(id=rid, hr=load_png(full), hr_path=str(full)))
    if not records:
        raise ValueError(f"{path}: manifest lists no images")
    return records


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticCorpusSpec:
    n_images: int = 16
    size: int = 64
    seed: int = 0


def _gradient_field(rng: Rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.empty((3, size, size))
    for ch in range(3):
        ang = rng.uniform() * 2 * np.pi
        lo, hi = rng.uniform() * 0.4, 0.6 + rng.uniform() * 0.4
        t = (np.cos(ang) * xx + np.sin(ang) * yy + 1.0) / 2.0
        img[ch] = lo + (hi - lo) * t
    return img


def _blobs(rng: Rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((3, size, size), 0.25 + 0.5 * rng.uniform())
    for _ in range(6):
        cy, cx = rng.uniform() * size, rng.uniform() * size
        rad = size * (0.05 + 0.15 * rng.uniform())
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad * rad))
        color = rng.uniform((3,)) - 0.5
        img += color[:, None, None] * bump
    return img


def _stripes(rng: Rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ang = rng.uniform() * np.pi
    freq = 2.0 + rng.uniform() * 6.0
    phase = rng.uniform() * 2 * np.pi
    wave = np.sin(2 * np.pi * freq * (np.cos(ang) * xx + np.sin(ang) * yy) / size + phase)
    base = rng.uniform((3,)) * 0.5 + 0.25
    amp = 0.15 + 0.25 * rng.uniform()
    return base[:, None, None] + amp * wave[None]


def _checker(rng: Rng, size: int) -> np.ndarray:
    cell = max(2, int(2 + rng.uniform() * size / 4))
    yy, xx = np.mgrid[0:size, 0:size]
    mask = ((yy // cell + xx // cell) % 2).astype(np.float64)
    c0 = rng.uniform((3,)) * 0.4 + 0.1
    c1 = rng.uniform((3,)) * 0.4 + 0.5
    return c0[:, None, None] * (1 - mask) + c1[:, None, None] * mask


_PATTERNS = (_gradient_field, _blobs, _stripes, _checker)


def synth_corpus(spec: SyntheticCorpusSpec) -> list[ImageRecord]:
    """Deterministic textured images with real high-frequency content.

    Each image blends a smooth pattern with a stripe or checker texture
    so super-resolution has structure to recover; values are quantized
    to the 8-bit grid like a decoded PNG would be.
    """
    base = Rng(spec.seed).child("synth-corpus")
    records = []
    for i in range(spec.n_images):
        rng = base.child(i)
        a = _PATTERNS[i % len(_PATTERNS)](rng, spec.size)
        b = _PATTERNS[int(rng.uniform() * 2) + 2](rng, spec.size)  # stripes or checker
        mix = 0.35 + 0.3 * rng.uniform()
        img = np.clip((1 - mix) * a + mix * b, 0.0, 1.0)
        tensor = quantize(Tensor(img[None]))
        records.append(ImageRecord(id=f"synth{i:03d}", hr=tensor))
    return records
