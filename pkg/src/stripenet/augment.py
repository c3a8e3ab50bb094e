"""Random-shifting augmentation: crop, resize, and shift with constant fill.

Images are (H, W, 3) arrays, either floating point on [0, 1] or uint8.
A sampled :class:`ShiftTransform` crops a random box, resizes it by random
per-axis rates (bounded so the patch still fits), and places it at a random
location on a constant-fill canvas of the original size. All sampling is
driven by an explicit numpy Generator; batch processing derives one stream
per image from (seed, index) so results do not depend on scheduling.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "RSAParams",
    "ShiftTransform",
    "sample_shift",
    "apply_shift",
    "random_shift_augment",
    "horizontal_flip",
    "flip_columns",
    "bilinear_resize",
    "image_rng",
    "default_fill",
    "read_ppm",
    "write_ppm",
]


@dataclass(frozen=True)
class RSAParams:
    """Sampling parameters; defaults follow the usual person re-ID setting."""

    p: float = 1.0          # probability of applying the pipeline at all
    p_c: float = 0.5        # probability of cropping (vs. keeping the full image)
    r_c_min: float = 0.7    # crop-ratio lower bound, U(r_c_min, 1.0) per axis
    r_h_min: float = 0.5    # height resize-rate lower bound, U(r_h_min, 1/r_c)
    r_w_min: float = 0.5    # width resize-rate lower bound, U(r_w_min, 1.0)

    def __post_init__(self):
        for name in ("p", "p_c"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("r_c_min", "r_h_min", "r_w_min"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")


@dataclass(frozen=True)
class ShiftTransform:
    """A concrete crop/resize/shift triple, with the ratios that produced it."""

    crop: tuple[int, int, int, int]      # top, left, crop-height, crop-width
    resize: tuple[int, int]              # target height, width in pixels
    offset: tuple[int, int]              # top-left placement on the canvas
    cropped: bool = True
    r_c: float = 1.0                     # sampled height crop ratio
    r_cw: float = 1.0                    # sampled width crop ratio
    r_h: float = 1.0                     # sampled height resize rate
    r_w: float = 1.0                     # sampled width resize rate

    def validate(self, height: int, width: int) -> None:
        top, left, ch, cw = self.crop
        rh, rw = self.resize
        oy, ox = self.offset
        if not (0 <= top and 0 <= left and ch >= 1 and cw >= 1
                and top + ch <= height and left + cw <= width):
            raise ValueError(f"crop box {self.crop} outside {height}x{width} source")
        if not (1 <= rh and 1 <= rw and 0 <= oy and 0 <= ox
                and oy + rh <= height and ox + rw <= width):
            raise ValueError(
                f"patch {self.resize} at {self.offset} outside {height}x{width} canvas"
            )


def _uniform_clamped(rng: np.random.Generator, lo: float, hi: float, what: str) -> float:
    if lo > hi:
        warnings.warn(f"{what}: empty range [{lo}, {hi}], clamping to {hi}")
        return hi
    return float(rng.uniform(lo, hi))


def sample_shift(
    params: RSAParams, height: int, width: int, rng: np.random.Generator
) -> ShiftTransform | None:
    """Draw one transform; None means pass the image through untouched."""
    if rng.random() >= params.p:
        return None
    cropped = bool(rng.random() < params.p_c)
    if cropped:
        r_c = float(rng.uniform(params.r_c_min, 1.0))
        r_cw = float(rng.uniform(params.r_c_min, 1.0))
    else:
        r_c = r_cw = 1.0
    ch = min(height, max(1, round(r_c * height)))
    cw = min(width, max(1, round(r_cw * width)))
    top = int(rng.integers(0, height - ch + 1))
    left = int(rng.integers(0, width - cw + 1))
    # the resized patch must still fit the canvas: r_h is capped by 1/r_c
    # (resized height <= H) and r_w by 1.0 (never upscale width beyond crop)
    r_h = _uniform_clamped(rng, params.r_h_min, 1.0 / r_c, "resize height rate")
    r_w = _uniform_clamped(rng, params.r_w_min, 1.0, "resize width rate")
    rh_px = min(height, max(1, round(r_h * ch)))
    rw_px = min(width, max(1, round(r_w * cw)))
    oy = int(rng.integers(0, height - rh_px + 1))
    ox = int(rng.integers(0, width - rw_px + 1))
    return ShiftTransform(
        crop=(top, left, ch, cw),
        resize=(rh_px, rw_px),
        offset=(oy, ox),
        cropped=cropped,
        r_c=r_c,
        r_cw=r_cw,
        r_h=r_h,
        r_w=r_w,
    )


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling on an (H, W, C) array.

    Corner-aligned: source coordinate = target index * (H-1)/(out_h-1), with
    a size-1 target sampling the source center. A same-size resize is exact.
    """
    h, w = img.shape[:2]
    src = img.astype(np.float64, copy=False)

    def axis_coords(n_src, n_dst):
        if n_dst == 1:
            return np.array([(n_src - 1) / 2.0])
        return np.arange(n_dst) * (n_src - 1) / (n_dst - 1)

    ys = axis_coords(h, out_h)
    xs = axis_coords(w, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bottom = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    out = top * (1 - wy) + bottom * wy
    if np.issubdtype(img.dtype, np.integer):
        return np.clip(np.rint(out), 0, 255).astype(img.dtype)
    return out.astype(img.dtype)


def default_fill(img: np.ndarray) -> float | int:
    """0.5 for floating-point images, 127 for 8-bit."""
    return 127 if np.issubdtype(img.dtype, np.integer) else 0.5


def apply_shift(img: np.ndarray, t: ShiftTransform | None, fill=None) -> np.ndarray:
    """Render a transform: fill canvas, paste the resized crop at its offset."""
    if img.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {img.shape}")
    if t is None:
        return img.copy()
    h, w = img.shape[:2]
    t.validate(h, w)
    if fill is None:
        fill = default_fill(img)
    top, left, ch, cw = t.crop
    patch = bilinear_resize(img[top : top + ch, left : left + cw], *t.resize)
    out = np.full_like(img, fill)
    oy, ox = t.offset
    out[oy : oy + t.resize[0], ox : ox + t.resize[1]] = patch
    return out


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Per-image stream derived from (seed, index); independent of batch order."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def random_shift_augment(
    img: np.ndarray, params: RSAParams, rng: np.random.Generator, fill=None
) -> np.ndarray:
    return apply_shift(img, sample_shift(params, img.shape[0], img.shape[1], rng), fill)


def flip_columns(img: np.ndarray) -> np.ndarray:
    """Deterministic horizontal mirror of an (H, W, C) image."""
    return img[:, ::-1].copy()


def horizontal_flip(img: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    return flip_columns(img) if rng.random() < p else img.copy()


# ---------------------------------------------------------------------------
# PPM (P6) image files: enough I/O for previews and toy datasets
# ---------------------------------------------------------------------------


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    """Write an (H, W, 3) image as binary PPM; float images are scaled by 255."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3), got {img.shape}")
    if np.issubdtype(img.dtype, np.floating):
        data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    else:
        data = img.astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) uint8 array."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM: magic {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after the header
    payload = raw[pos : pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise ValueError("truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()
