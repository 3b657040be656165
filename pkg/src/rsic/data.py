"""Image IO and the procedural toy corpus.

Images are float32 (H, W, 3) in [0, 1] with H, W multiples of 64; loading
enforces this by reflect-padding small images up to 64 and center-cropping
larger ones down to the nearest multiple. The toy corpus provides captioned
images of textured geometric shapes on gradient backgrounds, with per-image
foreground masks, for training and evaluating the desk-scale pipeline.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

MULTIPLE = 64

PALETTE = {
    "red": (0.85, 0.12, 0.12),
    "green": (0.10, 0.65, 0.20),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.92, 0.85, 0.12),
    "magenta": (0.80, 0.15, 0.75),
    "cyan": (0.10, 0.75, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "white": (0.92, 0.92, 0.92),
}
SHAPES = ("circle", "square", "triangle", "cross")


def _fit_axis(n: int) -> tuple[int, int]:
    """Target size and crop offset along one axis."""
    if n < MULTIPLE:
        return MULTIPLE, 0
    target = (n // MULTIPLE) * MULTIPLE
    return target, (n - target) // 2


def fit_to_multiple(arr: np.ndarray) -> np.ndarray:
    """Center-crop to a multiple of 64, reflect-padding axes shorter than 64."""
    h, w = arr.shape[:2]
    th, oy = _fit_axis(h)
    tw, ox = _fit_axis(w)
    if h >= MULTIPLE:
        arr = arr[oy:oy + th]
    if w >= MULTIPLE:
        arr = arr[:, ox:ox + tw]
    pad_h = max(0, MULTIPLE - arr.shape[0])
    pad_w = max(0, MULTIPLE - arr.shape[1])
    if pad_h or pad_w:
        pads = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (arr.ndim - 2)
        arr = np.pad(arr, pads, mode="reflect")
    return arr


def load_image(path) -> np.ndarray:
    """Load an RGB image as float32 in [0, 1], fitted to 64-multiples."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(fit_to_multiple(arr))


def load_gray(path) -> np.ndarray:
    """Load a grayscale image as float32 in [0, 1], fitted to 64-multiples."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(fit_to_multiple(arr))


def save_image(path, img: np.ndarray) -> None:
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((img * 255.0 + 0.5).astype(np.uint8)).save(path)


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)).save(path)


def validate_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {x.shape}")
    if x.shape[0] % MULTIPLE or x.shape[1] % MULTIPLE:
        raise ValueError(f"image dims {x.shape[:2]} not multiples of {MULTIPLE}")
    if not np.isfinite(x).all():
        raise ValueError("image contains non-finite values")
    return x


def _shape_mask(shape: str, size: int, cy: float, cx: float, radius: float,
                rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy ** 2 + dx ** 2 <= radius ** 2
    if shape == "square":
        ang = rng.uniform(0, np.pi / 2)
        ry = dy * np.cos(ang) - dx * np.sin(ang)
        rx = dy * np.sin(ang) + dx * np.cos(ang)
        return (np.abs(ry) <= radius * 0.9) & (np.abs(rx) <= radius * 0.9)
    if shape == "triangle":
        # Upright triangle inscribed in the radius.
        inside = dy <= radius * 0.8
        inside &= dy >= -radius * 0.8 + 1.6 * radius * 0.8 * (np.abs(dx) / (radius * 0.95))
        return inside & (np.abs(dx) <= radius * 0.95)
    if shape == "cross":
        arm = radius * 0.45
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | \
               ((np.abs(dx) <= arm) & (np.abs(dy) <= radius))
    raise ValueError(f"unknown shape {shape!r}")


def make_example(seed: int, size: int = 128) -> tuple[np.ndarray, str, np.ndarray]:
    """One toy example: (image, caption, foreground mask)."""
    rng = np.random.default_rng(seed)
    names = list(PALETTE)
    bg_name = names[rng.integers(len(names))]
    fg_name = names[rng.integers(len(names))]
    while fg_name == bg_name:
        fg_name = names[rng.integers(len(names))]
    bg = np.array(PALETTE[bg_name])
    fg = np.array(PALETTE[fg_name])

    # Background: directional gradient plus smooth low-frequency noise.
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    direction = rng.uniform(0, 2 * np.pi)
    ramp = (yy * np.sin(direction) + xx * np.cos(direction) + 1.5) / 3.0
    img = bg[None, None, :] * (0.55 + 0.45 * ramp[:, :, None])
    coarse = rng.normal(0, 0.035, (size // 16, size // 16, 3))
    reps = size // coarse.shape[0]
    noise = np.kron(coarse, np.ones((reps, reps, 1)))
    img = img + noise

    # Foreground: one textured shape, 8-25% of the frame.
    shape = SHAPES[rng.integers(len(SHAPES))]
    frac = rng.uniform(0.08, 0.25)
    radius = size * np.sqrt(frac / np.pi) * {"circle": 1.0, "square": 1.05,
                                             "triangle": 1.35, "cross": 1.25}[shape]
    margin = radius + 2
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    mask = _shape_mask(shape, size, cy, cx, radius, rng)

    # Stripe periods of 15-25 px survive the 8x latent downsampling.
    freq = rng.uniform(0.04, 0.065)
    phase = rng.uniform(0, 2 * np.pi)
    tang = rng.uniform(0, np.pi)
    stripes = np.sin(2 * np.pi * freq * ((yy * size) * np.sin(tang)
                                         + (xx * size) * np.cos(tang)) + phase)
    tex = fg[None, None, :] * (1.0 + 0.25 * stripes[:, :, None])
    img = np.where(mask[:, :, None], tex, img)

    caption = f"a {fg_name} {shape} on a {bg_name} background"
    return np.clip(img, 0.0, 1.0).astype(np.float32), caption, mask


def generate_dataset(out_dir, n_train: int, n_test: int, seed: int = 0,
                     size: int = 128) -> None:
    """Write train/ and test/ splits of the toy corpus to ``out_dir``."""
    out_dir = Path(out_dir)
    for split, count, base in (("train", n_train, 0), ("test", n_test, 10 ** 7)):
        d = out_dir / split
        d.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            img, caption, mask = make_example(seed * 10 ** 9 + base + i, size)
            stem = d / f"img_{i:05d}"
            save_image(stem.with_suffix(".png"), img)
            stem.with_suffix(".txt").write_text(caption + "\n")
            save_mask(Path(str(stem) + "_mask.png"), mask)


def list_examples(directory) -> list[Path]:
    """Image paths in a corpus directory, sorted, masks excluded."""
    directory = Path(directory)
    return sorted(p for p in directory.glob("*.png") if not p.stem.endswith("_mask"))


def load_example(image_path) -> tuple[np.ndarray, str, np.ndarray | None]:
    """Load (image, caption, mask); caption defaults to "", mask to None."""
    image_path = Path(image_path)
    img = load_image(image_path)
    txt = image_path.with_suffix(".txt")
    caption = txt.read_text().strip() if txt.exists() else ""
    mask_path = image_path.with_name(image_path.stem + "_mask.png")
    mask = load_gray(mask_path) > 0.5 if mask_path.exists() else None
    return img, caption, mask


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight (x, y, w, h) bounding box of a binary mask."""
    ys, xs = np.nonzero(np.asarray(mask, bool))
    if len(ys) == 0:
        raise ValueError("empty mask")
    return int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)
