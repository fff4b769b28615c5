"""Synthetic multi-scale scenes, augmentation, and zero-dependency PPM/PGM IO.

Scenes are stacks of axis-aligned rectangles, circles, and triangles on a
dark background. Each foreground class has a fixed fill color (plus small
per-shape jitter and per-pixel noise), later shapes occlude earlier ones,
and everything is a pure function of (spec, index). Images are quantized
to the 8-bit grid at generation time so the on-disk round trip is exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, PairingError
from .ops import resize_bilinear_array, resize_nearest_labels

IGNORE_INDEX = 255

# class-correlated fill colors; index 0 is the background
_PALETTE = np.array([
    (0.13, 0.13, 0.15),
    (0.85, 0.25, 0.22),
    (0.25, 0.75, 0.30),
    (0.25, 0.40, 0.90),
    (0.92, 0.80, 0.25),
    (0.75, 0.30, 0.85),
    (0.25, 0.85, 0.85),
    (0.95, 0.55, 0.20),
], dtype=np.float32)

_NOISE_SIGMA = 0.02
_SHAPE_JITTER = 0.05


@dataclass
class SceneSpec:
    """Parameters of the synthetic scene generator."""

    canvas: int = 64
    classes: int = 4
    shapes: int = 5
    min_size: int = 6
    max_size: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes (background + 1), got {self.classes}")
        if self.classes - 1 > IGNORE_INDEX - 1:
            raise ConfigError("class count collides with the ignore index")
        if self.canvas < 8:
            raise ConfigError("canvas must be at least 8 px")
        if self.min_size < 1 or self.max_size > self.canvas:
            raise ConfigError("shape sizes must fit the canvas")
        if self.max_size < 4 * self.min_size:
            raise ConfigError("size range must span at least 4x so that "
                              "multi-scale context matters")


def _palette(classes: int) -> np.ndarray:
    reps = int(np.ceil((classes - 1) / (len(_PALETTE) - 1)))
    fg = np.concatenate([_PALETTE[1:]] * reps)[: classes - 1]
    return np.concatenate([_PALETTE[:1], fg])


def _triangle_mask(yy, xx, x0, y0, size, apex_shift):
    """Upright triangle inside the size x size box anchored at (x0, y0)."""
    ax, ay = x0 + (0.5 + apex_shift) * (size - 1), y0
    bx, by = x0, y0 + size - 1
    cx, cy = x0 + size - 1, y0 + size - 1

    def side(px, py, qx, qy):
        return (qx - px) * (yy - py) - (qy - py) * (xx - px)

    d1, d2, d3 = side(ax, ay, bx, by), side(bx, by, cx, cy), side(cx, cy, ax, ay)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def generate_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """One (image, label) pair, fully determined by (spec.seed, index).

    Returns a float32 (3, H, W) image with values on the 8-bit grid in
    [0, 1] and a uint8 (H, W) label map with background class 0.
    """
    if spec.shapes < 1:
        raise ConfigError("a scene needs at least one shape")
    rng = np.random.default_rng([spec.seed, index])
    size = spec.canvas
    palette = _palette(spec.classes)
    label = np.zeros((size, size), dtype=np.uint8)
    image = np.empty((size, size, 3), dtype=np.float32)
    image[:] = palette[0]

    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(spec.shapes):
        cls = int(rng.integers(1, spec.classes))
        kind = int(rng.integers(0, 3))
        s = int(rng.integers(spec.min_size, spec.max_size + 1))
        cy = int(rng.integers(0, size))
        cx = int(rng.integers(0, size))
        y0, x0 = cy - s // 2, cx - s // 2
        if kind == 0:  # rectangle, independently drawn height
            s2 = int(rng.integers(spec.min_size, spec.max_size + 1))
            mask = (yy >= cy - s2 // 2) & (yy < cy - s2 // 2 + s2) & \
                   (xx >= x0) & (xx < x0 + s)
        elif kind == 1:  # circle of diameter s
            r = s / 2.0
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:  # triangle with jittered apex
            apex = float(rng.uniform(-0.3, 0.3))
            mask = _triangle_mask(yy, xx, x0, y0, s, apex) & \
                   (yy >= y0) & (yy < y0 + s) & (xx >= x0) & (xx < x0 + s)
        jitter = rng.uniform(-_SHAPE_JITTER, _SHAPE_JITTER, size=3).astype(np.float32)
        image[mask] = palette[cls] + jitter
        label[mask] = cls

    image += rng.normal(0.0, _NOISE_SIGMA, size=image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0)
    image = np.round(image * 255.0) / np.float32(255.0)
    return image.transpose(2, 0, 1).astype(np.float32), label


def hflip_pair(image: np.ndarray, label: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return image[:, :, ::-1].copy(), label[:, ::-1].copy()


def augment(image: np.ndarray, label: np.ndarray, crop: int,
            scale_lo: float, scale_hi: float,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random horizontal flip, uniform rescale, and fixed-size crop.

    The image is resized bilinearly, the label by nearest neighbor. When
    the scaled result is smaller than the crop, the border is padded with
    image value 0 and the ignore label.
    """
    if scale_lo > scale_hi:
        raise ConfigError("scale_lo must not exceed scale_hi")
    if crop < 1:
        raise ConfigError("crop must be positive")
    if rng.random() < 0.5:
        image, label = hflip_pair(image, label)
    s = rng.uniform(scale_lo, scale_hi)
    h, w = label.shape
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    if (nh, nw) != (h, w):
        image = resize_bilinear_array(image, nh, nw)
        label = resize_nearest_labels(label, nh, nw)

    out_img = np.zeros((3, crop, crop), dtype=np.float32)
    out_lbl = np.full((crop, crop), IGNORE_INDEX, dtype=label.dtype)
    src = []
    dst = []
    for n in (nh, nw):
        if n >= crop:
            off = int(rng.integers(0, n - crop + 1))
            src.append((off, off + crop))
            dst.append((0, crop))
        else:
            off = int(rng.integers(0, crop - n + 1))
            src.append((0, n))
            dst.append((off, off + n))
    (sy, ey), (sx, ex) = src
    (dy, dyy), (dx, dxx) = dst
    out_img[:, dy:dyy, dx:dxx] = image[:, sy:ey, sx:ex]
    out_lbl[dy:dyy, dx:dxx] = label[sy:ey, sx:ex]
    return out_img, out_lbl


# ---------------------------------------------------------------------------
# PPM (P6) / PGM (P5) readers and writers


def _read_pnm(path: str, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(magic):
        raise FormatError(f"{path}: expected {magic.decode()} header")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise FormatError(f"{path}: malformed header token {token!r}")
        fields.append(int(token))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    payload = data[pos:]
    if len(payload) != expected:
        raise FormatError(f"{path}: expected {expected} pixel bytes, "
                          f"found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return arr[:, :, 0] if channels == 1 else arr


def _write_pnm(path: str, magic: bytes, arr: np.ndarray) -> None:
    height, width = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n" + f"{width} {height}".encode() + b"\n255\n")
        fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def image_path(root: str, index: int) -> str:
    return os.path.join(root, "images", f"{index:06d}.ppm")


def label_path(root: str, index: int) -> str:
    return os.path.join(root, "labels", f"{index:06d}.pgm")


def save_pair(root: str, index: int, image: np.ndarray, label: np.ndarray) -> None:
    """Store image as binary PPM and label as binary PGM."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    img8 = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    _write_pnm(image_path(root, index), b"P6", img8.transpose(1, 2, 0))
    _write_pnm(label_path(root, index), b"P5", label.astype(np.uint8))


def load_pair(root: str, index: int) -> tuple[np.ndarray, np.ndarray]:
    img = _read_pnm(image_path(root, index), b"P6")
    lbl = _read_pnm(label_path(root, index), b"P5")
    if img.shape[:2] != lbl.shape:
        raise PairingError(f"pair {index}: image {img.shape[:2]} vs label {lbl.shape}")
    image = (img.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1)
    return image, lbl


def write_manifest(root: str, count: int, classes: int, size: int, seed: int) -> None:
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        fh.write(f"count={count} classes={classes} size={size} seed={seed}\n")


def read_manifest(root: str) -> dict[str, int]:
    path = os.path.join(root, "manifest.txt")
    if not os.path.exists(path):
        raise FormatError(f"no manifest at {path}")
    values: dict[str, int] = {}
    with open(path) as fh:
        for line in fh:
            for token in line.split():
                if "=" not in token:
                    raise FormatError(f"malformed manifest token {token!r}")
                key, _, raw = token.partition("=")
                try:
                    values[key] = int(raw)
                except ValueError as exc:
                    raise FormatError(f"manifest value for {key!r} is not an integer") from exc
    for key in ("count", "classes", "size", "seed"):
        if key not in values:
            raise FormatError(f"manifest missing '{key}'")
    return values


def write_dataset(root: str, spec: SceneSpec, count: int) -> None:
    """Generate `count` scenes and store them with a manifest."""
    if count < 1:
        raise ConfigError("dataset needs at least one scene")
    for i in range(count):
        image, label = generate_scene(spec, i)
        save_pair(root, i, image, label)
    write_manifest(root, count, spec.classes, spec.canvas, spec.seed)


class SceneDataset:
    """On-disk dataset with an in-memory cache of decoded pairs."""

    def __init__(self, root: str):
        self.root = root
        info = read_manifest(root)
        self.count = info["count"]
        self.classes = info["classes"]
        self.size = info["size"]
        self.seed = info["seed"]
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return self.count

    def pair(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        if index not in self._cache:
            self._cache[index] = load_pair(self.root, index)
        return self._cache[index]

    def split(self, val_count: int) -> tuple[list[int], list[int]]:
        """Deterministic split by index: the last `val_count` samples are
        held out for validation."""
        if not 0 < val_count < self.count:
            raise ConfigError(f"validation count {val_count} must be in "
                              f"(0, {self.count})")
        cut = self.count - val_count
        return list(range(cut)), list(range(cut, self.count))
