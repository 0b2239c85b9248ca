"""Single-view augmentation pipeline used for both pretraining and fine-tuning.

Images are C×H×W float arrays with values in [0, 1] before normalization.
Every random decision draws from the ``numpy.random.Generator`` passed in, so
a pipeline run is a pure function of (config, image, generator state).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class AugmentConfig:
    resize: int = 32
    jitter_prob: float = 0.3
    distortion: float = 0.2
    affine_prob: float = 0.3
    affine_degrees: float = 10.0
    hflip_prob: float = 0.3
    vflip_prob: float = 0.3
    solarize_enabled: bool = False
    blur_enabled: bool = False
    solarize_threshold: float = 0.5
    blur_sigma: tuple = (0.1, 1.0)
    # "alternative": one coin per stage, then jitter or the geometric op.
    # "sequence": one coin per stage, then jitter followed by the geometric op.
    jitter_mode: str = "alternative"
    norm_mean: tuple = field(default=IMAGENET_MEAN)
    norm_std: tuple = field(default=IMAGENET_STD)

    def __post_init__(self):
        for name in ("jitter_prob", "distortion", "affine_prob", "hflip_prob", "vflip_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.jitter_mode not in ("alternative", "sequence"):
            raise ValueError(f"jitter_mode must be 'alternative' or 'sequence', got {self.jitter_mode!r}")
        self.norm_mean = tuple(float(v) for v in self.norm_mean)
        self.norm_std = tuple(float(v) for v in self.norm_std)
        self.blur_sigma = tuple(float(v) for v in self.blur_sigma)

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k in ("norm_mean", "norm_std", "blur_sigma"):
            d[k] = list(d[k])
        return d


AUGMENTATION_SETS = {
    "default": {},
    "solarize": {"solarize_enabled": True},
    "blur": {"blur_enabled": True},
    "blur+solarize": {"solarize_enabled": True, "blur_enabled": True},
    "none": {"jitter_prob": 0.0, "affine_prob": 0.0, "hflip_prob": 0.0, "vflip_prob": 0.0},
}


def augmentation_set(name, base: AugmentConfig | None = None) -> AugmentConfig:
    """Named variant of ``base`` (the B.3-style augmentation ablation axis)."""
    if name not in AUGMENTATION_SETS:
        raise KeyError(f"unknown augmentation set {name!r}; expected one of {sorted(AUGMENTATION_SETS)}")
    return dataclasses.replace(base or AugmentConfig(), **AUGMENTATION_SETS[name])


# ---------------------------------------------------------------------------
# geometric primitives
# ---------------------------------------------------------------------------


def resize_bilinear(image, size):
    """Bilinear resize with half-pixel centers (no antialiasing)."""
    c, h, w = image.shape
    if h == size and w == size:
        return image.copy()
    ys = (np.arange(size) + 0.5) * (h / size) - 0.5
    xs = (np.arange(size) + 0.5) * (w / size) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bottom = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(image.dtype)


def warp(image, inverse):
    """Sample ``image`` at ``inverse @ (x, y, 1)`` for every output pixel; zero outside."""
    c, h, w = image.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), np.ones(h * w)])
    src = inverse @ pts
    sx = src[0] / src[2]
    sy = src[1] / src[2]
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    out = np.zeros((c, h * w), dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            weight = (1 - np.abs(sx - xi)) * (1 - np.abs(sy - yi))
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.zeros((c, h * w))
            vals[:, valid] = image[:, yi[valid], xi[valid]]
            out += vals * weight
    return out.reshape(c, h, w).astype(image.dtype)


def _rotation_inverse(h, w, degrees):
    theta = math.radians(degrees)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    cos, sin = math.cos(theta), math.sin(theta)
    # output -> input is the inverse rotation about the center
    rot = np.array([[cos, sin, 0.0], [-sin, cos, 0.0], [0.0, 0.0, 1.0]])
    to_center = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    back = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    return back @ rot @ to_center


def random_affine(image, rng, degrees):
    """Rotation by a uniform angle in [-degrees, degrees] about the image center."""
    angle = rng.uniform(-degrees, degrees)
    _, h, w = image.shape
    return warp(image, _rotation_inverse(h, w, angle))


def _homography(src, dst):
    """3×3 matrix mapping each ``src`` point to the matching ``dst`` point."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    coeffs = np.linalg.solve(np.array(rows, dtype=np.float64), np.array(rhs, dtype=np.float64))
    return np.append(coeffs, 1.0).reshape(3, 3)


def random_perspective(image, rng, distortion):
    """Move each corner inward by up to ``distortion`` of the half extent."""
    _, h, w = image.shape
    half_w, half_h = w // 2, h // 2
    dw, dh = int(distortion * half_w) + 1, int(distortion * half_h) + 1
    start = [(0, 0), (w - 1, 0), (w - 1, h - 1), (0, h - 1)]
    end = [
        (rng.integers(0, dw), rng.integers(0, dh)),
        (w - 1 - rng.integers(0, dw), rng.integers(0, dh)),
        (w - 1 - rng.integers(0, dw), h - 1 - rng.integers(0, dh)),
        (rng.integers(0, dw), h - 1 - rng.integers(0, dh)),
    ]
    return warp(image, _homography(end, start))


def hflip(image):
    return image[:, :, ::-1].copy()


def vflip(image):
    return image[:, ::-1, :].copy()


# ---------------------------------------------------------------------------
# photometric primitives
# ---------------------------------------------------------------------------


def _grayscale(image):
    if image.shape[0] != 3:
        return image.mean(axis=0)
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]


def _rgb_to_hsv(rgb):
    r, g, b = rgb
    maxc = rgb.max(axis=0)
    minc = rgb.min(axis=0)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0)
    safe = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def _hsv_to_rgb(hsv):
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def color_jitter(image, rng, strength):
    """Brightness, contrast, saturation and hue perturbations in random order."""
    ops = rng.permutation(4)
    lo, hi = max(0.0, 1.0 - strength), 1.0 + strength
    out = image.astype(np.float64)
    for op in ops:
        if op == 0:
            out = out * rng.uniform(lo, hi)
        elif op == 1:
            factor = rng.uniform(lo, hi)
            out = factor * out + (1 - factor) * _grayscale(out).mean()
        elif op == 2 and out.shape[0] == 3:
            factor = rng.uniform(lo, hi)
            out = factor * out + (1 - factor) * _grayscale(out)[None]
        elif op == 3 and out.shape[0] == 3:
            shift = rng.uniform(-min(strength, 0.5), min(strength, 0.5))
            hsv = _rgb_to_hsv(np.clip(out, 0, 1))
            hsv[0] = (hsv[0] + shift) % 1.0
            out = _hsv_to_rgb(hsv)
        out = np.clip(out, 0.0, 1.0)
    return out.astype(image.dtype)


def solarize(image, threshold=0.5):
    return np.where(image >= threshold, 1.0 - image, image).astype(image.dtype)


def gaussian_blur(image, sigma):
    """3×3 separable Gaussian blur with reflect padding."""
    taps = np.exp(-np.array([1.0, 0.0, 1.0]) / (2 * sigma**2))
    taps /= taps.sum()
    padded = np.pad(image, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    rows = taps[0] * padded[:, :-2] + taps[1] * padded[:, 1:-1] + taps[2] * padded[:, 2:]
    out = taps[0] * rows[:, :, :-2] + taps[1] * rows[:, :, 1:-1] + taps[2] * rows[:, :, 2:]
    return out.astype(image.dtype)


def normalize(image, mean, std):
    if len(mean) != image.shape[0] or len(std) != image.shape[0]:
        raise ValueError(
            f"normalization constants have {len(mean)} channels but the image has {image.shape[0]}"
        )
    m = np.asarray(mean, dtype=image.dtype)[:, None, None]
    s = np.asarray(std, dtype=image.dtype)[:, None, None]
    return (image - m) / s


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def _jitter_or(image, cfg, rng, prob, geometric):
    if rng.random() >= prob:
        return image
    if cfg.jitter_mode == "sequence":
        return geometric(color_jitter(image, rng, cfg.distortion))
    if rng.random() < 0.5:
        return color_jitter(image, rng, cfg.distortion)
    return geometric(image)


def apply_pipeline(cfg: AugmentConfig, image, rng):
    """One augmented, normalized view of ``image`` (C×H×W in [0, 1])."""
    if len(cfg.norm_mean) != image.shape[0]:
        raise ValueError(
            f"normalization constants have {len(cfg.norm_mean)} channels but the image has {image.shape[0]}"
        )
    out = resize_bilinear(image, cfg.resize)
    out = _jitter_or(out, cfg, rng, cfg.jitter_prob, lambda im: random_perspective(im, rng, cfg.distortion))
    out = _jitter_or(out, cfg, rng, cfg.affine_prob, lambda im: random_affine(im, rng, cfg.affine_degrees))
    if rng.random() < cfg.hflip_prob:
        out = hflip(out)
    if rng.random() < cfg.vflip_prob:
        out = vflip(out)
    if cfg.solarize_enabled:
        out = solarize(out, cfg.solarize_threshold)
    if cfg.blur_enabled:
        out = gaussian_blur(out, rng.uniform(*cfg.blur_sigma))
    return normalize(out, cfg.norm_mean, cfg.norm_std)


def eval_transform(cfg: AugmentConfig, image):
    """Deterministic resize + normalization used for validation, test and analysis."""
    return normalize(resize_bilinear(image, cfg.resize), cfg.norm_mean, cfg.norm_std)


class Augmenter:
    """Applies the pipeline to batches and counts every per-image call."""

    def __init__(self, cfg: AugmentConfig, seed):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.calls = 0

    def __call__(self, images):
        views = [apply_pipeline(self.cfg, img, self.rng) for img in images]
        self.calls += len(views)
        return np.stack(views)


def eval_batch(cfg: AugmentConfig, images):
    return np.stack([eval_transform(cfg, img) for img in images])
