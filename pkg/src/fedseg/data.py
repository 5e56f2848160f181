"""Synthetic multi-center 2D segmentation data and preprocessing.

Each center draws random ellipses (binary masks) on a noisy background;
the spec fixes the RNG, so regenerating a center is bit-reproducible.
Preprocessing resamples to a plan's target spacing (bilinear for images,
nearest for masks) and center-crops or zero-pads to the patch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .fingerprint import TrainingPlan

# Ellipse geometry relative to image size; chosen so every mask's
# foreground fraction stays within [0.05, 0.5] and the whole ellipse fits
# the central region a budget-shrunk patch can see.
_AXIS_FRAC = (0.15, 0.22)
_OFFSET_FRAC = 0.08


@dataclass
class SyntheticCenterSpec:
    center_id: int
    image_size: list          # [H, W]
    spacing: list             # [sy, sx]
    intensity_bias: float
    noise_std: float
    num_cases: int
    seed: int

    def validate(self):
        if any(int(v) < 32 for v in self.image_size):
            raise ConfigError(f"image_size entries must be >= 32: "
                              f"{self.image_size}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if self.num_cases < 1:
            raise ConfigError("num_cases must be positive")
        return self

    def to_dict(self):
        return {
            "center_id": int(self.center_id),
            "image_size": [int(v) for v in self.image_size],
            "spacing": [float(v) for v in self.spacing],
            "intensity_bias": float(self.intensity_bias),
            "noise_std": float(self.noise_std),
            "num_cases": int(self.num_cases),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(center_id=int(d["center_id"]),
                   image_size=[int(v) for v in d["image_size"]],
                   spacing=[float(v) for v in d["spacing"]],
                   intensity_bias=float(d["intensity_bias"]),
                   noise_std=float(d["noise_std"]),
                   num_cases=int(d["num_cases"]),
                   seed=int(d["seed"])).validate()


def _ellipse_mask(h, w, cy, cx, ay, ax, theta):
    ys, xs = np.mgrid[0:h, 0:w]
    dy = ys - cy
    dx = xs - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = dy * ct + dx * st
    v = -dy * st + dx * ct
    return ((u / ay) ** 2 + (v / ax) ** 2 <= 1.0).astype(np.uint8)


def gen_center(spec: SyntheticCenterSpec):
    """Generate the center's cases as (image, mask, spacing) tuples."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w = spec.image_size
    # Geometric mean keeps the foreground fraction within [0.05, 0.5]
    # regardless of aspect ratio (pi * 0.15^2 .. pi * 0.22^2 of the area).
    size = float(np.sqrt(h * w))
    cases = []
    for _ in range(spec.num_cases):
        cy = h / 2 + rng.uniform(-_OFFSET_FRAC, _OFFSET_FRAC) * h
        cx = w / 2 + rng.uniform(-_OFFSET_FRAC, _OFFSET_FRAC) * w
        ay = rng.uniform(*_AXIS_FRAC) * size
        ax = rng.uniform(*_AXIS_FRAC) * size
        theta = rng.uniform(0.0, np.pi)
        mask = _ellipse_mask(h, w, cy, cx, ay, ax, theta)
        image = spec.intensity_bias + mask.astype(np.float64)
        if spec.noise_std > 0:
            image = image + rng.normal(0.0, spec.noise_std, size=(h, w))
        image = np.clip(image, -3.0, 6.0)
        cases.append((image, mask, [float(spec.spacing[0]),
                                    float(spec.spacing[1])]))
    return cases


def _resample_shape(shape, spacing, target):
    return [max(1, int(round(shape[a] * spacing[a] / target[a])))
            for a in range(2)]


def _bilinear(img, out_shape):
    h, w = img.shape
    oh, ow = out_shape
    if (oh, ow) == (h, w):
        return img.copy()
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _nearest(img, out_shape):
    h, w = img.shape
    oh, ow = out_shape
    if (oh, ow) == (h, w):
        return img.copy()
    ys = np.clip(np.round((np.arange(oh) + 0.5) * (h / oh) - 0.5), 0,
                 h - 1).astype(int)
    xs = np.clip(np.round((np.arange(ow) + 0.5) * (w / ow) - 0.5), 0,
                 w - 1).astype(int)
    return img[np.ix_(ys, xs)]


def resample_case(image, mask, spacing, target_spacing):
    """Resample to the target spacing: bilinear image, nearest mask.

    Returns (image, mask, spacing) with spacing set to the target, so
    resampling twice equals resampling once bit-exactly.
    """
    if list(spacing) == list(target_spacing):
        return np.asarray(image, dtype=np.float64).copy(), \
            np.asarray(mask).copy(), list(target_spacing)
    out_shape = _resample_shape(image.shape, spacing, target_spacing)
    return (_bilinear(np.asarray(image, dtype=np.float64), out_shape),
            _nearest(np.asarray(mask), out_shape),
            list(target_spacing))


def center_crop_or_pad(arr, out_shape, fill=0.0):
    """Center-crop and/or zero-pad to the requested shape.

    Returns (result, placement) where placement records, per axis, the
    (src_start, dst_start, length) triple needed to invert the operation.
    """
    out = np.full(out_shape, fill, dtype=arr.dtype)
    placement = []
    src_sl, dst_sl = [], []
    for a in range(2):
        n, m = arr.shape[a], out_shape[a]
        if n >= m:
            start = (n - m) // 2
            src_sl.append(slice(start, start + m))
            dst_sl.append(slice(0, m))
            placement.append((start, 0, m))
        else:
            start = (m - n) // 2
            src_sl.append(slice(0, n))
            dst_sl.append(slice(start, start + n))
            placement.append((0, start, n))
    out[tuple(dst_sl)] = arr[tuple(src_sl)]
    return out, placement


def undo_crop_or_pad(arr, orig_shape, placement, fill=0.0):
    out = np.full(orig_shape, fill, dtype=arr.dtype)
    src_sl, dst_sl = [], []
    for a, (src_start, dst_start, length) in enumerate(placement):
        src_sl.append(slice(dst_start, dst_start + length))
        dst_sl.append(slice(src_start, src_start + length))
    out[tuple(dst_sl)] = arr[tuple(src_sl)]
    return out


def preprocess_case(image, mask, spacing, plan: TrainingPlan):
    """Resample + normalize + fit to patch; returns model-ready arrays.

    The returned context allows mapping a patch-space prediction back to
    the native image grid for evaluation.
    """
    native_shape = np.asarray(image).shape
    img, msk, _ = resample_case(image, mask, spacing, plan.target_spacing)
    mean, std = plan.intensity_norm
    img = (img - mean) / max(std, 1e-8)
    resampled_shape = img.shape
    patch = tuple(plan.patch_size)
    img, placement = center_crop_or_pad(img, patch, fill=0.0)
    msk, _ = center_crop_or_pad(msk, patch, fill=0)
    ctx = {"native_shape": native_shape, "native_spacing": list(spacing),
           "resampled_shape": resampled_shape, "placement": placement}
    return img, msk, ctx


def prediction_to_native(pred_mask, ctx):
    """Map a patch-space binary prediction back to the native grid."""
    restored = undo_crop_or_pad(np.asarray(pred_mask, dtype=np.uint8),
                                ctx["resampled_shape"], ctx["placement"],
                                fill=0)
    return _nearest(restored, ctx["native_shape"])


def split_indices(num_cases: int, eval_fraction: float, seed: int):
    """Deterministic train/eval split shared across experimental arms."""
    n_eval = max(1, int(round(num_cases * eval_fraction)))
    if n_eval >= num_cases:
        raise ConfigError("eval split would consume every case")
    order = np.random.default_rng(seed).permutation(num_cases)
    return sorted(order[n_eval:].tolist()), sorted(order[:n_eval].tolist())
