"""Dataset fingerprints, their federated aggregation, and plan generation.

A fingerprint summarizes a center's data (shapes after cropping to the
nonzero bounding box, pixel spacings, pooled foreground intensity stats).
Aggregation concatenates the per-center lists in ascending node id order;
plan generation is a deterministic function of (global fingerprint, memory
budget), so centers with equal budgets derive identical architectures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ProtocolError, UsageError

MIN_PATCH = 32
MAX_PATCH = 512
MIN_STAGES = 2
MAX_STAGES = 8
FEATURE_BASE = 32
FEATURE_CAP = 512


def features_per_stage(num_stages: int, base: int = FEATURE_BASE,
                       cap: int = FEATURE_CAP):
    return [min(base * 2 ** i, cap) for i in range(num_stages)]


@dataclass
class Fingerprint:
    shapes_after_crop: list  # per-case [H, W]
    spacings: list           # per-case [sy, sx] in mm/pixel
    intensity_mean: float
    intensity_std: float
    num_cases: int

    def validate(self):
        if self.num_cases < 1:
            raise UsageError("fingerprint must cover at least one case")
        if not (len(self.shapes_after_crop) == len(self.spacings)
                == self.num_cases):
            raise UsageError("fingerprint list lengths disagree with num_cases")
        for sh in self.shapes_after_crop:
            if any(int(v) < 8 for v in sh):
                raise UsageError(f"shape entry below 8: {sh}")
        for sp in self.spacings:
            if any(float(v) <= 0 for v in sp):
                raise UsageError(f"non-positive spacing: {sp}")
        return self

    def to_dict(self):
        return {
            "shapes_after_crop": [[int(v) for v in s]
                                  for s in self.shapes_after_crop],
            "spacings": [[float(v) for v in s] for s in self.spacings],
            "intensity_mean": float(self.intensity_mean),
            "intensity_std": float(self.intensity_std),
            "num_cases": int(self.num_cases),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            shapes_after_crop=[[int(v) for v in s]
                               for s in d["shapes_after_crop"]],
            spacings=[[float(v) for v in s] for s in d["spacings"]],
            intensity_mean=float(d["intensity_mean"]),
            intensity_std=float(d["intensity_std"]),
            num_cases=int(d["num_cases"]),
        ).validate()


@dataclass
class GlobalFingerprint(Fingerprint):
    contributor_order: list = field(default_factory=list)

    def to_dict(self):
        d = super().to_dict()
        d["contributor_order"] = [int(v) for v in self.contributor_order]
        return d

    @classmethod
    def from_dict(cls, d):
        fp = Fingerprint.from_dict(d)
        return cls(shapes_after_crop=fp.shapes_after_crop,
                   spacings=fp.spacings,
                   intensity_mean=fp.intensity_mean,
                   intensity_std=fp.intensity_std,
                   num_cases=fp.num_cases,
                   contributor_order=[int(v) for v in
                                      d.get("contributor_order", [])])

    @classmethod
    def from_local(cls, fp: Fingerprint, node_id: int) -> "GlobalFingerprint":
        return cls(shapes_after_crop=list(fp.shapes_after_crop),
                   spacings=list(fp.spacings),
                   intensity_mean=fp.intensity_mean,
                   intensity_std=fp.intensity_std,
                   num_cases=fp.num_cases,
                   contributor_order=[node_id])


@dataclass
class TrainingPlan:
    target_spacing: list       # [sy, sx]
    patch_size: list           # [P, P]
    num_stages: int
    features_per_stage: list
    batch_size: int
    intensity_norm: tuple      # (mean, std)

    def validate(self):
        p = self.patch_size[0]
        if self.patch_size[0] != self.patch_size[1]:
            raise ConfigError("patch must be square")
        if not (MIN_STAGES <= self.num_stages <= MAX_STAGES):
            raise ConfigError(f"num_stages out of range: {self.num_stages}")
        if p % (2 ** (self.num_stages - 1)):
            raise ConfigError(
                f"patch {p} not divisible by 2^{self.num_stages - 1}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        return self

    def to_dict(self):
        return {
            "target_spacing": [float(v) for v in self.target_spacing],
            "patch_size": [int(v) for v in self.patch_size],
            "num_stages": int(self.num_stages),
            "features_per_stage": [int(v) for v in self.features_per_stage],
            "batch_size": int(self.batch_size),
            "intensity_norm": [float(self.intensity_norm[0]),
                               float(self.intensity_norm[1])],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(target_spacing=[float(v) for v in d["target_spacing"]],
                   patch_size=[int(v) for v in d["patch_size"]],
                   num_stages=int(d["num_stages"]),
                   features_per_stage=[int(v) for v in
                                       d["features_per_stage"]],
                   batch_size=int(d["batch_size"]),
                   intensity_norm=(float(d["intensity_norm"][0]),
                                   float(d["intensity_norm"][1]))).validate()


def _crop_to_nonzero_bbox(image: np.ndarray):
    nz = np.nonzero(image)
    if len(nz[0]) == 0:
        return list(image.shape)
    return [int(nz[a].max() - nz[a].min() + 1) for a in range(image.ndim)]


def extract_fingerprint(dataset) -> Fingerprint:
    """Summarize a list of (image, mask, spacing) cases.

    Shapes are recorded after cropping each image to its nonzero bounding
    box; intensity stats pool foreground-mask pixels across all cases.
    """
    if not dataset:
        raise UsageError("cannot fingerprint an empty dataset")
    shapes, spacings = [], []
    fg_count = 0
    fg_sum = 0.0
    fg_sqsum = 0.0
    for image, mask, spacing in dataset:
        image = np.asarray(image, dtype=np.float64)
        mask = np.asarray(mask)
        if mask.shape != image.shape:
            raise UsageError("mask shape differs from image shape")
        shapes.append(_crop_to_nonzero_bbox(image))
        spacings.append([float(v) for v in spacing])
        fg = image[mask > 0]
        fg_count += fg.size
        fg_sum += float(fg.sum())
        fg_sqsum += float((fg * fg).sum())
    if fg_count == 0:
        mean, std = 0.0, 0.0
    else:
        mean = fg_sum / fg_count
        var = max(fg_sqsum / fg_count - mean * mean, 0.0)
        std = math.sqrt(var)
    return Fingerprint(shapes_after_crop=shapes, spacings=spacings,
                       intensity_mean=mean, intensity_std=std,
                       num_cases=len(shapes)).validate()


def aggregate_fingerprints(contributions) -> GlobalFingerprint:
    """Concatenate local fingerprints into a global one.

    Lists are concatenated in ascending node id order; intensity stats are
    recombined by case-count-weighted pooling of means and variances.
    """
    if not contributions:
        raise UsageError("no fingerprints to aggregate")
    node_ids = [nid for nid, _ in contributions]
    if len(set(node_ids)) != len(node_ids):
        raise ProtocolError("duplicate node_id among fingerprint contributors")
    ordered = sorted(contributions, key=lambda kv: kv[0])
    shapes, spacings, order = [], [], []
    total = 0
    wsum = 0.0
    wsq = 0.0
    for nid, fp in ordered:
        fp.validate()
        shapes.extend([list(s) for s in fp.shapes_after_crop])
        spacings.extend([list(s) for s in fp.spacings])
        order.append(nid)
        total += fp.num_cases
        wsum += fp.num_cases * fp.intensity_mean
        wsq += fp.num_cases * (fp.intensity_std ** 2 + fp.intensity_mean ** 2)
    mean = wsum / total
    var = max(wsq / total - mean * mean, 0.0)
    return GlobalFingerprint(shapes_after_crop=shapes, spacings=spacings,
                             intensity_mean=mean, intensity_std=math.sqrt(var),
                             num_cases=total, contributor_order=order)


def _lower_median(values):
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def _memory_estimate(patch: int, stages: int, batch: int) -> int:
    feats = features_per_stage(stages)
    per_sample = sum((patch // 2 ** i) ** 2 * feats[i] for i in range(stages))
    return 8 * batch * per_sample * 3  # activations + grads + workspace


def make_plan(global_fp: GlobalFingerprint,
              memory_budget_bytes: int) -> TrainingPlan:
    """Derive a training plan from a global fingerprint and a memory budget.

    Deterministic: target spacing is the per-axis lower median; each case's
    shape is rescaled to that spacing and the per-axis lower median of the
    rescaled shapes drives the patch size (largest power of two not above
    the smaller axis, clipped to [32, 512]). Stage count follows the patch
    (floor(log2 P) - 1); the batch is the largest b >= 2 fitting the budget,
    halving the patch when even b = 2 does not fit.
    """
    global_fp.validate()
    if memory_budget_bytes < 64 * 1024 * 1024:
        raise ConfigError("memory budget below the 64 MiB minimum")
    target = [_lower_median([sp[a] for sp in global_fp.spacings])
              for a in range(2)]
    rescaled = [[sh[a] * sp[a] / target[a] for a in range(2)]
                for sh, sp in zip(global_fp.shapes_after_crop,
                                  global_fp.spacings)]
    median_shape = [_lower_median([r[a] for r in rescaled]) for a in range(2)]
    p = 2 ** int(math.floor(math.log2(min(median_shape))))
    p = max(MIN_PATCH, min(MAX_PATCH, p))

    while True:
        stages = int(math.floor(math.log2(p))) - 1
        stages = max(MIN_STAGES, min(MAX_STAGES, stages))
        per_b = _memory_estimate(p, stages, 1)
        batch = memory_budget_bytes // per_b
        if batch >= 2:
            break
        if p <= MIN_PATCH:
            raise ConfigError(
                f"budget {memory_budget_bytes} too small for patch "
                f"{MIN_PATCH} at batch 2")
        p //= 2
    return TrainingPlan(target_spacing=target, patch_size=[p, p],
                        num_stages=stages,
                        features_per_stage=features_per_stage(stages),
                        batch_size=int(batch),
                        intensity_norm=(global_fp.intensity_mean,
                                        global_fp.intensity_std)).validate()
