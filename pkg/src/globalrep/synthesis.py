"""Novel-class sample synthesis.

Step one grows the few labelled originals of a class to ``k_t`` variants with
simple augmenters. Step two draws a random convex combination of a random
subset of the variants' features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .data import LabeledSample
from .errors import ContractError

AUGMENTERS = ("random_crop", "random_flip", "feature_jitter", "copy")


@dataclass(frozen=True)
class SynthesisConfig:
    k_t: int = 20
    augmenters: tuple = ("random_crop", "random_flip", "feature_jitter")
    jitter_std: float = 0.1
    crop_pad: int | None = None  # defaults to 1/8 of the image side

    def __post_init__(self):
        object.__setattr__(self, "augmenters", tuple(self.augmenters))
        if self.k_t < 1:
            raise ContractError(f"k_t must be >= 1, got {self.k_t}")
        unknown = set(self.augmenters) - set(AUGMENTERS)
        if unknown:
            raise ContractError(f"unknown augmenters: {sorted(unknown)}")


@dataclass(frozen=True)
class ConvexDraw:
    k_r: int
    weights: np.ndarray
    selected_indices: np.ndarray
    raw: np.ndarray = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# step one


def random_crop(image, rng, pad=None):
    """Zero-pad by ``pad`` pixels and crop back to the original size at a random offset."""
    h, w, _ = image.shape
    pad = max(1, min(h, w) // 8) if pad is None else pad
    if h == 1 and w == 1:
        return image.copy()
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    top = rng.integers(0, 2 * pad + 1)
    left = rng.integers(0, 2 * pad + 1)
    return padded[top:top + h, left:left + w].copy()


def random_flip(image, rng):
    if rng.random() < 0.5:
        return image[:, ::-1].copy()
    return image.copy()


def augment_step1(samples, config, rng):
    """Grow the originals of one class to exactly ``config.k_t`` samples.

    The originals come first and unchanged. Each further variant applies one
    augmenter (chosen uniformly from those enabled) to one original (chosen
    uniformly). ``feature_jitter`` variants keep the image and carry a
    ``jitter_seed``; the noise is added after feature extraction.
    """
    samples = list(samples)
    if not samples:
        raise ContractError("augment_step1 needs at least one sample")
    if len({s.label for s in samples}) != 1:
        raise ContractError("augment_step1 expects samples of a single class")
    if config.k_t < len(samples):
        raise ContractError(f"k_t={config.k_t} is smaller than the {len(samples)} originals")
    need = config.k_t - len(samples)
    if need and not config.augmenters:
        raise ContractError("no augmenter enabled but more samples are required")

    out = list(samples)
    for k in range(need):
        orig = samples[rng.integers(len(samples))]
        name = config.augmenters[rng.integers(len(config.augmenters))]
        sid = f"{orig.sample_id}#aug{k}"
        if name == "random_crop":
            out.append(replace(orig, image=random_crop(orig.image, rng, config.crop_pad), sample_id=sid))
        elif name == "random_flip":
            out.append(replace(orig, image=random_flip(orig.image, rng), sample_id=sid))
        elif name == "feature_jitter":
            out.append(replace(orig, sample_id=sid, jitter_seed=int(rng.integers(2**31))))
        else:
            out.append(replace(orig, sample_id=sid))
    return out


def apply_jitter(features, jitter_seeds, scale):
    """Add seeded Gaussian noise of per-dimension ``scale`` to rows with a seed.

    ``jitter_seeds`` holds one entry per row; negative or None means no noise.
    """
    noise = np.zeros(tuple(features.shape))
    scale = np.asarray(scale, dtype=np.float64)
    hit = False
    for i, seed in enumerate(jitter_seeds):
        if seed is not None and seed >= 0:
            noise[i] = np.random.default_rng(int(seed)).standard_normal(features.shape[1]) * scale
            hit = True
    if not hit:
        return features
    return features + torch.as_tensor(noise, dtype=features.dtype)


# ---------------------------------------------------------------------------
# step two


def draw_convex(k_t, rng):
    """Random subset size, subset and normalized weights for one synthesized sample.

    The subset size is ``ceil(u)`` with ``u`` uniform on ``(0, k_t]``; the
    subset is drawn without replacement; raw weights are uniform on ``(0, 1]``.
    """
    if k_t < 1:
        raise ContractError(f"k_t must be >= 1, got {k_t}")
    k_hat = k_t * (1.0 - rng.random())
    k_r = min(max(math.ceil(k_hat), 1), k_t)
    idx = rng.choice(k_t, size=k_r, replace=False)
    raw = 1.0 - rng.random(k_r)
    return ConvexDraw(k_r, raw / raw.sum(), idx, raw)


def draw_from_raw(raw, selected_indices):
    raw = np.asarray(raw, dtype=np.float64)
    return ConvexDraw(len(raw), raw / raw.sum(), np.asarray(selected_indices), raw)


def synthesize(features, draw):
    """Weighted sum of the selected feature rows; gradients flow into ``features``."""
    if isinstance(features, (list, tuple)):
        dims = {tuple(np.shape(f)) for f in features}
        if len(dims) != 1:
            raise ContractError(f"features differ in shape: {sorted(dims)}")
        features = torch.stack([torch.as_tensor(f) for f in features])
    features = torch.as_tensor(features)
    idx = np.asarray(draw.selected_indices)
    if idx.size and (idx.min() < 0 or idx.max() >= len(features)):
        raise ContractError("draw indices out of range")
    w = torch.as_tensor(draw.weights, dtype=features.dtype)
    return w @ features[torch.as_tensor(idx)]
