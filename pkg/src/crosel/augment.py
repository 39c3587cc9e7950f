"""Weak and strong augmentation for vector and image instances.

Every call draws from a generator seeded by ``(policy.seed..., instance index)``,
so an augmentation is a pure function of its inputs and can run in any order.

Images (``C x H x W`` in ``[0, 1]``):
  weak    random shift (reflect-pad by ``max(1, H // 8)`` then crop) + horizontal flip
  strong  weak, then RandAugment with ``n_ops`` ops at ``magnitude`` on a 0..30 scale

Vectors:
  weak    additive Gaussian jitter, sigma 0.05
  strong  Gaussian jitter sigma 0.1, then 20% of features zeroed
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .data import Instance
from .errors import ContractError

KINDS = ("none", "weak", "strong")

WEAK_JITTER = 0.05
STRONG_JITTER = 0.1
STRONG_DROP = 0.2

# Defaults only; not tuned against the original image pipeline.
RANDAUG_OPS = 2
RANDAUG_MAGNITUDE = 10


@dataclass(frozen=True)
class AugmentPolicy:
    kind: str = "none"
    seed: int | Sequence[int] = 0
    hflip: bool = True
    n_ops: int = RANDAUG_OPS
    magnitude: int = RANDAUG_MAGNITUDE

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")

    def rng(self, index: int) -> np.random.Generator:
        seed = [self.seed] if isinstance(self.seed, (int, np.integer)) else list(self.seed)
        return np.random.default_rng([*map(int, seed), int(index)])


def augment(x: Instance, policy: AugmentPolicy, expected_shape: tuple[int, ...] | None = None) -> np.ndarray:
    features = np.asarray(x.features, dtype=np.float32)
    if expected_shape is not None and features.shape != tuple(expected_shape):
        raise ContractError(f"instance {x.index} has shape {features.shape}, expected {tuple(expected_shape)}")
    if policy.kind == "none":
        return features
    rng = policy.rng(x.index)
    if features.ndim == 1:
        return _augment_vector(features, policy.kind, rng)
    if features.ndim == 3:
        return _augment_image(features, policy, rng)
    raise ContractError(f"instance {x.index}: unsupported feature shape {features.shape}")


def augment_batch(features: np.ndarray, indices: np.ndarray, policy: AugmentPolicy) -> np.ndarray:
    """Augment ``features[j]`` as instance ``indices[j]`` for every row."""
    if policy.kind == "none":
        return np.asarray(features, dtype=np.float32)
    return np.stack([augment(Instance(f, int(i)), policy) for f, i in zip(features, indices)])


def _augment_vector(x: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    if kind == "weak":
        return (x + rng.normal(0.0, WEAK_JITTER, size=x.shape)).astype(np.float32)
    out = x + rng.normal(0.0, STRONG_JITTER, size=x.shape)
    out[rng.random(x.shape) < STRONG_DROP] = 0.0
    return out.astype(np.float32)


def _augment_image(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    _, h, w = x.shape
    pad = max(1, h // 8)
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    out = padded[:, dy:dy + h, dx:dx + w]
    if policy.hflip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    out = np.ascontiguousarray(out, dtype=np.float32)
    if policy.kind == "strong":
        out = rand_augment(out, rng, policy.n_ops, policy.magnitude)
    return out


# --------------------------------------------------------------------------
# RandAugment over torchvision's functional ops


def _to_uint8(img):
    return (img.clamp(0, 1) * 255).round().to(torch.uint8)


def _from_uint8(img):
    return img.to(torch.float32) / 255.0


def _affine(img, **kw):
    base = {"angle": 0.0, "translate": [0, 0], "scale": 1.0, "shear": [0.0, 0.0]}
    base.update(kw)
    return TF.affine(img, interpolation=TF.InterpolationMode.BILINEAR, **base)


def _op_table(h: int, w: int):
    # (name, fn(img, level in [0, 1], sign))
    return [
        ("identity", lambda img, m, s: img),
        ("autocontrast", lambda img, m, s: TF.autocontrast(img)),
        ("equalize", lambda img, m, s: _from_uint8(TF.equalize(_to_uint8(img)))),
        ("brightness", lambda img, m, s: TF.adjust_brightness(img, 1 + s * 0.9 * m)),
        ("contrast", lambda img, m, s: TF.adjust_contrast(img, 1 + s * 0.9 * m)),
        ("sharpness", lambda img, m, s: TF.adjust_sharpness(img, 1 + s * 0.9 * m)),
        ("posterize", lambda img, m, s: _from_uint8(TF.posterize(_to_uint8(img), 8 - int(round(4 * m))))),
        ("solarize", lambda img, m, s: TF.solarize(img, 1.0 - m)),
        ("rotate", lambda img, m, s: _affine(img, angle=s * 30.0 * m)),
        ("shear_x", lambda img, m, s: _affine(img, shear=[s * 16.7 * m, 0.0])),
        ("shear_y", lambda img, m, s: _affine(img, shear=[0.0, s * 16.7 * m])),
        ("translate_x", lambda img, m, s: _affine(img, translate=[int(round(s * 0.3 * m * w)), 0])),
        ("translate_y", lambda img, m, s: _affine(img, translate=[0, int(round(s * 0.3 * m * h))])),
    ]


def rand_augment(img: np.ndarray, rng: np.random.Generator, n_ops: int = RANDAUG_OPS, magnitude: int = RANDAUG_MAGNITUDE):
    """Apply ``n_ops`` uniformly chosen ops, each at ``magnitude / 30`` strength."""
    t = torch.from_numpy(np.ascontiguousarray(img))
    ops = _op_table(*img.shape[1:])
    level = magnitude / 30.0
    for j in rng.integers(0, len(ops), size=n_ops):
        sign = 1.0 if rng.random() < 0.5 else -1.0
        t = ops[j][1](t, level, sign).clamp(0.0, 1.0)
    return t.numpy().astype(np.float32)
