"""Per-image augmentations and the MixUp / CutMix / ResizeMix batch operators.

Images are float32 ``(C, H, W)`` arrays in ``[0, 1]``. Mixing operators also
accept raw ``(D,)`` feature vectors: MixUp and ResizeMix blend them directly
and CutMix swaps a contiguous segment.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from protoshot.dataset import LabeledExample

log = logging.getLogger(__name__)

MIX_OPS = ("none", "mixup", "cutmix", "resizemix", "all-augment")


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class CutRegion:
    top: int
    left: int
    height: int
    width: int
    image_height: int
    image_width: int

    def __post_init__(self):
        if not (
            0 <= self.top
            and 0 <= self.left
            and self.top + self.height <= self.image_height
            and self.left + self.width <= self.image_width
        ):
            raise AugmentError(f"cut region {self} leaves the image bounds")

    @property
    def area(self) -> int:
        return self.height * self.width

    def mask(self) -> np.ndarray:
        """Binary (H, W) mask with ones on the pasted patch."""
        m = np.zeros((self.image_height, self.image_width), dtype=bool)
        m[self.top : self.top + self.height, self.left : self.left + self.width] = True
        return m


@dataclass(frozen=True)
class MixedExample:
    image: np.ndarray
    soft_label: np.ndarray
    lam: float
    provenance: tuple[int, int]
    region: CutRegion | None = None


def _onehot_blend(classes: Sequence[str], label_a: str, label_b: str, lam: float) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    try:
        ia, ib = index[label_a], index[label_b]
    except KeyError as err:
        raise AugmentError(f"label {err.args[0]!r} not in the class set") from None
    soft = np.zeros(len(classes), dtype=np.float64)
    soft[ia] += lam
    soft[ib] += 1.0 - lam
    return soft


def _check_lam(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise AugmentError(f"lambda must be in [0, 1], got {lam}")
    return lam


def _blend(xa: np.ndarray, xb: np.ndarray, lam: float) -> np.ndarray:
    mixed = np.float32(lam) * xa + np.float32(1.0 - lam) * xb
    # rounding may step a hair outside the per-pixel envelope
    return np.clip(mixed, np.minimum(xa, xb), np.maximum(xa, xb)).astype(np.float32)


def mixup(
    a: LabeledExample, b: LabeledExample, lam: float, classes: Sequence[str], pair: tuple[int, int] = (0, 1)
) -> MixedExample:
    lam = _check_lam(lam)
    if a.data.shape != b.data.shape:
        raise AugmentError(f"mixup shape mismatch: {a.data.shape} vs {b.data.shape}")
    return MixedExample(_blend(a.data, b.data, lam), _onehot_blend(classes, a.label, b.label, lam), lam, pair)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def cutmix(
    a: LabeledExample,
    b: LabeledExample,
    lam_target: float,
    rng: np.random.Generator,
    classes: Sequence[str],
    pair: tuple[int, int] = (0, 1),
) -> MixedExample:
    """Paste a square-in-aspect patch of ``b`` into ``a``; lambda is recomputed from the patch area."""
    lam_target = _check_lam(lam_target)
    if a.data.shape != b.data.shape:
        raise AugmentError(f"cutmix shape mismatch: {a.data.shape} vs {b.data.shape}")
    x = a.data.copy()
    frac = math.sqrt(1.0 - lam_target)
    if a.data.ndim == 1:
        d = a.data.shape[0]
        length = _round_half_up((1.0 - lam_target) * d)
        start = int(rng.integers(0, d - length + 1))
        x[start : start + length] = b.data[start : start + length]
        region = CutRegion(0, start, 1, length, 1, d)
        total = d
    else:
        _, h, w = a.data.shape
        ch, cw = _round_half_up(frac * h), _round_half_up(frac * w)
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        region = CutRegion(top, left, ch, cw, h, w)
        x[:, top : top + ch, left : left + cw] = b.data[:, top : top + ch, left : left + cw]
        total = h * w
    lam = 1.0 - region.area / total
    return MixedExample(x, _onehot_blend(classes, a.label, b.label, lam), lam, pair, region)


def resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a (C, H, W) image to (C, *size); identity when already that size."""
    if image.shape[1:] == tuple(size):
        return image
    from skimage.transform import resize as sk_resize

    out = sk_resize(image, (image.shape[0], *size), order=1, mode="edge", anti_aliasing=False, preserve_range=True)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def resizemix(
    a: LabeledExample, b: LabeledExample, lam: float, classes: Sequence[str], pair: tuple[int, int] = (0, 1)
) -> MixedExample:
    """``lam * x_a + (1 - lam) * resize(x_b, size(x_a))`` with the matching label blend."""
    lam = _check_lam(lam)
    xb = b.data
    if a.data.shape != xb.shape:
        if a.data.ndim != 3 or xb.ndim != 3 or a.data.shape[0] != xb.shape[0]:
            raise AugmentError(f"resizemix cannot resize {xb.shape} to {a.data.shape}")
        xb = resize(xb, a.data.shape[1:])
    return MixedExample(_blend(a.data, xb, lam), _onehot_blend(classes, a.label, b.label, lam), lam, pair)


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    """Draw the blend weight from Beta(alpha, alpha)."""
    if not alpha > 0:
        raise AugmentError(f"alpha must be > 0, got {alpha}")
    return float(rng.beta(alpha, alpha))


# --------------------------------------------------------------------------- per-image ops


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def vflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1, :].copy()


@dataclass(frozen=True)
class Resize:
    size: tuple[int, int]

    def __call__(self, img, rng):
        return resize(img, tuple(self.size))


@dataclass(frozen=True)
class RandomResizedCrop:
    scale: tuple[float, float] = (0.5, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    size: tuple[int, int] | None = None

    def __post_init__(self):
        lo, hi = self.scale
        if not 0 < lo <= hi <= 1:
            raise AugmentError(f"crop scale range must satisfy 0 < lo <= hi <= 1, got {self.scale}")

    def __call__(self, img, rng):
        _, h, w = img.shape
        out_size = tuple(self.size) if self.size else (h, w)
        area = h * w
        log_ratio = (math.log(self.ratio[0]), math.log(self.ratio[1]))
        for _ in range(10):
            target = area * rng.uniform(*self.scale)
            aspect = math.exp(rng.uniform(*log_ratio))
            cw = _round_half_up(math.sqrt(target * aspect))
            ch = _round_half_up(math.sqrt(target / aspect))
            if 0 < cw <= w and 0 < ch <= h:
                top = int(rng.integers(0, h - ch + 1))
                left = int(rng.integers(0, w - cw + 1))
                return resize(img[:, top : top + ch, left : left + cw], out_size)
        return resize(img, out_size)


@dataclass(frozen=True)
class HorizontalFlip:
    p: float = 0.5

    def __call__(self, img, rng):
        return hflip(img) if rng.random() < self.p else img


@dataclass(frozen=True)
class VerticalFlip:
    p: float = 0.5

    def __call__(self, img, rng):
        return vflip(img) if rng.random() < self.p else img


@dataclass(frozen=True)
class ColorJitter:
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.1

    def __call__(self, img, rng):
        out = img.astype(np.float32)
        if self.brightness:
            out = out * np.float32(rng.uniform(1 - self.brightness, 1 + self.brightness))
        if self.contrast:
            mean = out.mean()
            out = (out - mean) * np.float32(rng.uniform(1 - self.contrast, 1 + self.contrast)) + mean
        if self.saturation and out.shape[0] == 3:
            gray = (0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2])[None]
            out = (out - gray) * np.float32(rng.uniform(1 - self.saturation, 1 + self.saturation)) + gray
        return np.clip(out, 0.0, 1.0).astype(np.float32)


OP_TYPES = {
    "resize": Resize,
    "random_resized_crop": RandomResizedCrop,
    "hflip": HorizontalFlip,
    "vflip": VerticalFlip,
    "color_jitter": ColorJitter,
}


def _op_name(op) -> str:
    return next(name for name, cls in OP_TYPES.items() if isinstance(op, cls))


@dataclass(frozen=True)
class AugPolicy:
    ops: tuple = ()
    mix: str = "none"
    alpha: float = 1.0
    resize_scale: tuple[float, float] = (0.1, 0.8)
    seed: int = 0

    def __post_init__(self):
        if self.mix not in MIX_OPS:
            raise AugmentError(f"unknown mix op {self.mix!r}; expected one of {MIX_OPS}")
        if not self.alpha > 0:
            raise AugmentError("alpha must be > 0")
        for op in self.ops:
            p = getattr(op, "p", None)
            if p is not None and not 0 <= p <= 1:
                raise AugmentError(f"probability out of [0, 1] in {op}")
        lo, hi = self.resize_scale
        if not 0 < lo <= hi <= 1:
            raise AugmentError(f"resize_scale must satisfy 0 < lo <= hi <= 1, got {self.resize_scale}")

    def to_dict(self) -> dict:
        ops = []
        for op in self.ops:
            fields = {k: list(v) if isinstance(v, tuple) else v for k, v in op.__dict__.items() if v is not None}
            ops.append({"op": _op_name(op), **fields})
        return {
            "ops": ops,
            "mix": self.mix,
            "alpha": self.alpha,
            "resize_scale": list(self.resize_scale),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> AugPolicy:
        ops = []
        for entry in d.get("ops", ()):
            entry = dict(entry)
            name = entry.pop("op")
            if name not in OP_TYPES:
                raise AugmentError(f"unknown augmentation op {name!r}")
            ops.append(OP_TYPES[name](**{k: tuple(v) if isinstance(v, list) else v for k, v in entry.items()}))
        return cls(
            tuple(ops),
            d.get("mix", "none"),
            float(d.get("alpha", 1.0)),
            tuple(d.get("resize_scale", (0.1, 0.8))),
            int(d.get("seed", 0)),
        )


def augment_image(example: LabeledExample, ops: Sequence, rng: np.random.Generator) -> LabeledExample:
    if not ops:
        return example
    if not example.is_image:
        raise AugmentError(f"per-image ops need (C,H,W) images; {example.source_id} is a raw vector")
    img = example.data
    for op in ops:
        img = op(img, rng)
    return LabeledExample(img, example.label, example.source_id)


def _partner(i: int, n: int, rng: np.random.Generator) -> int:
    j = int(rng.integers(0, n - 1))
    return j + 1 if j >= i else j


def apply_policy(
    batch: Sequence[LabeledExample], policy: AugPolicy, rng: np.random.Generator, classes: Sequence[str]
) -> list[MixedExample]:
    """Per-image ops in policy order, then the batch mix op with soft labels.

    Callers must not pass novel-class data through here.
    """
    items = [augment_image(ex, policy.ops, rng) for ex in batch]
    mix = policy.mix
    if mix == "none":
        return [
            MixedExample(ex.data, _onehot_blend(classes, ex.label, ex.label, 1.0), 1.0, (i, i))
            for i, ex in enumerate(items)
        ]
    n = len(items)
    if n < 2:
        raise AugmentError("mix requires ≥2 examples in the batch")
    if mix == "all-augment":
        mix = ("mixup", "cutmix", "resizemix")[int(rng.integers(0, 3))]
    out = []
    for i, a in enumerate(items):
        j = _partner(i, n, rng)
        b = items[j]
        lam = sample_lambda(policy.alpha, rng)
        if mix == "mixup":
            out.append(mixup(a, b, lam, classes, (i, j)))
        elif mix == "cutmix":
            out.append(cutmix(a, b, lam, rng, classes, (i, j)))
        else:
            if b.is_image:
                # partner is rescaled first so the resize back to size(a) is a real resampling
                _, h, w = b.data.shape
                tau = rng.uniform(*policy.resize_scale)
                small = (max(1, _round_half_up(tau * h)), max(1, _round_half_up(tau * w)))
                b = LabeledExample(resize(b.data, small), b.label, b.source_id)
            out.append(resizemix(a, b, lam, classes, (i, j)))
    return out
