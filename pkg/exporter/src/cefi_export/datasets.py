"""Image sources with stable sample ids.

A dataset spec is ``kind:arg``:

* ``synthetic:N`` — N deterministic 10-class images (class-coded color
  blocks plus seeded noise); ids are 0..N-1 and labels are included. Needs
  no network; intended for smoke exports and tests.
* ``folder:PATH`` — image files under PATH; ids follow sorted filename
  order, so every export over the same folder aligns row-for-row.
* ``cifar10:train`` / ``cifar10:test`` — torchvision CIFAR-10; ids are
  dataset indices. Downloads when absent; raises a clear fetch error when
  the download cannot proceed.

Every source yields ``(id, PIL.Image, label_or_None)`` in id order, so the
same sample id refers to the same underlying image in every export.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .encoders import FetchError

NUM_SYNTH_CLASSES = 10


def _synthetic_image(index: int, size: int = 96) -> tuple[Image.Image, int]:
    label = index % NUM_SYNTH_CLASSES
    rng = np.random.default_rng(1_000_000 + index)
    base = np.zeros((size, size, 3), dtype=np.float32)
    # class-coded color plus a class-dependent stripe pattern
    hue = label / NUM_SYNTH_CLASSES
    base[..., 0] = hue
    base[..., 1] = 1.0 - hue
    stripe = (np.arange(size) // max(1, (label + 2))) % 2
    base[..., 2] = stripe[None, :]
    noisy = np.clip(base + rng.normal(0, 0.05, base.shape), 0, 1)
    return Image.fromarray((noisy * 255).astype(np.uint8)), label


def iter_dataset(spec: str, root: str = "data"):
    """Yield ``(sample_id, image, label)`` for a dataset spec."""
    kind, _, arg = spec.partition(":")
    if kind == "synthetic":
        n = int(arg or "100")
        for i in range(n):
            img, label = _synthetic_image(i)
            yield i, img, label
    elif kind == "folder":
        if not os.path.isdir(arg):
            raise FetchError(f"image folder not found: {arg!r}")
        names = sorted(
            f for f in os.listdir(arg)
            if f.lower().endswith((".png", ".jpg", ".jpeg", ".bmp", ".webp")))
        if not names:
            raise FetchError(f"no image files under {arg!r}")
        for i, name in enumerate(names):
            yield i, Image.open(os.path.join(arg, name)).convert("RGB"), None
    elif kind == "cifar10":
        split = arg or "test"
        if split not in ("train", "test"):
            raise FetchError(f"cifar10 split must be train or test, got {split!r}")
        try:
            from torchvision.datasets import CIFAR10
            ds = CIFAR10(root=root, train=(split == "train"), download=True)
        except Exception as e:
            raise FetchError(
                f"could not obtain CIFAR-10 ({split}): {e}. Place an existing "
                f"copy under {root!r} or use a folder:/synthetic: source.") from e
        for i in range(len(ds)):
            img, label = ds[i]
            yield i, img, int(label)
    else:
        raise FetchError(f"unknown dataset spec {spec!r}; "
                         "expected synthetic:N, folder:PATH, or cifar10:SPLIT")
