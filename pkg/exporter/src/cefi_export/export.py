"""Batch export of pooled encoder features into the engine's feature format."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torchvision import transforms

from .datasets import iter_dataset
from .encoders import build_encoder
from .format import write_feature_file

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ExportJob:
    dataset: str                 # synthetic:N | folder:PATH | cifar10:SPLIT
    encoder: str                 # see encoders.ENCODERS
    output_path: str
    batch_size: int = 32
    image_size: int = 224
    device_tag: int = 0          # recorded for operator bookkeeping only
    random_init: bool = False
    seed: int = 0


def _preprocess(image_size: int) -> transforms.Compose:
    # Standard ImageNet-style preprocessing shared by all supported encoders.
    return transforms.Compose([
        transforms.Resize((image_size, image_size)),
        transforms.ToTensor(),
        transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD),
    ])


def run_export(job: ExportJob) -> tuple[int, int]:
    """Run one export; returns ``(rows, feature_dim)``.

    The model runs in eval mode on a single torch thread so repeated exports
    of the same job produce byte-identical files.
    """
    torch.set_num_threads(1)
    model, feature_dim = build_encoder(job.encoder, random_init=job.random_init,
                                       seed=job.seed, image_size=job.image_size)
    prep = _preprocess(job.image_size)

    ids: list[int] = []
    labels: list[int] = []
    have_labels = True
    chunks: list[np.ndarray] = []
    batch: list[torch.Tensor] = []

    def flush():
        if not batch:
            return
        with torch.no_grad():
            out = model(torch.stack(batch))
        chunks.append(out.numpy().astype(np.float32))
        batch.clear()

    for sample_id, image, label in iter_dataset(job.dataset):
        ids.append(sample_id)
        if label is None:
            have_labels = False
        else:
            labels.append(label)
        batch.append(prep(image))
        if len(batch) >= job.batch_size:
            flush()
    flush()

    features = np.concatenate(chunks, axis=0)
    if features.shape[1] != feature_dim:
        raise RuntimeError(
            f"{job.encoder} produced dim {features.shape[1]}, expected {feature_dim}")
    write_feature_file(job.output_path, features, np.asarray(ids),
                       np.asarray(labels) if have_labels else None)
    return features.shape[0], features.shape[1]
