"""Pretrained vision encoders and their pooled-feature taps.

Each entry builds a torchvision model with the classification head removed,
so the forward pass returns the encoder's standard pooled representation
(global average pool for CNNs, the class token for ViT). Pretrained weights
are the default; when they cannot be fetched a :class:`FetchError` explains
how to proceed (``random_init=True`` builds the same architecture with
seeded random weights for offline smoke runs).
"""

from __future__ import annotations

import torch
from torch import nn


class FetchError(RuntimeError):
    """A pretrained checkpoint or dataset could not be retrieved."""


ENCODERS = {
    "resnet18": 512,
    "resnet50": 2048,
    "vit_b_16": 768,
    "convnext_tiny": 768,
}


def _strip_head(name: str, model: nn.Module) -> nn.Module:
    if name.startswith("resnet"):
        model.fc = nn.Identity()
    elif name.startswith("vit"):
        model.heads = nn.Identity()
    elif name.startswith("convnext"):
        model.classifier[2] = nn.Identity()
    else:
        raise ValueError(f"no feature tap defined for {name!r}")
    return model


def build_encoder(name: str, random_init: bool = False, seed: int = 0,
                  image_size: int = 224) -> tuple[nn.Module, int]:
    """Returns ``(model_in_eval_mode, feature_dim)``.

    Raises:
        FetchError: pretrained weights were requested but cannot be
            downloaded in this environment.
        ValueError: unknown encoder name.
    """
    import torchvision.models as tvm

    if name not in ENCODERS:
        raise ValueError(f"unknown encoder {name!r}; choose from {sorted(ENCODERS)}")

    kwargs = {}
    if name == "vit_b_16" and image_size != 224:
        kwargs["image_size"] = image_size
        if not random_init:
            raise FetchError("vit_b_16 pretrained weights are defined for 224px inputs; "
                             "use --image-size 224 or --random-init")

    builder = getattr(tvm, name)
    if random_init:
        torch.manual_seed(seed)
        model = builder(weights=None, **kwargs)
    else:
        weights = tvm.get_model_weights(name).DEFAULT
        try:
            model = builder(weights=weights, **kwargs)
        except Exception as e:  # urllib errors vary by platform
            raise FetchError(
                f"could not fetch pretrained weights for {name!r}: {e}. "
                "Provide a cache under ~/.cache/torch/hub/checkpoints or rerun "
                "with --random-init for an offline smoke export.") from e
    model = _strip_head(name, model)
    model.eval()
    return model, ENCODERS[name]
