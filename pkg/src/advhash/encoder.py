"""Hashing encoder: images to relaxed binary codes in (-1, 1)^k.

A small stack of stride-2 convolutional blocks with instance norm, global
average pooling and a tanh-bounded hashing layer. Hard variants are encoded
through the same weights with generator masks injected at selected layers
(layer 0 = the input image itself).
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .codes import binarize
from .data import ConfigurationError
from .generator import apply_mask


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture parameters of the hashing encoder."""

    code_length: int = 12
    in_channels: int = 3
    image_size: int = 28
    widths: tuple = (16, 32, 64)
    kernel_size: int = 3
    stride: int = 2
    mask_layers: tuple = (0, 1, 2)

    def __post_init__(self):
        if self.code_length < 8:
            raise ConfigurationError("code_length must be at least 8")
        bad = [m for m in self.mask_layers if not 0 <= m <= len(self.widths)]
        if bad:
            raise ConfigurationError(f"mask layers {bad} do not exist")

    def channels_at(self, layer_index):
        """Channel count of the feature at a layer (0 = input image)."""
        if layer_index == 0:
            return self.in_channels
        return self.widths[layer_index - 1]


class HashEncoder(nn.Module):
    def __init__(self, spec=None):
        super().__init__()
        self.spec = spec or EncoderSpec()
        blocks = []
        c_in = self.spec.in_channels
        for width in self.spec.widths:
            blocks.append(nn.Sequential(
                nn.Conv2d(c_in, width, self.spec.kernel_size,
                          stride=self.spec.stride,
                          padding=self.spec.kernel_size // 2),
                nn.InstanceNorm2d(width),
                nn.ReLU(inplace=True),
            ))
            c_in = width
        self.blocks = nn.ModuleList(blocks)
        # flattened conv features feed the hashing layer; pooling the
        # instance-normalized maps instead would leave codes almost
        # image-independent (per-channel means are fixed by the norm)
        d = self.spec.image_size
        for _ in self.spec.widths:
            d = (d + self.spec.stride - 1) // self.spec.stride
        self.hash_layer = nn.Linear(self.spec.widths[-1] * d * d,
                                    self.spec.code_length)

    def _check_images(self, images):
        expect = (self.spec.in_channels, self.spec.image_size, self.spec.image_size)
        if images.ndim != 4 or tuple(images.shape[1:]) != expect:
            raise ValueError(
                f"expected images of shape (B, {expect[0]}, {expect[1]}, "
                f"{expect[2]}), got {tuple(images.shape)}"
            )

    def features(self, images, layers):
        """Clean (mask-free) features at the requested layers; 0 = the images."""
        self._check_images(images)
        wanted = set(layers)
        out = {}
        if 0 in wanted:
            out[0] = images
        x = images
        for m, block in enumerate(self.blocks, start=1):
            if m > max(wanted, default=0):
                break
            x = block(x)
            if m in wanted:
                out[m] = x
        return out

    def _forward(self, images, masks):
        x = images
        if masks is not None and 0 in masks:
            x = apply_mask(x, masks[0])
        for m, block in enumerate(self.blocks, start=1):
            x = block(x)
            if masks is not None and m in masks:
                x = apply_mask(x, masks[m])
        return torch.tanh(self.hash_layer(x.flatten(1)))

    def encode(self, images):
        """Relaxed codes (B, k) of plain images, components in (-1, 1)."""
        self._check_images(images)
        return self._forward(images, None)

    def encode_hard(self, images, masks):
        """Encode hard variants with masks injected at the configured layers.

        ``masks`` maps layer index to MaskPair and must cover exactly the
        spec's mask layers; pass None to encode without any injection
        (rotation-only variants).
        """
        self._check_images(images)
        if masks is not None:
            got, want = set(masks), set(self.spec.mask_layers)
            if got != want:
                raise ConfigurationError(
                    f"mask layers {sorted(got)} do not match configured "
                    f"{sorted(want)}"
                )
        return self._forward(images, masks)

    def encode_variants(self, variants):
        """Stack of hard codes (n_bands, B, k) for a HardVariantSet.

        Bands are flattened into one forward pass; per-band masks concatenate
        along the batch axis in band order.
        """
        from .generator import MaskPair

        n, b = variants.images.shape[:2]
        flat = variants.images.reshape(n * b, *variants.images.shape[2:])
        masks = None
        if variants.masks[0] is not None:
            masks = {
                m: MaskPair(
                    torch.cat([variants.masks[band][m].am_raw for band in range(n)]),
                    torch.cat([variants.masks[band][m].pm_raw for band in range(n)]),
                    m,
                )
                for m in variants.masks[0]
            }
        return self.encode_hard(flat, masks).reshape(n, b, -1)


def encode_dataset(encoder, dataset, indices=None, batch_size=256):
    """Sign-binarized codes (N, k) int8 for a dataset subset, in eval mode."""
    if indices is None:
        indices = np.arange(len(dataset))
    indices = np.asarray(indices, dtype=np.int64)
    was_training = encoder.training
    encoder.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(indices), batch_size):
            batch = dataset.images[indices[start:start + batch_size]]
            mu = encoder.encode(torch.from_numpy(batch))
            chunks.append(binarize(mu).to(torch.int8).numpy())
    if was_training:
        encoder.train()
    return np.concatenate(chunks) if chunks else np.zeros((0, encoder.spec.code_length), np.int8)
