"""Hard-sample generator: banded multi-angle rotations and per-layer masks.

The generator attacks the hashing encoder from two directions. A rotation
regressor emits one angle per band, constrained so band n covers
[10(n-1), 10n] degrees in either direction. Mask networks read the
encoder's features at selected layers and emit an additive and a
multiplicative mask that perturb those features.
"""

import math
from dataclasses import dataclass

import torch
from torch import nn

from .data import ConfigurationError

BAND_WIDTH_DEG = 10.0


def band_angles(raw):
    """Map raw regressor outputs (..., n) to banded angles in degrees.

    Band n (1-based) produces sign(tanh(a)) * (10(n-1) + 10|tanh(a)|), so
    |angle| always lies in [10(n-1), 10n]. The sign of tanh(a)=0 is taken
    as +1 so the lower band edge is attained rather than angle 0.
    """
    t = torch.tanh(raw)
    n = raw.shape[-1]
    lower = BAND_WIDTH_DEG * torch.arange(n, dtype=raw.dtype, device=raw.device)
    sign = torch.where(t >= 0, 1.0, -1.0).to(raw.dtype)
    return sign * (lower + BAND_WIDTH_DEG * t.abs())


def _bilinear_sample(images, xs, ys):
    """Sample images (B, C, H, W) at fractional pixel coords (B, H, W).

    Bilinear interpolation; samples outside the image contribute 0.
    Differentiable w.r.t. both the images and the coordinates.
    """
    b, c, h, w = images.shape
    x0 = xs.floor()
    y0 = ys.floor()
    dx = xs - x0
    dy = ys - y0
    flat = images.reshape(b, c, h * w)
    out = torch.zeros_like(flat)
    for ox, oy, wt in (
        (0, 0, (1 - dx) * (1 - dy)),
        (1, 0, dx * (1 - dy)),
        (0, 1, (1 - dx) * dy),
        (1, 1, dx * dy),
    ):
        xc = x0 + ox
        yc = y0 + oy
        valid = (xc >= 0) & (xc <= w - 1) & (yc >= 0) & (yc <= h - 1)
        idx = (yc.clamp(0, h - 1) * w + xc.clamp(0, w - 1)).long()
        gathered = flat.gather(2, idx.reshape(b, 1, h * w).expand(b, c, h * w))
        out = out + (wt * valid.to(images.dtype)).reshape(b, 1, h * w) * gathered
    return out.reshape(b, c, h, w)


def rotate(images, theta_deg):
    """Rotate images (B, C, H, W) about their centers by theta_deg degrees.

    Inverse-mapped sampling grid with bilinear interpolation; out-of-bounds
    samples fill with 0 (mid-gray for pixels in [-1, 1]). theta_deg may be a
    scalar or a per-image tensor of shape (B,). A zero angle reproduces the
    input exactly. Angles beyond +-90 degrees are rejected.
    """
    if images.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) images, got {images.shape}")
    b, _, h, w = images.shape
    theta = torch.as_tensor(theta_deg, dtype=images.dtype, device=images.device)
    if theta.ndim == 0:
        theta = theta.expand(b)
    if theta.shape != (b,):
        raise ValueError(f"theta must be scalar or shape ({b},), got {theta.shape}")
    with torch.no_grad():
        if theta.abs().max().item() > 90.0 + 1e-9:
            raise ValueError("rotation angle exceeds the +-90 degree guard")

    rad = theta * (math.pi / 180.0)
    cos = torch.cos(rad).reshape(b, 1, 1)
    sin = torch.sin(rad).reshape(b, 1, 1)
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=images.dtype, device=images.device),
        torch.arange(w, dtype=images.dtype, device=images.device),
        indexing="ij",
    )
    cx = (w - 1) / 2.0
    cy = (h - 1) / 2.0
    u = xs - cx
    v = ys - cy
    src_x = cos * u + sin * v + cx
    src_y = -sin * u + cos * v + cy
    return _bilinear_sample(images, src_x, src_y)


@dataclass(frozen=True)
class MaskPair:
    """Raw (pre-activation) masks for one selected layer.

    am_raw: additive mask logits, tanh-bounded on application.
    pm_raw: multiplicative mask logits, sigmoid-gated on application.
    Shapes (B, 1, d, d); broadcast across the layer's channels.
    """

    am_raw: torch.Tensor
    pm_raw: torch.Tensor
    layer_index: int


def apply_mask(features, mask):
    """Perturb features with a mask pair: (1 - sigmoid(pm)) * f + tanh(am).

    The multiplicative gate lies in (0, 1) and the additive term in (-1, 1).
    For layer 0 (raw images) the result is clamped back to the pixel range
    [-1, 1].
    """
    if mask.am_raw.shape[-2:] != features.shape[-2:]:
        raise ValueError(
            f"mask spatial size {tuple(mask.am_raw.shape[-2:])} does not match "
            f"features {tuple(features.shape[-2:])}"
        )
    out = (1.0 - torch.sigmoid(mask.pm_raw)) * features + torch.tanh(mask.am_raw)
    if mask.layer_index == 0:
        out = out.clamp(-1.0, 1.0)
    return out


class _ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class MaskGenerator(nn.Module):
    """Mask network for one selected layer.

    Encoder-style bottleneck: stride-2 convolution, three residual blocks,
    then a transposed convolution back up, instance-normalized throughout.
    The two-channel head is zero-initialized with the multiplicative logits
    biased to -4, so initial masks are near-identity (gate ~= 0.018,
    additive term 0).
    """

    def __init__(self, in_channels, hidden=16):
        super().__init__()
        self.down = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, stride=2, padding=1),
            nn.InstanceNorm2d(hidden),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[_ResidualBlock(hidden) for _ in range(3)])
        self.up = nn.Sequential(
            nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1),
            nn.InstanceNorm2d(hidden),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(hidden, 2, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        with torch.no_grad():
            self.head.bias.copy_(torch.tensor([0.0, -4.0]))

    def forward(self, features):
        d = features.shape[-2:]
        x = self.up(self.blocks(self.down(features)))
        if x.shape[-2:] != d:
            x = nn.functional.interpolate(x, size=d, mode="nearest")
        raw = self.head(x)
        return raw[:, 0:1], raw[:, 1:2]


class RotationRegressor(nn.Module):
    """Per-image regressor emitting one raw angle scalar per band.

    The final layer is zero-initialized, so the initial angles sit at the
    lower band edges (0, 10, 20, ... degrees).
    """

    def __init__(self, in_channels, bands):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 8, 3, stride=2, padding=1),
            nn.InstanceNorm2d(8),
            nn.ReLU(inplace=True),
            nn.Conv2d(8, 16, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        self.fc = nn.Linear(16, bands)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, images):
        x = self.features(images)
        x = x.mean(dim=(2, 3))
        return self.fc(x)


@dataclass(frozen=True)
class HardVariantSet:
    """Generated hard variants of a batch of images.

    angles_deg: (n_bands, B) rotation angles.
    images: (n_bands, B, C, H, W) rotated images.
    masks: per band, a dict {layer_index: MaskPair}; None when the variant
    pipeline runs without masks.
    """

    angles_deg: torch.Tensor
    images: torch.Tensor
    masks: tuple

    @property
    def n_bands(self):
        return self.images.shape[0]

    def detached(self):
        """Constant copy: gradients stop at the generator outputs."""
        masks = tuple(
            None if m is None else {
                k: MaskPair(v.am_raw.detach(), v.pm_raw.detach(), v.layer_index)
                for k, v in m.items()
            }
            for m in self.masks
        )
        return HardVariantSet(self.angles_deg.detach(), self.images.detach(), masks)


class HardSampleGenerator(nn.Module):
    """Full generator: banded rotations plus per-layer feature masks.

    Mask networks read the encoder's clean features of each rotated image
    (layer 0 being the rotated image itself); the masks they emit are then
    injected by the encoder's hard forward pass.
    """

    def __init__(self, encoder_spec, bands=3, use_rotation=True, use_masks=True,
                 mask_hidden=16):
        super().__init__()
        if not (use_rotation or use_masks):
            raise ConfigurationError("generator needs rotations, masks, or both")
        self.bands = bands
        self.use_rotation = use_rotation
        self.use_masks = use_masks
        self.mask_layers = encoder_spec.mask_layers if use_masks else ()
        self.rotation = (
            RotationRegressor(encoder_spec.in_channels, bands) if use_rotation else None
        )
        if use_masks:
            self.mask_nets = nn.ModuleDict({
                str(m): MaskGenerator(encoder_spec.channels_at(m), mask_hidden)
                for m in self.mask_layers
            })

    def generate(self, images, encoder):
        """Produce a HardVariantSet for a batch; gradients flow to this module.

        All bands run through one flat (n_bands * B) pass; the per-band mask
        pairs are contiguous views into the batched head outputs.
        """
        b = images.shape[0]
        n = self.bands
        flat = images.repeat(n, 1, 1, 1)  # band-major: [band0 batch, band1 batch, ...]
        if self.use_rotation:
            angles = band_angles(self.rotation(images)).transpose(0, 1)  # (n, B)
            flat = rotate(flat, angles.reshape(-1))
        else:
            angles = torch.zeros(n, b, dtype=images.dtype, device=images.device)
        rotated = flat.reshape(n, b, *images.shape[1:])
        if self.use_masks:
            feats = encoder.features(flat, self.mask_layers)
            heads = {m: self.mask_nets[str(m)](feats[m]) for m in self.mask_layers}
            masks = tuple(
                {
                    m: MaskPair(heads[m][0][band * b:(band + 1) * b],
                                heads[m][1][band * b:(band + 1) * b], m)
                    for m in self.mask_layers
                }
                for band in range(n)
            )
        else:
            masks = tuple(None for _ in range(n))
        return HardVariantSet(angles, rotated, masks)
