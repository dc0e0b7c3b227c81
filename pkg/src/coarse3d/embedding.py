"""Backbone contract and the contrastive projection head.

Tensors are channel-first, as torch expects: logits are ``(B, K, H, W)``, every
pyramid level ``(B, C_s, H / 2**s, W / 2**s)`` and embeddings ``(B, D, H, W)``.

A backbone is any ``nn.Module`` whose forward maps ``(B, C_in, H, W)`` to
``(logits, pyramid)``. Register new ones in :data:`BACKBONES` to select them by
the ``backbone`` config key.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .pointcloud_io import RangeImage

IN_CHANNELS = 6  # range, x, y, z, intensity, validity

# rough SemKITTI-like scales so the toy network sees O(1) inputs
_INPUT_MEAN = (10.0, 0.0, 0.0, -1.0, 0.5)
_INPUT_STD = (8.0, 10.0, 10.0, 1.0, 0.25)


def image_tensor(image: RangeImage, dtype=torch.float32) -> torch.Tensor:
    """Normalised ``(6, H, W)`` network input; invalid pixels are zero."""
    ch = (image.channels - np.array(_INPUT_MEAN)) / np.array(_INPUT_STD)
    ch = np.where(image.valid[..., None], ch, 0.0)
    x = np.concatenate([ch, image.valid[..., None].astype(np.float64)], axis=-1)
    return torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1))).to(dtype)


def _conv_block(c_in, c_out, stride=1):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.LeakyReLU(0.1),
        nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.LeakyReLU(0.1),
    )


class ToyBackbone(nn.Module):
    """Small encoder-decoder with skip connections.

    Encoder stage ``s`` runs at 1 / 2**s resolution and its output is pyramid
    level ``s``. The decoder upsamples back through the skips and a 1x1 conv
    emits the class logits at full resolution.
    """

    def __init__(self, n_classes, in_channels=IN_CHANNELS, widths=(16, 32, 64), zero_init_head=False):
        super().__init__()
        self.widths = tuple(widths)
        self.stages = nn.ModuleList()
        c_prev = in_channels
        for s, w in enumerate(self.widths):
            self.stages.append(_conv_block(c_prev, w, stride=1 if s == 0 else 2))
            c_prev = w
        self.up = nn.ModuleList()
        for s in range(len(self.widths) - 1, 0, -1):
            self.up.append(_conv_block(self.widths[s] + self.widths[s - 1], self.widths[s - 1]))
        self.classifier = nn.Conv2d(self.widths[0], n_classes, 1)
        if zero_init_head:
            nn.init.zeros_(self.classifier.weight)
            nn.init.zeros_(self.classifier.bias)

    @property
    def pyramid_channels(self):
        return self.widths

    def forward(self, x):
        H, W = x.shape[-2:]
        depth = 2 ** (len(self.widths) - 1)
        if H % depth or W % depth:
            raise ValueError(f"input {H}x{W} not divisible by {depth}")
        pyramid = []
        for stage in self.stages:
            x = stage(x)
            pyramid.append(x)
        y = pyramid[-1]
        for i, block in enumerate(self.up):
            skip = pyramid[-2 - i]
            y = F.interpolate(y, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            y = block(torch.cat([y, skip], dim=1))
        return self.classifier(y), pyramid


BACKBONES = {"toy": ToyBackbone}


def build_backbone(name: str, n_classes: int, **kwargs) -> nn.Module:
    try:
        cls = BACKBONES[name]
    except KeyError:
        raise ValueError(f"unknown backbone {name!r}; known: {sorted(BACKBONES)}") from None
    return cls(n_classes, **kwargs)


class ProjectionHead(nn.Module):
    """Two pointwise layers mapping concatenated pyramid features to unit vectors."""

    def __init__(self, in_channels, dim=256, hidden=None, negative_slope=0.1, bias=True, norm=False):
        super().__init__()
        hidden = hidden or dim
        layers = [nn.Conv2d(in_channels, hidden, 1, bias=bias)]
        if norm:
            layers.append(nn.BatchNorm2d(hidden))
        layers += [nn.LeakyReLU(negative_slope), nn.Conv2d(hidden, dim, 1, bias=bias)]
        self.net = nn.Sequential(*layers)
        self.dim = dim

    def forward(self, feats):
        """``feats`` is ``(B, C, H, W)`` or ``(N, C)``; returns l2-normalised output."""
        if feats.dim() == 2:
            return F.normalize(self._pointwise(feats), dim=1, eps=1e-12)
        return F.normalize(self.net(feats), dim=1, eps=1e-12)

    def _pointwise(self, x):
        # same layers applied to a flat batch of vectors; matmuls are far cheaper than 1x1 convs here
        for layer in self.net:
            if isinstance(layer, nn.Conv2d):
                x = F.linear(x, layer.weight.flatten(1), layer.bias)
            elif isinstance(layer, nn.BatchNorm2d):
                x = F.batch_norm(
                    x,
                    layer.running_mean,
                    layer.running_var,
                    layer.weight,
                    layer.bias,
                    self.training,
                    layer.momentum,
                    layer.eps,
                )
            else:
                x = layer(x)
        return x


def upsample_pyramid(pyramid, size) -> torch.Tensor:
    """Bilinearly resize every level to ``size`` and stack along channels."""
    if not pyramid:
        raise ValueError("empty feature pyramid")
    levels = [
        p if tuple(p.shape[-2:]) == tuple(size) else F.interpolate(p, size=size, mode="bilinear", align_corners=False)
        for p in pyramid
    ]
    return torch.cat(levels, dim=1)


def forward_backbone(model: nn.Module, image):
    """Run a backbone on a RangeImage or a ``(B, C, H, W)`` batch."""
    x = image_tensor(image)[None] if isinstance(image, RangeImage) else image
    param = next(model.parameters(), None)
    if param is not None:
        x = x.to(param.dtype)
    return model(x)


def project_embeddings(pyramid, head: ProjectionHead) -> torch.Tensor:
    """Dense ``(B, D, H, W)`` unit-norm embedding map at the size of level 0."""
    size = pyramid[0].shape[-2:]
    return head(upsample_pyramid(pyramid, size))


def embeddings_at(pyramid, head: ProjectionHead, b, rows, cols) -> torch.Tensor:
    """Embeddings of selected pixels only, ``(N, D)``.

    Equal to indexing :func:`project_embeddings` because the head is pointwise,
    but the head runs on N vectors instead of the whole image.
    """
    size = pyramid[0].shape[-2:]
    feats = upsample_pyramid(pyramid, size)
    return head(feats[b, :, rows, cols])
