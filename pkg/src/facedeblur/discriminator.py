"""U-Net discriminator with a global head, a per-pixel head and a control regressor."""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError


@dataclass
class DiscriminatorConfig:
    base_channels: int = 32
    leaky_slope: float = 0.2


@dataclass
class DiscriminatorOutput:
    enc_logit: torch.Tensor      # (B,) global real/fake logit, pre-sigmoid
    dec_logit_map: torch.Tensor  # (B, H, W) per-pixel real/fake logits
    u_hat_2d: torch.Tensor       # (B, H, W) regressed control factor map


def _conv(cin, cout, stride, slope):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1),
        nn.LeakyReLU(slope, inplace=True),
    )


def _upconv(cin, cout, slope):
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, kernel_size=4, stride=2, padding=1),
        nn.LeakyReLU(slope, inplace=True),
    )


class UNetDiscriminator(nn.Module):
    """Takes the blurred image and a sharp image (real or restored) concatenated
    channel-wise. Encoder downsamples 4 times; the decoder mirrors it with skip
    connections. The regressor head shares the decoder trunk with the per-pixel
    head."""

    total_stride = 16

    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        self.config = config or DiscriminatorConfig()
        w = self.config.base_channels
        slope = self.config.leaky_slope

        self.enc0 = _conv(6, w, 1, slope)
        self.enc1 = _conv(w, 2 * w, 2, slope)
        self.enc2 = _conv(2 * w, 4 * w, 2, slope)
        self.enc3 = _conv(4 * w, 8 * w, 2, slope)
        self.enc4 = _conv(8 * w, 8 * w, 2, slope)
        self.enc_head = nn.Linear(8 * w, 1)

        self.up3 = _upconv(8 * w, 8 * w, slope)
        self.dec3 = _conv(16 * w, 8 * w, 1, slope)
        self.up2 = _upconv(8 * w, 4 * w, slope)
        self.dec2 = _conv(8 * w, 4 * w, 1, slope)
        self.up1 = _upconv(4 * w, 2 * w, slope)
        self.dec1 = _conv(4 * w, 2 * w, 1, slope)
        self.up0 = _upconv(2 * w, w, slope)
        self.dec0 = _conv(2 * w, w, 1, slope)

        self.dec_head = nn.Conv2d(w, 1, kernel_size=1)
        self.q_head = nn.Conv2d(w, 1, kernel_size=1)

    def forward(self, blur, sharp) -> DiscriminatorOutput:
        if blur.shape != sharp.shape:
            raise InvalidInputError(
                f"blur {tuple(blur.shape)} and sharp {tuple(sharp.shape)} shapes differ"
            )
        h, wd = blur.shape[-2:]
        if h % self.total_stride or wd % self.total_stride:
            raise InvalidInputError(
                f"input dimensions {h}x{wd} must be divisible by {self.total_stride}"
            )
        x = torch.cat([blur, sharp], dim=1)

        e0 = self.enc0(x)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        e4 = self.enc4(e3)

        enc_logit = self.enc_head(F.adaptive_avg_pool2d(e4, 1).flatten(1)).squeeze(1)

        d = self.dec3(torch.cat([self.up3(e4), e3], dim=1))
        d = self.dec2(torch.cat([self.up2(d), e2], dim=1))
        d = self.dec1(torch.cat([self.up1(d), e1], dim=1))
        trunk = self.dec0(torch.cat([self.up0(d), e0], dim=1))

        return DiscriminatorOutput(
            enc_logit=enc_logit,
            dec_logit_map=self.dec_head(trunk).squeeze(1),
            u_hat_2d=self.q_head(trunk).squeeze(1),
        )
