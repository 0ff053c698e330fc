"""Conditional deblurring generator.

A mapping network lifts the scalar control factor u into a 64-channel feature
field; a three-scale encoder-decoder restores sharp images from the blurred
input, with every residual block modulated by the control field through
deformable sampling offsets and channel attention.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError

CONTROL_CHANNELS = 64


@dataclass
class GeneratorConfig:
    base_channels: int = 32
    n_blocks_per_stage: int = 8
    scales: int = 3
    mapping_layers: int = 8
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.scales != 3:
            raise InvalidInputError("generator is fixed at 3 scales")
        if self.n_blocks_per_stage < 1:
            raise InvalidInputError("n_blocks_per_stage must be >= 1")
        if self.base_channels < 4:
            raise InvalidInputError("base_channels must be >= 4")

    def stage_channels(self, n):
        # stage n = 1 is full resolution
        return self.base_channels * 2 ** (n - 1)


@dataclass
class ControlField:
    """Scalar control factor with its 2-D expansion and mapped feature field."""

    u: float
    u_2d: torch.Tensor   # (1, 1, H, W) constant map
    u_f: torch.Tensor    # (1, 64, H, W)


@dataclass
class MultiScaleOutput:
    """Restored images at full, half and quarter resolution."""

    images: list = field(default_factory=list)

    @property
    def full(self):
        return self.images[0]


def expand_control(u, height, width, device=None, dtype=torch.float32):
    """Expand per-sample control factors into constant (B, 1, H, W) maps."""
    if not torch.is_tensor(u):
        u = torch.as_tensor(u, dtype=dtype, device=device)
    u = u.reshape(-1)
    if torch.any(u < 0) or torch.any(u > 1):
        raise InvalidInputError("control factor must lie in [0, 1]")
    return u.to(dtype)[:, None, None, None].expand(u.shape[0], 1, height, width).contiguous()


class MappingNetwork(nn.Module):
    """Stack of 1x1 conv + LeakyReLU layers from the constant u map to u_f."""

    def __init__(self, n_layers=8, out_channels=CONTROL_CHANNELS, slope=0.2):
        super().__init__()
        layers = []
        in_ch = 1
        for _ in range(n_layers):
            layers += [nn.Conv2d(in_ch, out_channels, kernel_size=1),
                       nn.LeakyReLU(slope, inplace=True)]
            in_ch = out_channels
        self.layers = nn.Sequential(*layers)

    def forward(self, u_2d):
        return self.layers(u_2d)

    def control_field(self, u, height, width) -> ControlField:
        """Build the full control field for a single scalar u."""
        if height <= 0 or width <= 0:
            raise InvalidInputError("control field dimensions must be positive")
        u_2d = expand_control([float(u)], height, width,
                              device=next(self.parameters()).device)
        return ControlField(u=float(u), u_2d=u_2d, u_f=self.forward(u_2d))


class ControlResize(nn.Module):
    """Bilinear resize of u_f to a stage resolution plus 1x1 projection to stage width."""

    def __init__(self, out_channels, in_channels=CONTROL_CHANNELS):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, kernel_size=1)

    def forward(self, u_f, size):
        if u_f.shape[-2:] != tuple(size):
            u_f = F.interpolate(u_f, size=tuple(size), mode="bilinear", align_corners=False)
        return self.proj(u_f)


def deform_gather(x, offsets, masks, weight):
    """Gated convolution over learned fractional sampling positions.

    For every output position p and kernel point k the input is sampled
    bilinearly at p + p_k + offset_k(p), gated by mask_k(p), and contracted
    with the kernel weights. Samples outside the map read zero. ``offsets``
    holds (dy, dx) pairs per kernel point; output resolution equals input
    resolution (stride 1, same padding).
    """
    b, _, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    k = kh * kw
    dtype, device = x.dtype, x.device
    ky, kx = torch.meshgrid(torch.arange(kh, dtype=dtype, device=device),
                            torch.arange(kw, dtype=dtype, device=device), indexing="ij")
    grid_k = torch.stack([ky - (kh - 1) / 2, kx - (kw - 1) / 2], dim=-1).view(k, 2)

    base_y = torch.arange(h, dtype=dtype, device=device).view(1, 1, h, 1)
    base_x = torch.arange(w, dtype=dtype, device=device).view(1, 1, 1, w)
    off = offsets.view(b, k, 2, h, w)
    sample_y = base_y + grid_k[:, 0].view(1, k, 1, 1) + off[:, :, 0]
    sample_x = base_x + grid_k[:, 1].view(1, k, 1, 1) + off[:, :, 1]
    # normalize to [-1, 1] for grid_sample (align_corners=True convention)
    norm_y = (2 * sample_y - (h - 1)) / max(h - 1, 1)
    norm_x = (2 * sample_x - (w - 1)) / max(w - 1, 1)
    grid = torch.stack([norm_x, norm_y], dim=-1).view(b, k * h, w, 2)

    sampled = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros",
                            align_corners=True)
    sampled = sampled.view(b, c_in, k, h, w) * masks.view(b, 1, k, h, w)
    return torch.einsum("oik,bikhw->bohw", weight.view(c_out, c_in, k), sampled)


class ControlDeformConv(nn.Module):
    """Convolution over learned fractional sampling positions with per-sample gates.

    Offsets and gates come from separate conv branches on the fused input.
    Both start neutral: zero offsets, gates at 0.5.
    """

    def __init__(self, channels, kernel_size=3):
        super().__init__()
        self.kernel_size = kernel_size
        k2 = kernel_size * kernel_size
        self.weight = nn.Parameter(torch.empty(channels, channels, kernel_size, kernel_size))
        nn.init.kaiming_uniform_(self.weight, a=0.2)
        self.offset_conv = nn.Conv2d(channels, 2 * k2, kernel_size=3, padding=1)
        self.mask_conv = nn.Conv2d(channels, k2, kernel_size=3, padding=1)
        nn.init.zeros_(self.offset_conv.weight)
        nn.init.zeros_(self.offset_conv.bias)
        nn.init.zeros_(self.mask_conv.weight)
        nn.init.zeros_(self.mask_conv.bias)

    def branches(self, x):
        # offsets: (B, 2K, H, W) as (dy, dx) pairs; masks: (B, K, H, W) in [0, 1]
        return self.offset_conv(x), torch.sigmoid(self.mask_conv(x))

    def forward(self, x):
        offsets, masks = self.branches(x)
        return deform_gather(x, offsets, masks, self.weight)


class ControlChannelAttention(nn.Module):
    """Per-channel gates from globally pooled fused features, applied to another map."""

    def __init__(self, channels, reduction=4, slope=0.2):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.fc1 = nn.Conv2d(channels, hidden, kernel_size=1)
        self.act = nn.LeakyReLU(slope, inplace=True)
        self.fc2 = nn.Conv2d(hidden, channels, kernel_size=1)

    def weights(self, f_u):
        pooled = F.adaptive_avg_pool2d(f_u, 1)
        return torch.sigmoid(self.fc2(self.act(self.fc1(pooled))))

    def forward(self, f_u, f_dc):
        if f_u.shape[1] != f_dc.shape[1]:
            raise InvalidInputError("channel counts of the two feature maps must match")
        return f_dc * self.weights(f_u)


class ControlAdaptiveBlock(nn.Module):
    """Residual block whose deformable sampling and channel gates depend on the
    control field: F_im + CACA(F_u, CADC(F_u)) with F_u fusing image and control
    features."""

    def __init__(self, channels, slope=0.2):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.act = nn.LeakyReLU(slope, inplace=True)
        self.fuse = nn.Conv2d(2 * channels, channels, kernel_size=1)
        self.deform = ControlDeformConv(channels)
        self.attention = ControlChannelAttention(channels, slope=slope)

    def forward(self, f_im, u_f_n):
        if f_im.shape[-2:] != u_f_n.shape[-2:] or f_im.shape[1] != u_f_n.shape[1]:
            raise InvalidInputError(
                f"feature map {tuple(f_im.shape)} and control field {tuple(u_f_n.shape)} disagree"
            )
        f_o = self.act(self.conv(f_im))
        f_u = self.fuse(torch.cat([f_o, u_f_n], dim=1))
        return f_im + self.attention(f_u, self.deform(f_u))


class BlockStack(nn.Module):
    def __init__(self, channels, n_blocks, slope):
        super().__init__()
        self.blocks = nn.ModuleList(ControlAdaptiveBlock(channels, slope) for _ in range(n_blocks))

    def forward(self, x, u_f_n):
        for block in self.blocks:
            x = block(x, u_f_n)
        return x


class ShallowFeatures(nn.Module):
    """Features of the downsampled blur image: four 3x3 conv + leaky layers,
    concatenated with the input and fused by a 1x1 conv."""

    def __init__(self, out_channels, slope=0.2):
        super().__init__()
        mid = max(out_channels // 2, 4)
        widths = [3, mid, mid, mid, out_channels - 3]
        convs = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            convs += [nn.Conv2d(cin, cout, kernel_size=3, padding=1),
                      nn.LeakyReLU(slope, inplace=True)]
        self.convs = nn.Sequential(*convs)
        self.fuse = nn.Conv2d(out_channels, out_channels, kernel_size=1)

    def forward(self, x):
        return self.fuse(torch.cat([self.convs(x), x], dim=1))


class FeatureMerge(nn.Module):
    """Inject shallow blur features into encoder features."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=3, padding=1)

    def forward(self, enc, shallow):
        return enc + self.conv(enc * shallow)


class CrossScaleFusion(nn.Module):
    """Fuse all three encoder stages, resized to one target stage."""

    def __init__(self, in_channels, out_channels, slope=0.2):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel_size=1),
            nn.LeakyReLU(slope, inplace=True),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
        )

    def forward(self, features, size):
        resized = [
            f if f.shape[-2:] == tuple(size)
            else F.interpolate(f, size=tuple(size), mode="bilinear", align_corners=False)
            for f in features
        ]
        return self.body(torch.cat(resized, dim=1))


class DeblurGenerator(nn.Module):
    """Three-scale encoder-decoder conditioned on the control factor.

    forward(b, u) restores images at full, half and quarter resolution
    (MultiScaleOutput.images[0] is full scale). Heads add the resized input
    back, so outputs are unclamped residual corrections of the blur.
    """

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = config or GeneratorConfig()
        cfg = self.config
        c1, c2, c3 = (cfg.stage_channels(n) for n in (1, 2, 3))
        slope = cfg.leaky_slope
        blocks = cfg.n_blocks_per_stage

        self.mapping = MappingNetwork(cfg.mapping_layers, CONTROL_CHANNELS, slope)
        self.control_stages = nn.ModuleList(ControlResize(c) for c in (c1, c2, c3))

        self.conv_in = nn.Sequential(nn.Conv2d(3, c1, 3, padding=1), nn.LeakyReLU(slope, True))
        self.enc1 = BlockStack(c1, blocks, slope)
        self.down1 = nn.Sequential(nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.LeakyReLU(slope, True))
        self.enc2 = BlockStack(c2, blocks, slope)
        self.down2 = nn.Sequential(nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.LeakyReLU(slope, True))
        self.enc3 = BlockStack(c3, blocks, slope)

        self.shallow2 = ShallowFeatures(c2, slope)
        self.shallow3 = ShallowFeatures(c3, slope)
        self.merge2 = FeatureMerge(c2)
        self.merge3 = FeatureMerge(c3)

        total = c1 + c2 + c3
        self.fusion1 = CrossScaleFusion(total, c1, slope)
        self.fusion2 = CrossScaleFusion(total, c2, slope)

        self.dec3 = BlockStack(c3, blocks, slope)
        self.up3 = nn.Sequential(nn.ConvTranspose2d(c3, c2, 4, stride=2, padding=1), nn.LeakyReLU(slope, True))
        self.skip2 = nn.Conv2d(2 * c2, c2, kernel_size=1)
        self.dec2 = BlockStack(c2, blocks, slope)
        self.up2 = nn.Sequential(nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1), nn.LeakyReLU(slope, True))
        self.skip1 = nn.Conv2d(2 * c1, c1, kernel_size=1)
        self.dec1 = BlockStack(c1, blocks, slope)

        self.head1 = nn.Conv2d(c1, 3, 3, padding=1)
        self.head2 = nn.Conv2d(c2, 3, 3, padding=1)
        self.head3 = nn.Conv2d(c3, 3, 3, padding=1)

    def resize_control(self, u_f, n):
        """Reshape u_f to the resolution and width of stage n in {1, 2, 3}."""
        if n not in (1, 2, 3):
            raise InvalidInputError(f"unknown stage index {n}")
        h, w = u_f.shape[-2:]
        size = (h >> (n - 1), w >> (n - 1))
        return self.control_stages[n - 1](u_f, size)

    def forward(self, b, u) -> MultiScaleOutput:
        if b.dim() != 4 or b.shape[1] != 3:
            raise InvalidInputError("expected blur input of shape (B, 3, H, W)")
        h, w = b.shape[-2:]
        if h % 4 or w % 4:
            raise InvalidInputError(f"input dimensions {h}x{w} must be divisible by 4")

        u_2d = expand_control(u, h, w, device=b.device, dtype=b.dtype)
        if u_2d.shape[0] == 1 and b.shape[0] > 1:
            u_2d = u_2d.expand(b.shape[0], -1, -1, -1)
        if u_2d.shape[0] != b.shape[0]:
            raise InvalidInputError("control factor batch does not match image batch")
        u_f = self.mapping(u_2d)
        controls = [self.resize_control(u_f, n) for n in (1, 2, 3)]

        b_half = F.interpolate(b, scale_factor=0.5, mode="bilinear", align_corners=False)
        b_quarter = F.interpolate(b, scale_factor=0.25, mode="bilinear", align_corners=False)

        e1 = self.enc1(self.conv_in(b), controls[0])
        z = self.merge2(self.down1(e1), self.shallow2(b_half))
        e2 = self.enc2(z, controls[1])
        z = self.merge3(self.down2(e2), self.shallow3(b_quarter))
        e3 = self.enc3(z, controls[2])

        skip_full = self.fusion1([e1, e2, e3], e1.shape[-2:])
        skip_half = self.fusion2([e1, e2, e3], e2.shape[-2:])

        d3 = self.dec3(e3, controls[2])
        out_quarter = self.head3(d3) + b_quarter

        z = self.skip2(torch.cat([self.up3(d3), skip_half], dim=1))
        d2 = self.dec2(z, controls[1])
        out_half = self.head2(d2) + b_half

        z = self.skip1(torch.cat([self.up2(d2), skip_full], dim=1))
        d1 = self.dec1(z, controls[0])
        out_full = self.head1(d1) + b

        return MultiScaleOutput(images=[out_full, out_half, out_quarter])

    @torch.no_grad()
    def restore(self, blur, u):
        """Evaluation helper: float (H, W, 3) array in, clamped full-scale array out."""
        device = next(self.parameters()).device
        x = torch.from_numpy(blur.transpose(2, 0, 1).copy()).float()[None].to(device)
        out = self.forward(x, [float(u)]).full.clamp(0.0, 1.0)
        return out[0].cpu().numpy().transpose(1, 2, 0)
