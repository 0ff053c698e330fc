"""Adversarial, regression, pixel and perceptual losses with their weights."""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .discriminator import DiscriminatorOutput
from .errors import InvalidInputError, NumericError

SIGMOID_FLOOR = 1e-7


@dataclass
class LossWeights:
    lambda_Q: float = 0.05
    lambda_ar: float = 0.05
    lambda_adv: float = 0.1
    lambda_pix: float = 1.0
    lambda_per: float = 0.01
    epsilon_charbonnier: float = 1e-3

    def __post_init__(self):
        for name in ("lambda_Q", "lambda_ar", "lambda_adv", "lambda_pix",
                     "lambda_per", "epsilon_charbonnier"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be non-negative")


def log_sigmoid(logits):
    # clamp sigma away from 0 so both -log(s) and +log(s) terms stay finite
    return torch.log(torch.sigmoid(logits).clamp_min(SIGMOID_FLOOR))


def _check_finite(name, *tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite values in {name}")


def charbonnier(output, target, eps=1e-3):
    """Smooth L1 over 3-channel pixel differences, averaged over pixels.

    ``output``/``target`` are (..., 3, H, W); the norm is taken over the
    channel axis before the sqrt.
    """
    if output.shape != target.shape:
        raise InvalidInputError("output and target shapes differ")
    sq = (target - output).pow(2).sum(dim=-3)
    return torch.sqrt(sq + eps * eps).mean()


def regression_error(u_2d, q_map):
    """Mean squared error between the control map and a regressed map."""
    if u_2d.shape != q_map.shape:
        raise InvalidInputError("control map and regression map shapes differ")
    return (u_2d - q_map).pow(2).mean()


def discriminator_loss(d_real: DiscriminatorOutput, d_fake: DiscriminatorOutput,
                       u_2d, weights: LossWeights):
    """Total discriminator objective and its per-term breakdown.

    Encoder and decoder terms push real logits up and fake logits down; the
    regressor term pulls the predicted control maps of both inputs toward the
    true constant map.
    """
    _check_finite("discriminator logits",
                  d_real.enc_logit, d_fake.enc_logit,
                  d_real.dec_logit_map, d_fake.dec_logit_map)
    l_enc = (-log_sigmoid(d_real.enc_logit) + log_sigmoid(d_fake.enc_logit)).mean()
    l_dec = (-log_sigmoid(d_real.dec_logit_map) + log_sigmoid(d_fake.dec_logit_map)).mean()
    l_q = regression_error(u_2d, d_real.u_hat_2d) + regression_error(u_2d, d_fake.u_hat_2d)
    total = l_enc + l_dec + weights.lambda_Q * l_q
    return total, {"L_Denc": l_enc.item(), "L_Ddec": l_dec.item(), "L_Q": l_q.item()}


def generator_loss(d_fake: DiscriminatorOutput, u_2d, outputs, gt_scales,
                   weights: LossWeights, perceptual=None):
    """Total generator objective and its per-term breakdown.

    ``outputs``/``gt_scales`` are the three restored/ground-truth images from
    full to quarter scale. ``perceptual`` maps a full-scale image to a list of
    feature tensors; omit it to drop the perceptual term.
    """
    if len(outputs) != len(gt_scales):
        raise InvalidInputError(
            f"got {len(outputs)} output scales but {len(gt_scales)} targets"
        )
    l_ar = regression_error(u_2d, d_fake.u_hat_2d)
    l_adv = -(log_sigmoid(d_fake.enc_logit).mean() + log_sigmoid(d_fake.dec_logit_map).mean())
    l_pix = sum(charbonnier(out, gt, weights.epsilon_charbonnier)
                for out, gt in zip(outputs, gt_scales))
    if perceptual is not None:
        feats_gt = perceptual(gt_scales[0])
        feats_out = perceptual(outputs[0])
        l_per = sum(w * (a - b).pow(2).mean()
                    for w, a, b in zip(perceptual.layer_weights, feats_gt, feats_out))
    else:
        l_per = torch.zeros((), device=u_2d.device)
    total = (weights.lambda_ar * l_ar + weights.lambda_adv * l_adv
             + weights.lambda_pix * l_pix + weights.lambda_per * l_per)
    breakdown = {"L_ar": l_ar.item(), "L_adv": l_adv.item(),
                 "L_pix": l_pix.item(), "L_per": l_per.item()}
    return total, breakdown


class RandomFeaturePyramid(nn.Module):
    """Frozen, seeded convolutional pyramid used as the default perceptual extractor.

    Stand-in for a pretrained feature network: five stride-2 conv stages with
    fixed random weights and uniform layer weights.
    """

    def __init__(self, seed=0, widths=(16, 32, 32, 32, 32), slope=0.2):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = []
        cin = 3
        for cout in widths:
            conv = nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  / (3.0 * cin ** 0.5))
                conv.bias.zero_()
            stages.append(nn.Sequential(conv, nn.LeakyReLU(slope)))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.layer_weights = [1.0 / len(widths)] * len(widths)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats
