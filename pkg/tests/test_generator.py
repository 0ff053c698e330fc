import numpy as np
import pytest
import torch
import torch.nn.functional as F

from facedeblur.errors import InvalidInputError
from facedeblur.generator import (
    ControlAdaptiveBlock,
    ControlChannelAttention,
    ControlDeformConv,
    ControlResize,
    DeblurGenerator,
    GeneratorConfig,
    MappingNetwork,
    deform_gather,
    expand_control,
)

SMALL = GeneratorConfig(base_channels=8, n_blocks_per_stage=2)


def naive_deform_gather(x, offsets, masks, weight):
    """Explicit-loop oracle: out(p) = sum_k w_k * x(p + p_k + dp_k) * m_k with
    bilinear sampling and zeros outside the map."""
    b, c_in, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    k_total = kh * kw
    out = np.zeros((b, c_out, h, w), dtype=np.float64)
    xs = x.detach().numpy().astype(np.float64)
    offs = offsets.detach().numpy().astype(np.float64)
    ms = masks.detach().numpy().astype(np.float64)
    ws = weight.detach().numpy().astype(np.float64)

    def sample(img, y, x_):
        y0, x0 = int(np.floor(y)), int(np.floor(x_))
        total = 0.0
        for dy in (0, 1):
            for dx in (0, 1):
                yy, xx = y0 + dy, x0 + dx
                if 0 <= yy < h and 0 <= xx < w:
                    wy = 1 - abs(y - yy)
                    wx = 1 - abs(x_ - xx)
                    total += wy * wx * img[yy, xx]
        return total

    for bi in range(b):
        for k in range(k_total):
            ky, kx = divmod(k, kw)
            py = ky - (kh - 1) / 2
            px = kx - (kw - 1) / 2
            for y in range(h):
                for x_ in range(w):
                    sy = y + py + offs[bi, 2 * k, y, x_]
                    sx = x_ + px + offs[bi, 2 * k + 1, y, x_]
                    gate = ms[bi, k, y, x_]
                    for ci in range(c_in):
                        v = sample(xs[bi, ci], sy, sx) * gate
                        for co in range(c_out):
                            out[bi, co, y, x_] += ws[co, ci, ky, kx] * v
    return torch.from_numpy(out).float()


def saturate_masks_to_one(deform):
    with torch.no_grad():
        deform.mask_conv.bias.fill_(40.0)  # sigmoid(40) == 1.0 in float32


# ---------------------------------------------------------------------------
# mapping network
# ---------------------------------------------------------------------------

def test_mapping_zero_weights_give_zero_field():
    net = MappingNetwork()
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    field = net.control_field(0.0, 8, 8)
    assert torch.all(field.u_f == 0)


def test_control_expansion_is_constant():
    u2d = expand_control([0.5], 4, 4)
    assert u2d.shape == (1, 1, 4, 4)
    assert torch.all(u2d == 0.5)


def test_mapping_matches_scalar_chain():
    torch.manual_seed(0)
    net = MappingNetwork()
    u = 0.37
    field = net.control_field(u, 6, 5)
    # oracle: run the same affine chain on the scalar input
    v = np.full((1,), u, dtype=np.float64)
    for layer in net.layers:
        if isinstance(layer, torch.nn.Conv2d):
            w = layer.weight.detach().numpy().squeeze(-1).squeeze(-1).astype(np.float64)
            b = layer.bias.detach().numpy().astype(np.float64)
            v = w @ v + b
        else:
            v = np.where(v >= 0, v, 0.2 * v)
    got = field.u_f[0].detach().numpy()
    spatial_std = got.reshape(64, -1).std(axis=1)
    assert spatial_std.max() < 1e-6  # spatially constant
    assert np.abs(got[:, 0, 0] - v).max() < 1e-5


def test_mapping_rejects_out_of_range_u():
    net = MappingNetwork()
    with pytest.raises(InvalidInputError):
        net.control_field(1.2, 4, 4)
    with pytest.raises(InvalidInputError):
        net.control_field(-0.1, 4, 4)


# ---------------------------------------------------------------------------
# per-stage control resize
# ---------------------------------------------------------------------------

def test_resize_control_identity_case():
    resize = ControlResize(out_channels=64)
    with torch.no_grad():
        resize.proj.weight.copy_(torch.eye(64).view(64, 64, 1, 1))
        resize.proj.bias.zero_()
    x = torch.rand(1, 64, 8, 8)
    assert torch.allclose(resize(x, (8, 8)), x)


def test_resize_control_constant_field_stays_constant():
    resize = ControlResize(out_channels=16)
    x = torch.full((1, 64, 8, 8), 0.3)
    out = resize(x, (4, 4))
    assert out.shape == (1, 16, 4, 4)
    flat = out.reshape(16, -1)
    assert (flat.max(dim=1).values - flat.min(dim=1).values).abs().max() < 1e-6


def test_resize_control_unknown_stage_rejected():
    gen = DeblurGenerator(SMALL)
    u_f = torch.rand(1, 64, 8, 8)
    with pytest.raises(InvalidInputError):
        gen.resize_control(u_f, 4)


# ---------------------------------------------------------------------------
# deformable sampling
# ---------------------------------------------------------------------------

def test_deform_zero_offsets_unit_masks_equal_dense_conv():
    torch.manual_seed(1)
    for _ in range(5):
        deform = ControlDeformConv(4)
        saturate_masks_to_one(deform)
        x = torch.rand(1, 4, 8, 8)
        got = deform(x)
        want = F.conv2d(x, deform.weight, padding=1)
        assert (got - want).abs().max() < 1e-5


def test_deform_fresh_init_is_half_dense_conv():
    torch.manual_seed(2)
    deform = ControlDeformConv(4)
    x = torch.rand(2, 4, 8, 8)
    got = deform(x)
    want = 0.5 * F.conv2d(x, deform.weight, padding=1)
    assert (got - want).abs().max() < 1e-5


def test_deform_init_branches_are_neutral():
    deform = ControlDeformConv(6)
    offsets, masks = deform.branches(torch.rand(1, 6, 5, 5))
    assert torch.all(offsets == 0)
    assert torch.all(masks == 0.5)


def test_deform_integer_shift_moves_columns():
    # 1x1 kernel, uniform offset (dy, dx) = (0, 1): output reads one column right
    x = torch.arange(12.0).reshape(1, 1, 3, 4)
    weight = torch.ones(1, 1, 1, 1)
    offsets = torch.zeros(1, 2, 3, 4)
    offsets[:, 1] = 1.0
    masks = torch.ones(1, 1, 3, 4)
    out = deform_gather(x, offsets, masks, weight)
    want = torch.zeros_like(x)
    want[..., :-1] = x[..., 1:]
    assert (out - want).abs().max() < 1e-5


def test_deform_matches_naive_oracle():
    torch.manual_seed(3)
    for trial in range(3):
        x = torch.rand(1, 3, 6, 7)
        weight = torch.randn(2, 3, 3, 3)
        offsets = torch.randn(1, 18, 6, 7) * 1.5
        masks = torch.rand(1, 9, 6, 7)
        got = deform_gather(x, offsets, masks, weight)
        want = naive_deform_gather(x, offsets, masks, weight)
        assert (got - want).abs().max() < 1e-5


def test_deform_matches_torchvision():
    from torchvision.ops import deform_conv2d

    torch.manual_seed(12)
    for _ in range(3):
        x = torch.rand(2, 4, 10, 9)
        weight = torch.randn(4, 4, 3, 3)
        offsets = torch.randn(2, 18, 10, 9) * 2.0
        masks = torch.rand(2, 9, 10, 9)
        got = deform_gather(x, offsets, masks, weight)
        want = deform_conv2d(x, offsets, weight, padding=1, mask=masks)
        assert (got - want).abs().max() < 1e-5


def test_deform_mask_range():
    torch.manual_seed(4)
    deform = ControlDeformConv(4)
    with torch.no_grad():
        deform.mask_conv.weight.normal_(0, 3.0)
        deform.mask_conv.bias.normal_(0, 3.0)
    _, masks = deform.branches(torch.randn(2, 4, 8, 8) * 5)
    assert masks.min() >= 0.0 and masks.max() <= 1.0


# ---------------------------------------------------------------------------
# channel attention
# ---------------------------------------------------------------------------

def test_attention_saturated_weights_pass_through():
    att = ControlChannelAttention(8)
    with torch.no_grad():
        att.fc2.weight.zero_()
        att.fc2.bias.fill_(40.0)
    f_u = torch.rand(1, 8, 6, 6)
    f_dc = torch.rand(1, 8, 6, 6)
    assert torch.equal(att(f_u, f_dc), f_dc)


def test_attention_matches_scalar_chain_on_constant_input():
    torch.manual_seed(5)
    att = ControlChannelAttention(8)
    const = torch.rand(8)
    f_u = const.view(1, 8, 1, 1).expand(1, 8, 6, 6).contiguous()
    got = att.weights(f_u).flatten().detach().numpy()
    v = const.numpy().astype(np.float64)
    w1 = att.fc1.weight.detach().numpy().squeeze(-1).squeeze(-1).astype(np.float64)
    b1 = att.fc1.bias.detach().numpy().astype(np.float64)
    w2 = att.fc2.weight.detach().numpy().squeeze(-1).squeeze(-1).astype(np.float64)
    b2 = att.fc2.bias.detach().numpy().astype(np.float64)
    hidden = w1 @ v + b1
    hidden = np.where(hidden >= 0, hidden, 0.2 * hidden)
    want = 1 / (1 + np.exp(-(w2 @ hidden + b2)))
    assert np.abs(got - want).max() < 1e-6


def test_attention_annihilates_zero_input():
    att = ControlChannelAttention(4)
    out = att(torch.rand(1, 4, 5, 5), torch.zeros(1, 4, 5, 5))
    assert torch.all(out == 0)


def test_attention_weights_in_open_unit_interval():
    torch.manual_seed(6)
    att = ControlChannelAttention(8)
    w = att.weights(torch.randn(3, 8, 6, 6))
    assert w.min() > 0.0 and w.max() < 1.0


def test_attention_channel_mismatch_rejected():
    att = ControlChannelAttention(4)
    with pytest.raises(InvalidInputError):
        att(torch.rand(1, 4, 5, 5), torch.rand(1, 8, 5, 5))


# ---------------------------------------------------------------------------
# the full residual block
# ---------------------------------------------------------------------------

def test_block_zero_weights_is_identity():
    block = ControlAdaptiveBlock(8)
    with torch.no_grad():
        for p in block.parameters():
            p.zero_()
    x = torch.rand(1, 8, 8, 8)
    out = block(x, torch.rand(1, 8, 8, 8))
    assert torch.equal(out, x)


def test_block_preserves_shape():
    block = ControlAdaptiveBlock(8)
    x = torch.rand(2, 8, 16, 16)
    assert block(x, torch.rand(2, 8, 16, 16)).shape == x.shape


def test_block_output_depends_on_control():
    torch.manual_seed(7)
    gen = DeblurGenerator(SMALL)
    x = torch.rand(1, 8, 16, 16)
    block = gen.enc1.blocks[0]
    outs = []
    for u in (0.0, 1.0):
        u_f = gen.mapping(expand_control([u], 16, 16))
        outs.append(block(x, gen.resize_control(u_f, 1)))
    assert (outs[0] - outs[1]).norm() > 0


def test_block_shape_mismatch_rejected():
    block = ControlAdaptiveBlock(8)
    with pytest.raises(InvalidInputError):
        block(torch.rand(1, 8, 16, 16), torch.rand(1, 8, 8, 8))


# ---------------------------------------------------------------------------
# whole generator
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("size", [64, 128])
def test_generator_output_shapes(size):
    torch.manual_seed(8)
    gen = DeblurGenerator(SMALL)
    out = gen(torch.rand(1, 3, size, size), [0.5])
    assert [tuple(i.shape[-2:]) for i in out.images] == [
        (size, size), (size // 2, size // 2), (size // 4, size // 4)]
    for img in out.images:
        assert img.shape[1] == 3
        assert torch.isfinite(img).all()


def test_generator_control_path_is_live():
    torch.manual_seed(9)
    gen = DeblurGenerator(GeneratorConfig(base_channels=4, n_blocks_per_stage=1))
    out = gen(torch.rand(1, 3, 32, 32), [0.5])
    out.full.sum().backward()
    grads = [p.grad for p in gen.mapping.parameters()]
    assert any(g is not None and g.abs().max() > 0 for g in grads)


def test_generator_rejects_bad_inputs():
    gen = DeblurGenerator(SMALL)
    with pytest.raises(InvalidInputError):
        gen(torch.rand(1, 3, 30, 30), [0.5])
    with pytest.raises(InvalidInputError):
        gen(torch.rand(1, 3, 32, 32), [1.5])


def test_generator_deterministic():
    torch.manual_seed(10)
    gen = DeblurGenerator(SMALL)
    x = torch.rand(1, 3, 32, 32)
    a = gen(x, [0.3]).full
    b = gen(x, [0.3]).full
    assert torch.equal(a, b)


def test_generator_checkpoint_round_trip(tmp_path):
    from facedeblur.checkpoint import component_payload, load_generator, save_checkpoint

    torch.manual_seed(11)
    gen = DeblurGenerator(SMALL)
    path = tmp_path / "gen.pt"
    save_checkpoint(path, component_payload("generator", gen.config, gen))
    loaded = load_generator(path)
    x = torch.rand(1, 3, 32, 32)
    assert torch.equal(loaded(x, [0.5]).full, gen(x, [0.5]).full)
