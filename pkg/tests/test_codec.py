import torch
import torch.nn as nn

from adaptive_semcom import codec as cd


def cfg(**kw):
    return cd.CodecConfig(**({"width": 16} | kw))


def cond(n=2, M=2):
    return torch.randn(n, 2 * M), torch.rand(n)


def test_encoder_decoder_shapes():
    torch.manual_seed(0)
    c = cfg()
    enc, dec = cd.SemanticEncoder(c), cd.SemanticDecoder(c)
    x = torch.rand(3, 3, 32, 32)
    csi, snr = cond(3)
    z = enc(x, csi, snr)
    assert z.shape == (3, 16, 8, 8)
    y = dec(z, csi, snr)
    assert y.shape == (3, 3, 32, 32) and y.min() >= 0 and y.max() <= 1


def test_paper_layer_sizes():
    enc = cd.SemanticEncoder(cd.CodecConfig())
    convs = [m for m in enc.cem if isinstance(m, nn.Conv2d)]
    assert [(m.in_channels, m.out_channels, m.kernel_size[0], m.stride[0]) for m in convs] == \
        [(3, 64, 7, 1), (64, 128, 3, 2), (128, 256, 3, 2)]
    dec = cd.SemanticDecoder(cd.CodecConfig())
    ups = [m for m in dec.cdm if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d))]
    assert [(m.in_channels, m.out_channels, m.kernel_size[0]) for m in ups] == [(256, 128, 3), (128, 64, 3), (64, 3, 5)]


def test_zero_image_zero_bias_gives_zero_features():
    torch.manual_seed(0)
    enc = cd.SemanticEncoder(cfg())
    for m in enc.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)) and m.bias is not None:
            nn.init.zeros_(m.bias)
    for m in enc.modules():
        if isinstance(m, cd.ChannelConditionAdapter):
            nn.init.ones_(m.scale[2].bias)
    csi, snr = cond(2)
    assert torch.equal(enc(torch.zeros(2, 3, 32, 32), csi, snr), torch.zeros(2, 16, 8, 8))


def test_channel_attention_properties():
    torch.manual_seed(1)
    ca = cd.ChannelAttention(32, 5)
    z = torch.randn(4, 32, 6, 6)
    c = torch.randn(4, 5)
    m = ca.attention_map(z, c)
    assert torch.all((m > 0) & (m < 1))
    nn.init.zeros_(ca.fc2.weight)
    assert torch.allclose(ca(z, c), z / 2)


def test_channel_attention_equivariance():
    torch.manual_seed(2)
    C, d = 16, 5
    ca = cd.ChannelAttention(C, d)
    perm = torch.randperm(C)
    cb = cd.ChannelAttention(C, d)
    with torch.no_grad():
        w1 = ca.fc1.weight.clone()
        cb.fc1.weight.copy_(torch.cat([w1[:, :C][:, perm], w1[:, C:]], 1))
        cb.fc2.weight.copy_(ca.fc2.weight[perm])
    z, c = torch.randn(3, C, 4, 4), torch.randn(3, d)
    assert torch.allclose(cb(z[:, perm], c), ca(z, c)[:, perm], atol=1e-6)


def test_spatial_attention_properties():
    torch.manual_seed(3)
    sa = cd.SpatialAttention()
    z = torch.randn(2, 8, 6, 6)
    m = sa.attention_map(z)
    assert m.shape == (2, 1, 6, 6) and torch.all((m > 0) & (m < 1))
    const = torch.randn(2, 8, 1, 1).expand(2, 8, 12, 12)
    mc = cd.SpatialAttention(kernel=1)
    mc.conv.weight.data.normal_()
    inner = mc.attention_map(const)
    assert torch.allclose(inner, inner[..., :1, :1].expand_as(inner))
    nn.init.zeros_(sa.conv.weight)
    assert torch.allclose(sa(z), z / 2)


def test_condition_adapter():
    torch.manual_seed(4)
    cc = cd.ChannelConditionAdapter(12, 5)
    assert cc.scale[0].in_features == 12 + 5
    z, c = torch.randn(2, 12, 4, 4), torch.randn(2, 5)
    assert torch.allclose(cc(z, c), z)
    nn.init.zeros_(cc.scale[2].bias)
    cc.bias[2].bias.data.normal_()
    _, bf = cc.factors(z, c)
    assert torch.allclose(cc(z, c), bf[..., None, None].expand_as(z))


def test_mhsa_properties():
    torch.manual_seed(5)
    m = cd.MultiHeadSelfAttention(64, 4)
    x = torch.randn(3, 16, 64)
    for a in m.attention_maps(x):
        assert torch.allclose(a.sum(-1), torch.ones(3, 16))
    assert m(x).shape == x.shape
    for q, k in zip(m.q, m.k):
        nn.init.zeros_(q.weight)
        nn.init.zeros_(k.weight)
    ref = x + sum(v(x).mean(-2, keepdim=True).expand_as(x) for v in m.v)
    assert torch.allclose(m(x), ref, atol=1e-6)


def test_ablation_toggles():
    x = torch.rand(2, 3, 32, 32)
    csi, snr = cond(2)
    enc = cd.SemanticEncoder(cfg(attention=False))
    assert isinstance(enc.caem["att1"], cd._Identity2)
    assert enc(x, csi, snr).shape == (2, 16, 8, 8)
    torch.manual_seed(6)
    a = cd.SemanticEncoder(cfg(csi_feedback=False))
    assert torch.equal(a(x, csi, snr), a(x, torch.randn(2, 4), torch.rand(2)))


def test_paired_round_trip():
    z = torch.randn(2, 16, 8, 8)
    p = cd.to_paired(z)
    assert p.shape == (2, 8, 128)
    assert torch.equal(p[:, 3, :64], z[:, 3].flatten(-2)) and torch.equal(p[:, 3, 64:], z[:, 11].flatten(-2))
    assert torch.equal(cd.from_paired(p), z)


def test_encoder_gradient_finite_differences():
    torch.manual_seed(7)
    enc = cd.SemanticEncoder(cfg(width=8)).double()
    x = torch.rand(4, 3, 32, 32, dtype=torch.float64)
    csi, snr = torch.randn(4, 4, dtype=torch.float64), torch.rand(4, dtype=torch.float64)
    w = torch.randn(4, 16, 8, 8, dtype=torch.float64)
    f = lambda: (enc(x, csi, snr) * w).sum()
    params = dict(enc.named_parameters())
    f().backward()
    gen = torch.Generator().manual_seed(0)
    for name in ("cem.0.weight", "caem.res1.conv1.weight", "caem.cc2.scale.0.weight", "caem.out.bias"):
        p = params[name]
        i = torch.randint(0, p.numel(), (1,), generator=gen).item()
        flat = p.data.view(-1)
        old = flat[i].item()
        flat[i] = old + 1e-6
        up = f().item()
        flat[i] = old - 1e-6
        dn = f().item()
        flat[i] = old
        fd = (up - dn) / 2e-6
        g = p.grad.view(-1)[i].item()
        assert abs(g - fd) <= 1e-3 * max(abs(fd), 1e-6), name
