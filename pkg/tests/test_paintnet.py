import numpy as np
import pytest
import torch

from subjectpaint.data import SyntheticGrammar, extract_subject, synth_generate
from subjectpaint.encoders import BLANK_VALUE, ToyTextEncoder
from subjectpaint.paintnet import (DegenerateBoxError, GatedSelfAttention, GroundingNet, InconsistentMaskError,
                                   NoInstancesError, PaintConditioner, PaintModelConfig, PaintTrainConfig, PaintUNet,
                                   WidthMismatchError, bbox_to_pixel_rect, build_conditioning_image,
                                   build_grounding_tokens, composite, gated_self_attention, generate, generate_batch,
                                   paint_forward, pretrain_base, random_reveal_mask, rescale_and_paste,
                                   sample_training_condition, train_paintnet)
from subjectpaint.structures import BBox, Layout, ObjectSpec, SceneSample

CFG = PaintModelConfig(T=10)


@pytest.fixture(scope="module")
def scenes():
    return synth_generate(SyntheticGrammar(), 16, np.random.default_rng(0))


def _rgba(h, w, seed=0):
    img = np.random.default_rng(seed).uniform(size=(h, w, 4)).astype(np.float32)
    img[..., 3] = 1.0
    return img


# -- pixel operations -------------------------------------------------------


def test_paste_full_canvas():
    subj = _rgba(8, 4)
    pasted, m = rescale_and_paste(subj, BBox(0.5, 0.5, 1.0, 1.0), (16, 16))
    assert np.all(m == 0)
    np.testing.assert_array_equal(pasted, np.repeat(np.repeat(subj[..., :3], 2, 0), 4, 1))


def test_paste_native_size_is_identity():
    subj = _rgba(5, 7)
    bb = BBox.from_xywh(3, 2, 7, 5, 16, 16)
    pasted, m = rescale_and_paste(subj, bb, (16, 16))
    np.testing.assert_array_equal(pasted[2:7, 3:10], subj[..., :3])
    assert m.sum() == 16 * 16 - 35 and np.all(pasted[m == 1] == BLANK_VALUE)


def test_paste_double_size_blocks():
    subj = _rgba(3, 3)
    pasted, _ = rescale_and_paste(subj, BBox.from_xywh(2, 2, 6, 6, 16, 16), (16, 16))
    region = pasted[2:8, 2:8]
    for y in range(3):
        for x in range(3):
            assert np.all(region[2 * y:2 * y + 2, 2 * x:2 * x + 2] == subj[y, x, :3])


def test_paste_alpha_defines_mask():
    subj = _rgba(4, 4)
    subj[0, :, 3] = 0
    _, m = rescale_and_paste(subj, BBox.from_xywh(0, 0, 4, 4, 8, 8), (8, 8))
    assert m[0, :4].tolist() == [1, 1, 1, 1] and np.all(m[1:4, :4] == 0)


def test_paste_degenerate():
    with pytest.raises(DegenerateBoxError):
        rescale_and_paste(_rgba(4, 4), BBox(0.5, 0.5, 0.01, 0.5), (16, 16))


def test_paste_bilinear_flag():
    subj = _rgba(4, 4)
    pasted, m = rescale_and_paste(subj, BBox(0.5, 0.5, 0.5, 0.5), (16, 16), resample="bilinear")
    assert (m == 0).sum() == 64 and pasted.min() >= 0 and pasted.max() <= 1
    with pytest.raises(ValueError):
        rescale_and_paste(subj, BBox(0.5, 0.5, 0.5, 0.5), (16, 16), resample="cubic")


def test_pixel_rect_commutes_with_integer_shift():
    rng = np.random.default_rng(0)
    for _ in range(200):
        b = BBox(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.3, 2))
        dx = int(rng.integers(-5, 6))
        r, r2 = bbox_to_pixel_rect(b, 32, 32), bbox_to_pixel_rect(b.translated(dx / 32, 0), 32, 32)
        assert (r2[0] - r[0], r2[2] - r[2], r2[1], r2[3]) == (dx, dx, r[1], r[3])


def test_conditioning_image():
    pasted = np.random.default_rng(1).uniform(size=(8, 8, 3)).astype(np.float32)
    c = build_conditioning_image(pasted, np.ones((8, 8), dtype=np.float32))
    assert np.all(c == -1)
    m = np.ones((8, 8), dtype=np.float32)
    m[2:4, 2:4] = 0
    pasted[2, 2] = 1.0
    c = build_conditioning_image(pasted, m)
    assert c[2, 2, 0] == 1.0
    vals = c.reshape(-1)
    assert np.all((vals == -1) | ((vals >= 0) & (vals <= 1)))
    np.testing.assert_array_equal((c[..., 0] == -1), m == 1)
    with pytest.raises(InconsistentMaskError):
        build_conditioning_image(pasted, np.ones((4, 4)))
    with pytest.raises(InconsistentMaskError):
        build_conditioning_image(pasted, np.full((8, 8), 0.5))


def test_composite_against_elementwise_oracle():
    rng = np.random.default_rng(2)
    sample, pasted = rng.uniform(size=(2, 16, 16, 3)).astype(np.float32)
    m = (rng.uniform(size=(16, 16)) > 0.5).astype(np.float32)
    out = composite(sample, pasted, m)
    for y in range(16):
        for x in range(16):
            expected = sample[y, x] if m[y, x] == 1 else pasted[y, x]
            assert np.array_equal(out[y, x], expected)
    np.testing.assert_array_equal(composite(sample, pasted, np.zeros((16, 16))), pasted)
    np.testing.assert_array_equal(composite(sample, pasted, np.ones((16, 16))), sample)


def test_instance_condition(scenes):
    s = scenes[0]
    cond, m, gt = sample_training_condition(s, "instance", np.random.default_rng(0))
    assert any(np.array_equal(m == 0, inst) for inst in s.instance_masks)
    assert gt is s.image
    a = sample_training_condition(s, "instance", np.random.default_rng(5))
    b = sample_training_condition(s, "instance", np.random.default_rng(5))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_random_condition_coverage(scenes):
    rng = np.random.default_rng(0)
    fractions = [(random_reveal_mask(32, 32, rng) == 0).mean() for _ in range(300)]
    assert min(fractions) >= 0.1 and max(fractions) <= 0.6
    a = sample_training_condition(scenes[0], "random", np.random.default_rng(3))
    b = sample_training_condition(scenes[0], "random", np.random.default_rng(3))
    assert np.array_equal(a[1], b[1])


def test_condition_errors(scenes):
    s = scenes[0]
    empty = SceneSample(s.image, s.layout, np.zeros_like(s.instance_masks), s.subject_index)
    with pytest.raises(NoInstancesError):
        sample_training_condition(empty, "instance", np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_training_condition(s, "brush", np.random.default_rng(0))


# -- network pieces ---------------------------------------------------------


def test_gated_self_attention_identity_and_token_count():
    torch.manual_seed(0)
    layer = GatedSelfAttention(16, 2)
    v, d = torch.randn(2, 9, 16), torch.randn(2, 3, 16)
    assert torch.equal(gated_self_attention(v, d, layer), v)
    with torch.no_grad():
        layer.gamma.fill_(0.7)
    for n in (0, 1, 5):
        assert layer(v, torch.randn(2, n, 16)).shape == v.shape
    with pytest.raises(WidthMismatchError):
        layer(v, torch.randn(2, 3, 8))


def test_gated_self_attention_empty_grounding_is_plain_self_attention():
    torch.manual_seed(0)
    layer = GatedSelfAttention(16, 2)
    with torch.no_grad():
        layer.gamma.fill_(0.4)
    v = torch.randn(1, 5, 16)
    expected = v + np.tanh(0.4) * layer.attn(layer.norm(v))
    torch.testing.assert_close(layer(v, torch.zeros(1, 0, 16)), expected)


def test_gated_self_attention_padding_ignored():
    torch.manual_seed(0)
    layer = GatedSelfAttention(16, 2)
    with torch.no_grad():
        layer.gamma.fill_(1.0)
    v, d = torch.randn(1, 5, 16), torch.randn(1, 2, 16)
    padded = torch.cat([d, torch.randn(1, 3, 16)], dim=1)
    pad = torch.tensor([[False, False, True, True, True]])
    torch.testing.assert_close(layer(v, padded, pad), layer(v, d), atol=1e-6, rtol=0)


def test_gamma_gradient_finite_differences():
    torch.manual_seed(0)
    layer = GatedSelfAttention(8, 2).double()
    v, d = torch.randn(2, 6, 8, dtype=torch.float64), torch.randn(2, 3, 8, dtype=torch.float64)
    for g0 in (0.0, 0.3, -1.2):
        with torch.no_grad():
            layer.gamma.fill_(g0)
        layer.zero_grad()
        layer(v, d).norm().backward()
        analytic = layer.gamma.grad.item()
        h = 1e-5
        vals = []
        for sign in (1, -1):
            with torch.no_grad():
                layer.gamma.fill_(g0 + sign * h)
                vals.append(layer(v, d).norm().item())
        numeric = (vals[0] - vals[1]) / (2 * h)
        assert abs(analytic - numeric) / max(abs(numeric), 1e-12) < 1e-4


def test_grounding_tokens():
    torch.manual_seed(0)
    net = GroundingNet(64, 8, 32)
    text = ToyTextEncoder()
    boxes = [BBox(0.3, 0.4, 0.2, 0.2), BBox(0.3, 0.4, 0.2, 0.2), BBox(0.35, 0.4, 0.2, 0.2)]
    d = build_grounding_tokens(net, text, ["dog", "dog", "dog"], boxes)
    assert d.shape == (3, 32)
    assert torch.equal(d[0], d[1]) and (d[0] - d[2]).norm() > 0
    with pytest.raises(ValueError):
        build_grounding_tokens(net, text, ["dog"], boxes)


def _batch(scenes, n=4):
    rng = np.random.default_rng(0)
    conds = [sample_training_condition(s, "instance", rng)[0] for s in scenes[:n]]
    return PaintConditioner().encode(conds, [s.layout for s in scenes[:n]])


def test_adapter_identity_at_init(scenes):
    torch.manual_seed(0)
    net = PaintUNet(CFG).eval()
    y = _batch(scenes)
    z = torch.randn(4, 3, 32, 32)
    t = torch.tensor([1, 3, 7, 10])
    with torch.no_grad():
        full, base = paint_forward(net, z, t, y), net.base_forward(z, t, y)
        assert (full - base).abs().max().item() <= 1e-6
        y2 = dict(y, cond=torch.rand_like(y["cond"]))
        assert torch.equal(net(z, t, y2), full)


def test_parameter_partition():
    net = PaintUNet(CFG)
    adapters, base = set(net.adapter_parameter_names()), set(net.base_parameter_names())
    assert adapters and base and not adapters & base
    assert any(".gsa." in n for n in adapters) and any(n.startswith("control.") for n in adapters)
    assert not any(".gsa." in n for n in base)


def test_frozen_base_gets_no_gradient_and_checksum_stable(scenes):
    torch.manual_seed(0)
    net, log = train_paintnet(scenes, CFG, PaintTrainConfig(steps=3, batch_size=2), seed=0)
    # a forward/backward with the training partition leaves base grads empty
    base = set(net.base_parameter_names())
    y = _batch(scenes, 2)
    net(torch.randn(2, 3, 32, 32), torch.tensor([2, 5]), y).pow(2).mean().backward()
    for n, p in net.named_parameters():
        if n in base:
            assert p.grad is None or p.grad.abs().sum() == 0
    checksum = net.base_checksum()
    train_paintnet(scenes, CFG, PaintTrainConfig(steps=3, batch_size=2), seed=1, model=net)
    assert net.base_checksum() == checksum
    assert len(log.records) == 3


def test_conditioning_becomes_live_after_training(scenes):
    torch.manual_seed(0)
    net = PaintUNet(CFG)
    train_paintnet(scenes, CFG, PaintTrainConfig(steps=3, batch_size=2, lr=1e-2), seed=0, model=net)
    y = _batch(scenes, 2)
    z, t = torch.randn(2, 3, 32, 32), torch.tensor([2, 5])
    with torch.no_grad():
        assert not torch.equal(net(z, t, y), net(z, t, dict(y, cond=torch.rand_like(y["cond"]))))


def test_pretrain_base_touches_base_only(scenes):
    torch.manual_seed(0)
    net = PaintUNet(CFG)
    adapters = {n: p.detach().clone() for n, p in net.named_parameters()
                if n in set(net.adapter_parameter_names()) and not n.startswith("control.encoder.")}
    before = net.base_checksum()
    pretrain_base(net, scenes, PaintTrainConfig(steps=2, batch_size=2), seed=0)
    assert net.base_checksum() != before
    params = dict(net.named_parameters())
    for n, v in adapters.items():
        assert torch.equal(params[n], v), n
    # control copy re-synced to the updated base encoder
    enc = dict(net.encoder.named_parameters())
    for n, p in net.control.encoder.named_parameters():
        assert torch.equal(p, enc[n])


# -- generation -------------------------------------------------------------


def test_generation_preserves_subject_and_is_deterministic(scenes):
    torch.manual_seed(0)
    net = PaintUNet(CFG)
    subj = [extract_subject(s) for s in scenes[:4]]
    a = generate_batch(net, subj, [s.layout for s in scenes[:4]], seed=3)
    b = generate_batch(net, subj, [s.layout for s in scenes[:4]], seed=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image)
        keep = x.mask == 0
        assert keep.any()
        assert np.array_equal(x.image[keep], x.pasted[keep])
        np.testing.assert_array_equal(x.image[~keep], x.raw_sample[~keep])


def test_generation_full_cover_returns_subject(scenes):
    torch.manual_seed(0)
    net = PaintUNet(CFG)
    subj = _rgba(8, 8)
    lay = Layout([ObjectSpec("dog", True)], [BBox(0.5, 0.5, 1.0, 1.0)], "a dog")
    g = generate(net, subj, lay, seed=0)
    np.testing.assert_array_equal(g.image, g.pasted)
