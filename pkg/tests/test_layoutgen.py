import numpy as np
import pytest
import torch

from subjectpaint.data import SyntheticGrammar, extract_subject, synth_generate
from subjectpaint.diffusion import denoising_loss
from subjectpaint.encoders import SubjectAugmentConfig
from subjectpaint.layoutgen import (LayoutConditioner, LayoutDenoiser, LayoutModelConfig, LayoutTrainConfig,
                                    LayoutTrainingExample, sample_layouts, sample_layouts_batch, scaled_schedule,
                                    train_layout_model)
from subjectpaint.structures import LayoutError, ObjectSpec, SubjectCountError

SMALL = LayoutModelConfig(width=32, depth=2, heads=2, T=20)


@pytest.fixture(scope="module")
def scenes():
    return synth_generate(SyntheticGrammar(), 12, np.random.default_rng(0))


def _cond(scenes, n=None):
    return LayoutConditioner().encode([extract_subject(s) for s in scenes], [s.objects for s in scenes],
                                      [s.caption for s in scenes], None, n)


def test_token_layout_and_null_slot(scenes):
    torch.manual_seed(0)
    model = LayoutDenoiser(SMALL)
    s = scenes[0]
    y = _cond([s])
    g = torch.zeros(1, len(s.layout), 4)
    tok = model.build_object_tokens(g, y["phrases"], y["visual"], y["subject_mask"])
    assert tok.shape[-1] == 2 * 4 * 8 + 64 + 64 == model.token_dim
    vis = tok[0, :, -64:]
    for i in range(len(s.layout)):
        expected = y["visual"][0] if i == s.subject_index else model.null_vector
        torch.testing.assert_close(vis[i], expected.detach())


def test_single_subject_scene_uses_visual_slot(scenes):
    torch.manual_seed(0)
    model = LayoutDenoiser(SMALL)
    y = LayoutConditioner().encode([extract_subject(scenes[0])], [[ObjectSpec("dog", True)]], ["a dog"], None)
    tok = model.build_object_tokens(torch.zeros(1, 1, 4), y["phrases"], y["visual"], y["subject_mask"])
    torch.testing.assert_close(tok[0, 0, -64:], y["visual"][0])


@pytest.mark.parametrize("n", [1, 3, 8])
def test_output_shape(n):
    torch.manual_seed(0)
    model = LayoutDenoiser(SMALL).eval()
    objs = [ObjectSpec(f"p{i}", i == 0) for i in range(n)]
    y = LayoutConditioner().encode([np.ones((4, 4, 3))], [objs], ["cap"], None)
    out = model(torch.randn(1, n, 4), torch.tensor([5]), y)
    assert out.shape == (1, n, 4)


def test_permutation_equivariance(scenes):
    torch.manual_seed(0)
    model = LayoutDenoiser(LayoutModelConfig()).eval()
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for s in scenes[:6]:
            y = _cond([s])
            n = len(s.layout)
            z = torch.randn(1, n, 4, generator=gen)
            t = torch.randint(1, 101, (1,), generator=gen)
            base = model(z, t, y)
            perm = torch.randperm(n, generator=gen)
            yp = dict(y, phrases=y["phrases"][:, perm], subject_mask=y["subject_mask"][:, perm],
                      pad_mask=y["pad_mask"][:, perm])
            out = model(z[:, perm], t, yp)
            assert (out - base[:, perm]).abs().max().item() <= 1e-5


def test_padding_does_not_change_real_outputs(scenes):
    torch.manual_seed(0)
    model = LayoutDenoiser(SMALL).eval()
    s = scenes[0]
    n = len(s.layout)
    y, yp = _cond([s]), _cond([s], n + 3)
    z = torch.randn(1, n, 4)
    zp = torch.cat([z, torch.randn(1, 3, 4)], dim=1)
    with torch.no_grad():
        a = model(z, torch.tensor([3]), y)
        b = model(zp, torch.tensor([3]), yp)[:, :n]
    assert (a - b).abs().max().item() <= 1e-5


def test_null_vector_receives_gradient(scenes):
    torch.manual_seed(0)
    model = LayoutDenoiser(SMALL)
    y = _cond(scenes[:4])
    n = y["phrases"].shape[1]
    from subjectpaint.layoutgen import _batch_geometry

    z0 = _batch_geometry([s.layout for s in scenes[:4]], n)
    loss = denoising_loss(model, z0, y, scaled_schedule(SMALL), torch.Generator().manual_seed(0),
                          mask=(~y["pad_mask"])[..., None].float())
    loss.backward()
    assert model.null_vector.grad is not None and model.null_vector.grad.abs().sum() > 0


def test_subject_rule_enforced():
    torch.manual_seed(0)
    model = LayoutDenoiser(SMALL)
    with pytest.raises(SubjectCountError):
        sample_layouts(model, np.ones((4, 4, 3)), [ObjectSpec("a"), ObjectSpec("b")], "c", 2, 0)
    with pytest.raises(LayoutError):
        LayoutConditioner().encode([np.ones((4, 4, 3))], [[]], ["c"], None)
    with pytest.raises(ValueError):
        sample_layouts(model, np.ones((4, 4, 3)), [ObjectSpec("a", True)], "c", 0, 0)


def test_sampling_contract_and_determinism(scenes):
    torch.manual_seed(0)
    model = LayoutDenoiser(SMALL)
    s = scenes[1]
    a = sample_layouts(model, extract_subject(s), s.objects, s.caption, 5, seed=4)
    b = sample_layouts(model, extract_subject(s), s.objects, s.caption, 5, seed=4)
    assert a == b and len(a) == 5
    for lay in a:
        assert lay.objects == s.objects and lay.caption == s.caption
        lay.validate()


def test_batch_sampling_with_mixed_sizes(scenes):
    torch.manual_seed(0)
    model = LayoutDenoiser(SMALL)
    batch = scenes[:3]
    out = sample_layouts_batch(model, [extract_subject(s) for s in batch], [s.objects for s in batch],
                               [s.caption for s in batch], 2, seed=0)
    assert [len(o) for o in out] == [2, 2, 2]
    assert [len(o[0]) for o in out] == [len(s.layout) for s in batch]


def _examples(scenes):
    return [LayoutTrainingExample(extract_subject(s), s.layout) for s in scenes]


def test_training_deterministic(scenes):
    cfg = LayoutTrainConfig(steps=5, batch_size=4)
    _, la = train_layout_model(_examples(scenes), SMALL, cfg, seed=3)
    _, lb = train_layout_model(_examples(scenes), SMALL, cfg, seed=3)
    np.testing.assert_array_equal(la.losses(), lb.losses())
    assert la.optimizer_state is not None
    with pytest.raises(ValueError):
        train_layout_model([], SMALL, cfg, seed=0)


def test_overfit_single_sample_halves_loss(scenes):
    cfg = LayoutTrainConfig(steps=500, batch_size=16, lr=1e-3, augment=SubjectAugmentConfig())
    model_cfg = LayoutModelConfig(width=64, depth=2, heads=2, T=100)
    _, log = train_layout_model(_examples(scenes[:1]), model_cfg, cfg, seed=0)
    losses = log.losses()
    assert np.isfinite(losses).all()
    assert losses[-50:].mean() <= 0.5 * losses[:10].mean()


def test_on_log_callback(scenes):
    seen = []
    train_layout_model(_examples(scenes), SMALL, LayoutTrainConfig(steps=6, batch_size=2, log_every=3), 0,
                       on_log=seen.append)
    assert [r["step"] for r in seen] == [3, 6] and set(seen[0]) == {"step", "loss", "wall"}
