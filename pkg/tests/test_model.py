import numpy as np
import pytest
import torch

from quizreg.geometry import warp_translate_tensor
from quizreg.losses import l_pair, ncc
from quizreg.model import ModelConfig, QuizNet, load_checkpoint, save_checkpoint
from quizreg.synthetic import SyntheticPairSpec, gen_pair
from quizreg.frames import prepare_pair

from helpers import smooth_phantom

SMALL = dict(channels=16, tf_layers=2, tf_heads=2, tf_dim=32, mlp_hidden=32)


def make_model(size=32, seed=0, **kw):
    torch.manual_seed(seed)
    return QuizNet(ModelConfig(input_size=size, **{**SMALL, **kw}))


def perturb_head(model, seed=1):
    """Stand-in for a few optimiser steps: give the zero-initialised layers small random values."""
    g = torch.Generator().manual_seed(seed)
    zero_init = [model.quizzer.head[-1].weight]
    if model.quizzer.matcher is not None:
        zero_init.append(model.quizzer.matcher.to_q.weight)
    with torch.no_grad():
        for w in zero_init:
            w.copy_(torch.randn(w.shape, generator=g) * 0.05)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(input_size=36)
    with pytest.raises(ValueError):
        ModelConfig(tf_dim=30, tf_heads=4)


@pytest.mark.parametrize("side,channels", [(32, 16), (64, 64)])
def test_feature_map_dimension_law(side, channels):
    model = make_model(side, channels=channels)
    x = torch.rand(1, 1, side, side, side)
    fm = model.encode(x, torch.rand_like(x))
    assert fm.shape == (1, channels, side // 8, side // 8, side // 4)
    assert torch.isfinite(fm).all()


def test_feature_map_paper_scale():
    model = QuizNet(ModelConfig(input_size=128, channels=128, tf_layers=1, tf_dim=32, tf_heads=2, mlp_hidden=32))
    with torch.no_grad():
        fm = model.encode(torch.rand(1, 1, 128, 128, 128), torch.rand(1, 1, 128, 128, 128))
    assert fm.shape == (1, 128, 16, 16, 32)


def test_encode_shape_mismatch():
    model = make_model()
    with pytest.raises(ValueError):
        model.encode(torch.rand(1, 1, 32, 32, 32), torch.rand(1, 1, 16, 16, 16))


def test_weight_sharing_identical_halves():
    model = make_model()
    x = torch.rand(2, 1, 32, 32, 32)
    fm = model.encode(x, x.clone())
    half = fm.shape[-1] // 2
    assert torch.equal(fm[..., :half], fm[..., half:])


@pytest.mark.parametrize("n", [1, 64])
def test_quiz_shapes_and_zero_init(n):
    model = make_model()
    x = torch.rand(1, 1, 32, 32, 32)
    fm = model.encode(x, torch.rand_like(x))
    d = model.quiz(fm, torch.rand(1, n, 3) * 31)
    assert d.shape == (1, n, 3)
    assert torch.count_nonzero(d) == 0


def test_quiz_rejects_bad_queries():
    model = make_model()
    fm = model.encode(torch.rand(1, 1, 32, 32, 32), torch.rand(1, 1, 32, 32, 32))
    with pytest.raises(ValueError):
        model.quiz(fm, torch.zeros(1, 0, 3))
    with pytest.raises(ValueError):
        model.quiz(fm, torch.tensor([[[np.nan, 1.0, 1.0]]]))


def test_quiz_permutation_equivariant_exact():
    model = make_model()
    perturb_head(model)
    x = torch.rand(2, 1, 32, 32, 32)
    fm = model.encode(x, torch.rand_like(x))
    q = torch.rand(2, 40, 3) * 31
    perm = torch.randperm(40, generator=torch.Generator().manual_seed(3))
    d = model.quiz(fm, q)
    assert torch.equal(model.quiz(fm, q[:, perm]), d[:, perm])
    bound = model.config.output_scale * 10
    assert torch.isfinite(d).all() and d.abs().max() < bound


def test_local_match_offsets_antisymmetric():
    m = make_model().quizzer.matcher
    o = m.offsets
    assert torch.equal(o[m.pos_idx], -o[m.neg_idx])
    assert len(m.pos_idx) == (len(o) - 1) // 2 and not o[len(o) // 2].any()


def test_forward_deterministic():
    model = make_model()
    perturb_head(model)
    model.eval()
    x, y, q = torch.rand(1, 1, 32, 32, 32), torch.rand(1, 1, 32, 32, 32), torch.rand(1, 5, 3) * 31
    a, _ = model(x, y, q)
    b, _ = model(x, y, q)
    assert torch.equal(a, b)


def test_reduce_mean_displacement():
    r = QuizNet.reduce_mean_displacement
    assert torch.equal(r(torch.tensor([[1.0, 2.0, 3.0]])), torch.tensor([1.0, 2.0, 3.0]))
    assert torch.equal(r(torch.tensor([[1.0, 0, 0], [-1.0, 0, 0]])), torch.zeros(3))
    d = torch.from_numpy(np.random.default_rng(0).normal(size=(100, 3)))
    reversed_sum = d.numpy()[::-1].sum(axis=0) / 100
    np.testing.assert_allclose(r(d).numpy(), reversed_sum, atol=1e-6)


def test_position_reset_identity_and_alignment():
    search = torch.rand(1, 1, 12, 12, 12)
    assert torch.equal(QuizNet.position_reset(search, torch.zeros(1, 3)), search)

    pair = gen_pair(SyntheticPairSpec(side=32, crop_side=24, n_blobs=6, true_shift=(3, -2, 1), seed=4))
    mp = prepare_pair(pair.reference, pair.search, 32, normalize=False)
    q = mp.ref_map.to_model(pair.q.points)
    qt = mp.search_map.to_model(pair.q_t.points)
    t = QuizNet.reduce_mean_displacement(torch.from_numpy(qt - q))
    warped = QuizNet.position_reset(mp.search[None].double(), t[None])[0, 0].numpy()
    ref = mp.reference[0].numpy()
    # the warped search is nonzero where v + t falls inside the centred 24^3 search block
    lo = (4 - np.array([3, -2, 1]))[::-1]
    sl = tuple(slice(int(a), int(a) + 24) for a in lo)
    np.testing.assert_allclose(warped[sl], ref[sl], atol=1e-6)


def test_position_reset_gradient_finite_differences():
    rng = np.random.default_rng(1)
    F = torch.from_numpy(smooth_phantom(16, seed=2).data.astype(np.float64))[None, None]
    M = warp_translate_tensor(F, torch.tensor([[0.6, -0.3, 0.8]], dtype=torch.float64))
    h = 1e-3
    for _ in range(5):
        t0 = rng.uniform(-1.5, 1.5, size=3) + 0.37
        t = torch.tensor(t0[None], requires_grad=True)
        (g,) = torch.autograd.grad(ncc(F, QuizNet.position_reset(M, t)), t)
        fd = np.array([
            (float(ncc(F, QuizNet.position_reset(M, torch.tensor((t0 + h * e)[None]))))
             - float(ncc(F, QuizNet.position_reset(M, torch.tensor((t0 - h * e)[None]))))) / (2 * h)
            for e in np.eye(3)
        ])
        assert np.linalg.norm(g[0].numpy() - fd) / np.linalg.norm(fd) < 1e-3


def test_no_dead_parameters():
    model = make_model()
    perturb_head(model)
    x = torch.rand(2, 1, 32, 32, 32)
    q = torch.rand(2, 6, 3) * 31
    d, _ = model(x, torch.rand_like(x), q)
    l_pair(d, q, q + torch.randn(2, 6, 3) * 4).backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_checkpoint_round_trip(tmp_path):
    model = make_model()
    perturb_head(model)
    save_checkpoint(model, tmp_path / "m.ckpt", {"stage": 1})
    loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"stage": 1}
    assert loaded.config == model.config
    for (k1, v1), (k2, v2) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert k1 == k2 and torch.equal(v1, v2)


def test_load_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.ckpt")
