import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dsva.core import Config, ShapeError
from dsva.encoder import Encoder, embed_patches, encode, mhsa, patchify, self_attention, unpatchify


def _encoder(grid=2, patch_side=2, channels=1, dim=8, layers=2, heads=2, head_dim=4, seed=0):
    enc = Encoder(grid, patch_side, channels, dim, layers, heads, head_dim).double()
    g = torch.Generator().manual_seed(seed)
    enc.reset_parameters(g)
    with torch.no_grad():
        for name, p in enc.named_parameters():
            # spread LN/bias parameters away from their trivial init
            if "bias" in name or "ln" in name:
                p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
            else:
                p.mul_(10)
    return enc


def test_patch_count_at_full_size():
    patches = patchify(torch.zeros(224, 224, 3), 7)
    assert patches.shape == (49, 32 * 32 * 3)


def test_patch_layout_by_hand():
    img = torch.arange(1.0, 17.0).reshape(4, 4, 1)
    p = patchify(img, 2)
    assert p[0].tolist() == [1, 2, 5, 6]
    assert p[3].tolist() == [11, 12, 15, 16]


def test_constant_image_gives_identical_patches():
    p = patchify(torch.full((6, 6, 3), 0.3), 3)
    assert torch.equal(p, p[:1].expand_as(p))


def test_patchify_errors_and_round_trip():
    with pytest.raises(ShapeError):
        patchify(torch.zeros(5, 6, 3), 2)
    img = torch.rand(2, 8, 8, 3)
    assert torch.equal(unpatchify(patchify(img, 4), 4, 3), img)


def test_embed_patches():
    b = torch.tensor([1.0, 2.0, 3.0])
    z = embed_patches(torch.zeros(4, 5), torch.rand(5, 3), b, torch.zeros(4, 3))
    assert torch.equal(z, b.expand(4, 3))
    x = torch.rand(4, 5, dtype=torch.float64)
    assert torch.equal(embed_patches(x, torch.eye(5, dtype=torch.float64), torch.zeros(5, dtype=torch.float64), torch.zeros(4, 5, dtype=torch.float64)), x)
    rng = np.random.default_rng(0)
    x, w, bias, pos = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=3), rng.normal(size=(4, 3))
    got = embed_patches(*(torch.tensor(a) for a in (x, w, bias, pos))).numpy()
    ref = np.array(oracles.matmul(x.tolist(), w.tolist())) + bias + pos
    assert np.abs(got - ref).max() < 1e-12
    with pytest.raises(ShapeError):
        embed_patches(torch.zeros(4, 5), torch.zeros(6, 3), torch.zeros(3), torch.zeros(4, 3))


def test_self_attention_single_token_and_uniform():
    v = torch.rand(1, 3, dtype=torch.float64)
    out, w = self_attention(torch.rand(1, 3, dtype=torch.float64), torch.rand(1, 3, dtype=torch.float64), v, return_weights=True)
    assert w.item() == 1.0 and torch.equal(out, v)
    v = torch.rand(4, 2, dtype=torch.float64)
    out, w = self_attention(torch.rand(4, 3, dtype=torch.float64), torch.zeros(4, 3, dtype=torch.float64), v, return_weights=True)
    assert torch.allclose(w, torch.full((4, 4), 0.25, dtype=torch.float64), atol=0, rtol=1e-15)
    assert torch.allclose(out, v.mean(0).expand(4, 2), atol=1e-15)


def test_self_attention_small_oracle():
    rng = np.random.default_rng(1)
    q, k, v = (rng.normal(size=(3, 2)) for _ in range(3))
    out = self_attention(torch.tensor(q), torch.tensor(k), torch.tensor(v))
    ref, _ = oracles.self_attention(q.tolist(), k.tolist(), v.tolist())
    assert np.abs(out.numpy() - ref).max() < 1e-12


def test_mhsa_single_head():
    rng = np.random.default_rng(2)
    z = torch.tensor(rng.normal(size=(4, 6)))
    qkv = torch.tensor(rng.normal(size=(6, 9)))
    proj = torch.tensor(rng.normal(size=(3, 6)))
    expected = self_attention(z @ qkv[:, :3], z @ qkv[:, 3:6], z @ qkv[:, 6:]) @ proj
    assert torch.allclose(mhsa(z, qkv, proj, 1), expected, atol=1e-13)


def test_mhsa_identity_projection_concatenates_heads():
    rng = np.random.default_rng(3)
    z = torch.tensor(rng.normal(size=(3, 4)))
    qkv = torch.tensor(rng.normal(size=(4, 12)))
    out = mhsa(z, qkv, torch.eye(4, dtype=torch.float64), 2)
    heads = [self_attention(z @ qkv[:, h * 2:(h + 1) * 2], z @ qkv[:, 4 + h * 2:4 + (h + 1) * 2], z @ qkv[:, 8 + h * 2:8 + (h + 1) * 2]) for h in range(2)]
    assert torch.allclose(out, torch.cat(heads, dim=-1), atol=1e-13)


def test_mhsa_two_head_oracle():
    rng = np.random.default_rng(4)
    z, qkv, proj = rng.normal(size=(4, 5)), rng.normal(size=(5, 18)), rng.normal(size=(6, 5))
    got = mhsa(torch.tensor(z), torch.tensor(qkv), torch.tensor(proj), 2).numpy()
    assert np.abs(got - oracles.mhsa(z.tolist(), qkv.tolist(), proj.tolist(), 2)).max() < 1e-12
    with pytest.raises(ShapeError):
        mhsa(torch.tensor(z), torch.tensor(qkv), torch.zeros(5, 5, dtype=torch.float64), 2)


def test_zero_layers_returns_embedding():
    enc = _encoder(layers=0)
    img = torch.rand(4, 4, 1, dtype=torch.float64)
    z, attn = encode(img, enc, return_attention=True)
    z0 = embed_patches(patchify(img, 2), enc.patch_weight, enc.patch_bias, enc.positional)
    assert torch.equal(z, z0) and attn == []


def test_zero_weights_leave_residual_stream():
    enc = _encoder()
    with torch.no_grad():
        for block in enc.blocks:
            block.proj_weight.zero_()
            block.fc2_weight.zero_()
            block.fc2_bias.zero_()
    img = torch.rand(4, 4, 1, dtype=torch.float64)
    z0 = embed_patches(patchify(img, 2), enc.patch_weight, enc.patch_bias, enc.positional)
    assert torch.equal(encode(img, enc), z0)


def test_encoder_matches_unfused_oracle():
    enc = _encoder()
    img = torch.rand(4, 4, 1, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    z = encode(img, enc)
    params = {k: v.tolist() for k, v in enc.state_dict().items()}
    ref = oracles.encoder_forward(patchify(img, 2).tolist(), params, layers=2, heads=2)
    assert np.abs(z.detach().numpy() - np.array(ref)).max() < 1e-10


def test_attention_rows_normalized():
    enc = _encoder(grid=4, patch_side=2, channels=3, dim=16, heads=4, head_dim=4)
    _, attn = encode(torch.rand(3, 8, 8, 3, dtype=torch.float64), enc, return_attention=True)
    assert len(attn) == 2
    for w in attn:
        assert w.shape == (3, 4, 16, 16)
        assert (w.sum(-1) - 1).abs().max() < 1e-9


def _run_blocks(enc, z):
    for block in enc.blocks:
        z = block(z)
    return z


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_permutation_equivariance_without_positions(seed):
    enc = _encoder(grid=3, patch_side=1, channels=2, dim=8, seed=seed % 97)
    with torch.no_grad():
        enc.positional.zero_()
    g = torch.Generator().manual_seed(seed)
    patches = torch.rand(9, 2, dtype=torch.float64, generator=g)
    perm = torch.randperm(9, generator=g)
    ref = _run_blocks(enc, embed_patches(patches, enc.patch_weight, enc.patch_bias, enc.positional))
    out = _run_blocks(enc, embed_patches(patches[perm], enc.patch_weight, enc.patch_bias, enc.positional))
    assert torch.allclose(out, ref[perm], atol=1e-12)


def test_encode_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    for seed in range(3):
        enc = _encoder(dim=16, heads=2, head_dim=8, seed=seed)
        img = torch.tensor(rng.uniform(size=(2, 4, 4, 1)))
        w = torch.tensor(rng.normal(size=(2, 4, 16)))
        params = list(enc.parameters())

        def f():
            return (encode(img, enc) * w).sum()

        assert oracles.gradient_check(f, params, rng, n_coords=20) < 1e-4


def test_encode_is_deterministic_in_train_mode():
    enc = _encoder().train()
    img = torch.rand(2, 4, 4, 1, dtype=torch.float64)
    assert torch.equal(encode(img, enc), encode(img, enc))


def test_from_config_is_seeded():
    cfg = Config(layers=1, heads=2, dim=8, grid=2, image_size=8)
    a = Encoder.from_config(cfg, 3, torch.Generator().manual_seed(3))
    b = Encoder.from_config(cfg, 3, torch.Generator().manual_seed(3))
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    assert a.positional.shape == (4, 8) and a.patch_weight.shape == (4 * 4 * 3, 8)
    assert a.blocks[0].qkv_weight.shape == (8, 3 * 2 * 4)
    # truncated at two standard deviations
    assert a.blocks[0].fc1_weight.abs().max() <= 0.04
