import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from dsva.core import ClassAttributeMatrix, InputError, ShapeError
from dsva.vam import PrototypeBank, attention_maps, compatibility_scores, predict_attributes


def test_zero_prototype_gives_zero_map():
    grid = torch.rand(9, 4, dtype=torch.float64)
    protos = torch.stack([torch.zeros(4, dtype=torch.float64), torch.rand(4, dtype=torch.float64)])
    maps = attention_maps(grid, protos)
    assert maps.shape == (2, 3, 3)
    assert torch.equal(maps[0], torch.zeros(3, 3, dtype=torch.float64))


def test_orthonormal_picks():
    grid = torch.eye(4, dtype=torch.float64)
    maps = attention_maps(grid, torch.eye(4, dtype=torch.float64)[[2]])
    assert maps[0].tolist() == [[0.0, 0.0], [1.0, 0.0]]


def test_maps_small_oracle():
    rng = np.random.default_rng(0)
    grid, protos = rng.normal(size=(4, 3)), rng.normal(size=(2, 3))
    got = attention_maps(torch.tensor(grid), torch.tensor(protos)).numpy()
    assert np.abs(got - oracles.attention_maps(grid.tolist(), protos.tolist())).max() < 1e-12


def test_maps_shape_errors():
    with pytest.raises(ShapeError):
        attention_maps(torch.zeros(4, 3), torch.zeros(2, 5))
    with pytest.raises(ShapeError):
        attention_maps(torch.zeros(5, 3), torch.zeros(2, 3))


def test_predict_examples():
    single = predict_attributes(torch.tensor([[[0.7]]], dtype=torch.float64))
    assert single.values.tolist() == [0.7] and single.argmax_patch.tolist() == [0]
    tie = predict_attributes(torch.tensor([[[0.2, 0.9], [-1.0, 0.9]]], dtype=torch.float64))
    assert tie.values.item() == 0.9 and tie.argmax_patch.item() == 1
    const = predict_attributes(torch.full((1, 3, 3), -2.5))
    assert const.values.item() == -2.5 and const.argmax_patch.item() == 0


@settings(max_examples=40, deadline=None)
@given(n_side=st.integers(1, 8), na=st.integers(1, 16), d=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_pooled_maps_match_brute_force(n_side, na, d, seed):
    rng = np.random.default_rng(seed)
    grid, protos = rng.normal(size=(n_side * n_side, d)), rng.normal(size=(na, d))
    pred = predict_attributes(attention_maps(torch.tensor(grid), torch.tensor(protos)))
    for i in range(na):
        sims = [oracles.dot(protos[i], z) for z in grid]
        best, where = oracles.max_pool(sims)
        assert abs(pred.values[i].item() - best) < 1e-12
        # the vectorized dot products may round differently; only check the winner when it is clear
        if sorted(sims)[-2:][0] < best - 1e-9:
            assert pred.argmax_patch[i].item() == where


@settings(max_examples=50, deadline=None)
@given(
    maps=arrays(np.float64, (3, 2, 2), elements=st.floats(-4, 4, width=16)),
    c=st.sampled_from([-1.5, 0.0, 0.25, 3.0]),
)
def test_constant_shift(maps, c):
    base = predict_attributes(torch.tensor(maps))
    shifted = predict_attributes(torch.tensor(maps) + c)
    # float16-representable entries keep the shift exact
    assert torch.equal(shifted.values, base.values + c)
    assert torch.equal(shifted.argmax_patch, base.argmax_patch)


def test_max_pool_subgradient():
    rng = np.random.default_rng(3)
    grid = torch.tensor(rng.normal(size=(9, 4)), requires_grad=True)
    protos = torch.tensor(rng.normal(size=(3, 4)))
    pred = predict_attributes(attention_maps(grid, protos))
    for i in range(3):
        (g,) = torch.autograd.grad(pred.values[i], grid, retain_graph=True)
        expected = torch.zeros_like(grid)
        expected[pred.argmax_patch[i]] = protos[i]
        assert torch.equal(g, expected)

        def f():
            return predict_attributes(attention_maps(grid, protos)).values[i]

        coords = [(0, j) for j in range(grid.numel())]
        numeric = oracles.central_difference(f, [grid], coords)
        assert oracles.relative_error(g.reshape(-1).tolist(), numeric) < 1e-6


def _classes(rows):
    return ClassAttributeMatrix(tuple(f"c{i}" for i in range(len(rows))), tuple(f"a{j}" for j in range(rows.shape[1])), rows)


def test_compatibility_examples():
    rng = np.random.default_rng(4)
    rows = rng.normal(size=(3, 4))
    classes = _classes(rows).normalized("l2")
    v = torch.tensor(classes.row("c1"))
    scores = compatibility_scores(v, classes)
    assert abs(scores[1].item() - 1.0) < 1e-12 and scores.argmax().item() == 1
    sub = compatibility_scores(v, classes, ["c1", "c2"])
    assert sub.argmax().item() == 0
    assert torch.equal(compatibility_scores(torch.zeros(4, dtype=torch.float64), classes), torch.zeros(3, dtype=torch.float64))
    values = rng.normal(size=4)
    got = compatibility_scores(torch.tensor(values), _classes(rows)).numpy()
    assert np.abs(got - oracles.compatibility(values, rows)).max() < 1e-12


def test_compatibility_errors():
    classes = _classes(np.ones((2, 3)))
    with pytest.raises(InputError):
        compatibility_scores(torch.zeros(3), classes, ["c9"])
    with pytest.raises(InputError):
        compatibility_scores(torch.zeros(3), classes, [])
    with pytest.raises(ShapeError):
        compatibility_scores(torch.zeros(4), classes)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.01, 100))
def test_argmax_invariant_to_positive_row_scaling(seed, scale):
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(5, 4))
    v = torch.tensor(rng.normal(size=4))
    a = compatibility_scores(v, _classes(rows))
    b = compatibility_scores(v, _classes(rows * scale))
    gap = a.sort().values
    if gap[-1] - gap[-2] > 1e-9:
        assert a.argmax() == b.argmax()


def test_bank_init():
    g = torch.Generator().manual_seed(0)
    bank = PrototypeBank.initialized(200, 64, g)
    assert bank.prototypes.shape == (200, 64)
    assert abs(bank.prototypes.std().item() - 1 / 8) < 0.01
