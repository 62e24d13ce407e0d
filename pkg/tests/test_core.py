import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsva.core import (
    ATTRIBUTE_GROUPS,
    AttributeVocabulary,
    ClassAttributeMatrix,
    Config,
    ConfigError,
    InputError,
    ShapeError,
    SplitSpec,
    ValidationError,
    atomic_write,
    dump_config,
    load_config,
    parse_config,
    resolve_seed,
    seeded_rng,
)


def test_defaults_match_published_settings():
    c = load_config()
    assert c.lambda_scale == 0.08
    assert c.gamma_calibration == 1e-4
    assert c.probe_count == 10
    assert (c.beta1, c.beta2) == (0.5, 0.999)
    assert (c.warmup_epochs, c.warmup_lr) == (4, 1e-4)
    assert (c.main_epochs, c.main_lr) == (26, 1e-6)
    assert (c.layers, c.grid, c.image_size, c.patch_side) == (12, 7, 224, 32)


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("")
    assert load_config(path) == Config()


def test_single_override(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# one probe\nprobe_count = 1\n")
    assert load_config(path) == Config(probe_count=1)


def test_invariant_violation():
    with pytest.raises(ValidationError):
        parse_config("lambda_scale = -1")


@pytest.mark.parametrize("text, key", [("nosuch = 1", "nosuch"), ("probe_count = ten", "probe_count"), ("freeze_backbone = maybe", "freeze_backbone")])
def test_parse_errors_name_the_key(text, key):
    with pytest.raises(ConfigError, match=key):
        parse_config(text)


def test_missing_line_separator():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("probe_count 3")


def test_preset_and_overrides():
    c = load_config(preset="tiny", seed=3, main_epochs=None)
    assert (c.layers, c.dim, c.grid, c.seed) == (2, 32, 4, 3)
    with pytest.raises(ConfigError):
        load_config(preset="huge")


@settings(max_examples=60, deadline=None)
@given(
    lam=st.floats(0, 10, allow_nan=False),
    m=st.integers(1, 50),
    freeze=st.booleans(),
    norm=st.sampled_from(["l2", "none", "zscore"]),
    lr=st.floats(1e-9, 1.0),
)
def test_config_round_trip(lam, m, freeze, norm, lr):
    c = Config(lambda_scale=lam, probe_count=m, freeze_backbone=freeze, class_norm=norm, main_lr=lr)
    assert parse_config(dump_config(c)) == c


def test_seed_resolution(monkeypatch):
    monkeypatch.delenv("DSVA_SEED", raising=False)
    assert resolve_seed(None, 5) == 5
    monkeypatch.setenv("DSVA_SEED", "11")
    assert resolve_seed(None) == 11
    assert resolve_seed(2) == 2
    monkeypatch.setenv("DSVA_SEED", "x")
    with pytest.raises(ConfigError):
        resolve_seed(None)


def test_rng_determinism_and_children():
    assert np.array_equal(seeded_rng(0).random(100), seeded_rng(0).random(100))
    assert not np.array_equal(seeded_rng(0).random(100), seeded_rng(1).random(100))
    a1, b1 = seeded_rng(7).spawn(2)
    a2, b2 = seeded_rng(7).spawn(2)
    xa, xb = a1.random(50), b1.random(50)
    assert np.array_equal(xa, a2.random(50)) and np.array_equal(xb, b2.random(50))
    assert not np.array_equal(xa, xb)


def test_vocabulary(tmp_path):
    v = AttributeVocabulary.from_pairs([("color", "red"), ("shape", "round"), ("functions", "residential")])
    assert v.index("round") == 1
    path = tmp_path / "v.txt"
    path.write_text(v.dumps())
    assert AttributeVocabulary.read(path) == v
    p = v.permuted([2, 0, 1])
    assert p.names == ("residential", "red", "round") and p.groups[0] == "functions"
    with pytest.raises(ValidationError):
        AttributeVocabulary(("a", "a"), ("color", "color"))
    with pytest.raises(ValidationError):
        AttributeVocabulary(("a",), ("smell",))
    assert set(v.groups) <= set(ATTRIBUTE_GROUPS)


def _matrix():
    return ClassAttributeMatrix(("x", "y"), ("a", "b", "c"), np.array([[3.0, 4.0, 0.0], [1.0, -1.0, 2.0]]))


def test_matrix_csv_round_trip(tmp_path):
    m = _matrix()
    assert ClassAttributeMatrix.from_csv(m.to_csv()) == m
    atomic_write(tmp_path / "m.csv", m.to_csv())
    assert ClassAttributeMatrix.read(tmp_path / "m.csv") == m


def test_matrix_normalization():
    m = _matrix()
    l2 = m.normalized("l2")
    assert np.allclose(np.linalg.norm(l2.values, axis=1), 1.0)
    assert np.allclose(l2.row("x"), [0.6, 0.8, 0.0])
    assert m.normalized("none") == m
    z = m.normalized("zscore")
    assert np.allclose(z.values.mean(axis=1), 0.0)
    with pytest.raises(ConfigError):
        m.normalized("max")


def test_matrix_validation():
    with pytest.raises(InputError, match="nope"):
        _matrix().rows(["nope"])
    with pytest.raises(ValidationError):
        ClassAttributeMatrix(("x",), ("a",), np.array([[np.nan]]))
    with pytest.raises(ShapeError):
        ClassAttributeMatrix(("x",), ("a", "b"), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        _matrix().values[0, 0] = 1.0


def test_split_spec_rules():
    SplitSpec(("a",), ("b",), {"a": ("a/1",)}, {"a": ("a/2",), "b": ("b/1",)})
    with pytest.raises(ValidationError):
        SplitSpec(("a",), ("a",), {}, {})
    with pytest.raises(ValidationError):
        SplitSpec(("a",), ("b",), {"b": ("b/1",)}, {})


def test_atomic_write_leaves_no_temp(tmp_path):
    target = tmp_path / "deep" / "out.txt"
    atomic_write(target, "hello")
    atomic_write(target, b"bytes")
    assert target.read_bytes() == b"bytes"
    assert [p.name for p in target.parent.iterdir()] == ["out.txt"]


def test_config_is_frozen():
    with pytest.raises(dataclasses.FrozenInstanceError):
        Config().seed = 3
