import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiedgrain.errors import ConfigError, DimensionError
from tiedgrain.masking import (
    Mask,
    MaskSpec,
    effective_param_count,
    expected_kept_fraction,
    generate_mask,
    hamming_distance,
    validate_two_four,
)


@pytest.mark.parametrize("scheme", ["exact_count", "bernoulli"])
def test_full_density_keeps_everything(scheme):
    m = generate_mask(MaskSpec((7, 9), 1.0, scheme, 3, 2))
    assert m.bits.all() and m.kept_count == 63


def test_exact_count_half():
    m = generate_mask(MaskSpec((100,), 0.5, "exact_count", 1, 0))
    assert m.kept_count == 50 == int(m.bits.sum())


def test_two_to_four_shape_2x8():
    m = generate_mask(MaskSpec((2, 8), 0.3, "two_to_four", 9, 1))
    assert m.kept_count == 8
    assert np.all(m.bits.reshape(2, 2, 4).sum(-1) == 2)
    assert validate_two_four(m)


def test_validate_two_four_hand_cases():
    assert validate_two_four(np.array([1, 1, 0, 0, 0, 1, 0, 1], dtype=bool))
    full = Mask(np.ones((4, 8), bool), 32, MaskSpec((4, 8), 1.0, "two_to_four"))
    assert not validate_two_four(full)
    assert not validate_two_four(np.array([1, 1, 1, 0, 0, 1, 0, 1], dtype=bool))


def test_two_to_four_partial_tail_and_conv_kernels():
    m = generate_mask(MaskSpec((3, 11), 0.5, "two_to_four", 4, 0))
    assert validate_two_four(m)
    assert m.kept_count == 3 * (4 + 2)
    k = generate_mask(MaskSpec((4, 3, 3, 3), 0.5, "two_to_four", 4, 2))
    assert validate_two_four(k)
    assert k.kept_count == 4 * (6 * 2 + 2)


def test_density_out_of_range():
    with pytest.raises(ConfigError):
        MaskSpec((4,), 1.5)
    with pytest.raises(ConfigError):
        MaskSpec((4,), -0.1)
    with pytest.raises(ConfigError):
        MaskSpec((4,), 0.5, "magnitude")


def test_regenerate_bit_identical():
    spec = MaskSpec((33, 17), 0.37, "exact_count", 77, 5)
    a = generate_mask(spec)
    assert np.array_equal(a.bits, a.regenerate().bits)


def test_changing_seed_or_layer_changes_mask():
    for base in range(100):
        a = generate_mask(MaskSpec((64,), 0.5, "exact_count", base, 0))
        b = generate_mask(MaskSpec((64,), 0.5, "exact_count", base, 1))
        c = generate_mask(MaskSpec((64,), 0.5, "exact_count", base + 1000, 0))
        assert hamming_distance(a, b) > 0
        assert hamming_distance(a, c) > 0


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 400),
    density=st.floats(0.0, 1.0),
    seed=st.integers(0, 2**64 - 1),
    layer=st.integers(0, 63),
)
def test_exact_count_is_equal_per_layer(n, density, seed, layer):
    m = generate_mask(MaskSpec((n,), density, "exact_count", seed, layer))
    assert m.kept_count == math.floor(density * n + 0.5)


@settings(max_examples=40, deadline=None)
@given(rows=st.integers(1, 6), cols=st.integers(1, 23), seed=st.integers(0, 2**32))
def test_two_to_four_always_valid(rows, cols, seed):
    assert validate_two_four(generate_mask(MaskSpec((rows, cols), 0.5, "two_to_four", seed, 0)))


def test_effective_param_count_basics():
    spec = MaskSpec((10, 10), 0.3, "exact_count", 1, 0)
    m = generate_mask(spec)
    assert effective_param_count([m]) == m.kept_count
    ones = [generate_mask(MaskSpec((5, 4), 1.0, "exact_count", 0, i)) for i in range(3)]
    assert effective_param_count(ones) == 20
    with pytest.raises(DimensionError):
        effective_param_count([m, ones[0]])
    with pytest.raises(ConfigError):
        effective_param_count([])


def test_union_monotone_in_depth():
    masks = [generate_mask(MaskSpec((50, 50), 0.2, "exact_count", 3, i)) for i in range(10)]
    counts = [effective_param_count(masks[: k + 1]) for k in range(10)]
    assert counts == sorted(counts)


def test_union_matches_expectation_for_bernoulli():
    n, k = 10**6, 8
    masks = [generate_mask(MaskSpec((n,), 0.5, "bernoulli", 2024, i)) for i in range(k)]
    p = expected_kept_fraction(0.5, k)
    assert n * p == 996_093.75
    sigma = math.sqrt(n * p * (1 - p))
    assert abs(effective_param_count(masks) - n * p) < 3 * sigma


def test_expected_kept_fraction():
    assert expected_kept_fraction(1.0, 5) == 0.0
    assert expected_kept_fraction(0.5, 1) == 0.5
    assert expected_kept_fraction(0.5, 8) == 255 / 256
    with pytest.raises(ConfigError):
        expected_kept_fraction(0.5, 0)
