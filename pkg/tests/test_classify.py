import numpy as np
import pytest

from glandseg.classify import BENIGN, MALIGNANT, classify_malignancy


def _maps(*pixel_dists, shape=(6, 6)):
    n = shape[0] * shape[1]
    rows = np.array(pixel_dists * (n // len(pixel_dists)))
    return rows.reshape(shape + (4,))


def test_all_benign_mass():
    d = classify_malignancy(_maps((0.7, 0.3, 0.0, 0.0)))
    assert d.label == BENIGN and d.name == "benign"
    assert d.confidence == pytest.approx(1.0, abs=1e-15)
    assert not d.tie


def test_uniform_is_tie_resolved_to_benign():
    d = classify_malignancy(_maps((0.25, 0.25, 0.25, 0.25)))
    assert d.label == BENIGN and d.tie and d.confidence == 0.5
    assert d.record().endswith("\ttie")


def test_half_and_half_is_tie():
    d = classify_malignancy(_maps((0.1, 0.2, 0.3, 0.4), (0.4, 0.3, 0.2, 0.1)))
    assert d.p_benign == pytest.approx(0.5, abs=1e-12)
    assert d.label == BENIGN and d.tie


def _random_maps(seed, bias):
    rng = np.random.default_rng(seed)
    m = rng.dirichlet([1 + bias, 1 + bias, 1, 1], (9, 11))
    return m


@pytest.mark.parametrize("seed", range(5))
def test_swapping_channel_pairs_flips_decision(seed):
    m = _random_maps(seed, 0.5)
    a = classify_malignancy(m)
    b = classify_malignancy(m[..., [2, 3, 0, 1]])
    assert not a.tie and {a.label, b.label} == {BENIGN, MALIGNANT}
    assert a.confidence == pytest.approx(b.confidence, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_spatial_permutation_invariance(seed):
    m = _random_maps(seed, -0.3)
    rng = np.random.default_rng(seed + 100)
    shuffled = rng.permutation(m.reshape(-1, 4)).reshape(m.shape)
    a, b = classify_malignancy(m), classify_malignancy(shuffled)
    assert a.label == b.label
    assert a.confidence == pytest.approx(b.confidence, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_confidence_is_one_minus_loser(seed):
    d = classify_malignancy(_random_maps(seed, 0.2))
    loser = d.p_malignant if d.label == BENIGN else d.p_benign
    assert d.confidence == pytest.approx(1 - loser, abs=1e-5)
    assert d.confidence >= 0.5
    assert d.p_benign + d.p_malignant == pytest.approx(1.0, abs=1e-5)


def test_record_format():
    d = classify_malignancy(_maps((0.05, 0.05, 0.6, 0.3)))
    assert d.label == MALIGNANT
    assert d.record() == "malignant\t0.9000"


def test_wrong_channel_count():
    with pytest.raises(ValueError):
        classify_malignancy(np.full((4, 4, 3), 1 / 3))


def test_not_a_distribution():
    with pytest.raises(ValueError):
        classify_malignancy(np.full((4, 4, 4), 0.3))
