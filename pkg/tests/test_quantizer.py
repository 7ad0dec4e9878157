import numpy as np
import pytest

from msfusion.errors import ArgumentError, BoundsError, ShapeError
from msfusion.quantizer import (Codebook, EmaFitState, VectorQuantizer, distances, ema_step,
                                fit_codebook_ema, match, quantization_error, quantize,
                                replace_dead_codes, select)


def brute_match(z, codes):
    d = np.array([[np.sqrt(sum((a - b) ** 2 for a, b in zip(v, code))) for code in codes] for v in z])
    p = np.exp(-d)
    p /= p.sum(axis=1, keepdims=True)
    return p, d.argmin(axis=1)


def test_match_against_loops(rng):
    z = rng.standard_normal((20, 3))
    codes = rng.standard_normal((5, 3))
    probs, idx = match(z, Codebook(codes))
    p, i = brute_match(z, codes)
    np.testing.assert_allclose(probs, p, rtol=1e-12)
    assert np.array_equal(idx, i)


def test_distance_is_not_squared():
    probs, idx = match(np.zeros((1, 2)), Codebook([[3.0, 4.0], [1.0, 0.0]]))
    expect = np.exp([-5.0, -1.0]) / np.exp([-5.0, -1.0]).sum()
    np.testing.assert_allclose(probs[0], expect)
    assert idx[0] == 1


def test_ties_go_to_lowest_index():
    cb = Codebook([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    _, idx = match(np.array([[0.0, 5.0], [1.0, 0.0]]), cb)
    assert idx.tolist() == [0, 0]


def test_single_code_probability_one(rng):
    probs, idx = match(rng.standard_normal((4, 4, 3)), Codebook(np.ones((1, 3))))
    assert np.all(probs == 1.0) and np.all(idx == 0)


def test_batch_independence(rng):
    z = rng.standard_normal((50, 4))
    cb = Codebook(rng.standard_normal((7, 4)))
    full, _ = match(z, cb)
    for k in (0, 17, 49):
        alone, _ = match(z[k:k + 1], cb)
        assert np.array_equal(alone[0], full[k])


def test_quantize_maps_and_shapes(rng):
    z = rng.standard_normal((4, 6, 3))
    cb = Codebook(rng.standard_normal((5, 3)))
    res = quantize(z, cb)
    assert res.probs.shape == (4, 6, 5) and res.indices.shape == (4, 6)
    assert np.array_equal(res.discrete, cb.codes[res.indices])
    with pytest.raises(ShapeError):
        match(np.zeros((2, 4)), cb)


def test_select_bounds():
    cb = Codebook(np.eye(3))
    assert np.array_equal(select(cb, [2, 0]), np.eye(3)[[2, 0]])
    with pytest.raises(BoundsError):
        select(cb, [3])
    with pytest.raises(BoundsError):
        select(cb, [-1])


def test_codebook_validation():
    with pytest.raises(ShapeError):
        Codebook(np.zeros(3))
    with pytest.raises(ArgumentError):
        Codebook([[np.nan]])


def test_ema_state_seeded_from_codes():
    codes = np.arange(6.0).reshape(3, 2)
    st = EmaFitState.from_codes(codes, 0.9)
    assert np.array_equal(st.codes(), codes)
    with pytest.raises(ArgumentError):
        EmaFitState.from_codes(codes, 1.0)


def test_ema_step_formula():
    st = EmaFitState.from_codes(np.array([[0.0], [10.0]]), 0.5)
    counts = ema_step(st, np.array([[1.0], [2.0], [9.0]]))
    assert counts.tolist() == [2.0, 1.0]
    # size = 0.5*1 + 0.5*count, sum = 0.5*code + 0.5*sum(rows)
    np.testing.assert_allclose(st.cluster_size, [1.5, 1.0])
    np.testing.assert_allclose(st.codes(), [[1.5 / 1.5], [(5.0 + 4.5) / 1.0]])


def test_fit_recovers_separated_clusters(rng):
    centres = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    rows = np.concatenate([c + 0.1 * rng.standard_normal((100, 2)) for c in centres])
    cb, state = fit_codebook_ema([rows], 3, decay=0.8, epochs=30, seed=3)
    found = np.sort(np.round(cb.codes).astype(int), axis=0)
    assert np.array_equal(found, np.sort(centres.astype(int), axis=0))
    assert quantization_error(rows, cb.codes) < 300 * 0.1


def test_fit_is_deterministic(rng):
    rows = rng.standard_normal((200, 3))
    a, _ = fit_codebook_ema([rows], 8, seed=11, replace_dead=True)
    b, _ = fit_codebook_ema([rows], 8, seed=11, replace_dead=True)
    c, _ = fit_codebook_ema([rows], 8, seed=12, replace_dead=True)
    assert np.array_equal(a.codes, b.codes)
    assert not np.array_equal(a.codes, c.codes)


def test_fit_errors(rng):
    with pytest.raises(ArgumentError):
        fit_codebook_ema([rng.standard_normal((3, 2))], 4)
    with pytest.raises(ArgumentError):
        fit_codebook_ema([], 1)
    with pytest.raises(ShapeError):
        fit_codebook_ema([np.zeros((4, 2)), np.zeros((4, 3))], 2)


def test_dead_code_replacement():
    cb = Codebook([[0.0], [100.0]])
    st = EmaFitState.from_codes(cb.codes, 0.9)
    st.usage_age[:] = [0, 5]
    batch = np.array([[1.0], [2.0], [3.0]])
    new = replace_dead_codes(cb, st, batch, age_threshold=2, seed=0)
    assert new.codes[0, 0] == 0.0
    assert new.codes[1, 0] in (1.0, 2.0, 3.0)
    assert st.usage_age.tolist() == [0, 0]
    assert replace_dead_codes(new, st, batch, 2, 0) is new


def test_vector_quantizer_estimator(rng):
    x = rng.standard_normal((6, 6, 2))
    vq = VectorQuantizer(n_codes=4, n_epochs=5, random_state=1)
    assert vq.get_params()["n_codes"] == 4
    vq.fit(x)
    assert vq.predict(x).shape == (6, 6)
    assert vq.transform(x).shape == x.shape
    np.testing.assert_allclose(vq.predict_proba(x).sum(-1), 1.0)
    assert vq.score(x) <= 0
    assert distances(x.reshape(-1, 2), vq.cluster_centers_).shape == (36, 4)
