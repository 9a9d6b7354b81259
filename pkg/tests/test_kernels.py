import numpy as np
import pytest

from georank import kernels


needs_numba = pytest.mark.skipif(not kernels.NUMBA_ENABLED, reason="numba path disabled")


def test_cosine_scores_numpy_matches_manual():
    q = np.array([1.0, 0.0], np.float32)
    refs = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], np.float32)
    scores = kernels._cosine_scores_np(q, refs)
    # inputs are float32, so the 0.6 case is exact only to f32 resolution
    assert scores == pytest.approx([1.0, 0.0, 0.6], abs=1e-7)


@needs_numba
def test_paths_agree_on_cosine():
    rng = np.random.default_rng(11)
    q = rng.standard_normal(37).astype(np.float32)
    refs = rng.standard_normal((400, 37)).astype(np.float32)
    np.testing.assert_allclose(
        kernels._cosine_scores_np(q, refs), kernels._cosine_scores_nb(q, refs), rtol=0, atol=1e-12
    )
    np.testing.assert_allclose(
        kernels._cosine_scores_np(q, refs, accum32=True),
        kernels._cosine_scores_nb(q, refs, accum32=True),
        rtol=1e-6,
        atol=1e-7,
    )


@needs_numba
def test_paths_agree_on_top_indices_including_ties():
    rng = np.random.default_rng(5)
    scores = rng.standard_normal(1000)
    scores[100:110] = scores[42]  # engineered ties
    tie_rank = rng.permutation(1000).astype(np.int64)
    for k in (1, 5, 10, 50, 1000, 2000):
        np.testing.assert_array_equal(
            kernels._top_indices_np(scores, tie_rank, k), kernels._top_indices_nb(scores, tie_rank, k)
        )


def test_top_indices_orders_by_score_then_tie_rank():
    scores = np.array([0.5, 0.9, 0.5, 0.1])
    tie_rank = np.array([3, 0, 1, 2], np.int64)
    np.testing.assert_array_equal(kernels._top_indices_np(scores, tie_rank, 4), [1, 2, 0, 3])


@needs_numba
def test_paths_agree_on_haversine():
    rng = np.random.default_rng(7)
    lat1, lat2 = rng.uniform(-90, 90, 200), rng.uniform(-90, 90, 200)
    lon1, lon2 = rng.uniform(-180, 180, 200), rng.uniform(-180, 180, 200)
    np.testing.assert_allclose(
        kernels._haversine_km_np(lat1, lon1, lat2, lon2, 6371.0),
        kernels._haversine_km_nb(lat1, lon1, lat2, lon2, 6371.0),
        rtol=1e-12,
    )


def test_haversine_scalar_roundtrip():
    d = kernels.haversine_km(0.0, 0.0, 0.0, 1.0, 6371.0)
    assert isinstance(d, float)
    assert d == pytest.approx(6371.0 * np.pi / 180.0, rel=1e-9)


def test_env_flag_selects_numpy_fallback(monkeypatch):
    import importlib
    import sys

    monkeypatch.setenv("GEOVLM_DISABLE_NUMBA", "1")
    saved = sys.modules.pop("georank.kernels")
    try:
        mod = importlib.import_module("georank.kernels")
        assert mod.NUMBA_ENABLED is False
        assert mod.cosine_scores is mod._cosine_scores_np
    finally:
        sys.modules["georank.kernels"] = saved
