import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tchain.bench import gen_synthetic, random_mask
from tchain.decompose import (
    FitConfig,
    als_fit,
    als_step,
    fit_with_ss_control,
    init_model,
    is_success,
    masked_als_fit,
)
from tchain.model import reconstruct, sensitivity
from tchain.stabilize import CorrectionConfig


def sq_err(y, m, mask=None):
    r = y - reconstruct(m)
    return float(np.sum((r if mask is None else r * mask) ** 2))


def test_init_schemes():
    a = init_model((3, 4, 5), (2, 3, 2), seed=4)
    b = init_model((3, 4, 5), (2, 3, 2), seed=4)
    for x, z in zip(a.cores, b.cores):
        assert np.array_equal(x, z)
    rng = np.random.default_rng(0)
    for _ in range(10):
        y = rng.standard_normal((5, 6, 7)) * rng.uniform(0.01, 100)
        m = init_model(y.shape, (2, 3, 2), seed=int(rng.integers(1000)), scheme="scaled", y=y)
        assert abs(np.linalg.norm(reconstruct(m)) - np.linalg.norm(y)) / np.linalg.norm(y) <= 0.5
    bal = init_model((3, 4, 5, 6), (2, 3, 2, 2), seed=1, scheme="balanced")
    terms = np.array(sensitivity(bal).per_mode_terms)
    assert (terms.max() - terms.min()) / terms.mean() <= 1e-6
    with pytest.raises(ValueError):
        init_model((3, 4, 5), (2, 2, 2), scheme="scaled")
    with pytest.raises(ValueError):
        init_model((3, 4, 5), (2, 2, 2), scheme="nope")
    with pytest.raises(ValueError):
        init_model((3, 4), (2, 2))


def test_exact_model_is_fixed_point():
    y, truth = gen_synthetic((4, 5, 6), (2, 3, 2), seed=0)
    _, rep = als_fit(y, truth, FitConfig(max_iters=1))
    assert rep.relative_error[0] <= 1e-10


def test_single_core_update_is_optimal():
    rng = np.random.default_rng(1)
    y = rng.standard_normal((4, 5, 6))
    m = init_model(y.shape, (2, 2, 3), seed=2)
    for n in range(3):
        best = als_step(y, m, n)
        e = sq_err(y, best)
        for _ in range(50):
            alt = best.replace(n, best.cores[n] + 0.1 * rng.standard_normal(best.cores[n].shape))
            assert sq_err(y, alt) >= e - 1e-9 * np.sum(y**2)
        m = best


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3))
def test_als_monotone(seed, bond):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal(tuple(rng.integers(2, 6, size=3)))
    m0 = init_model(y.shape, (bond,) * 3, seed=seed % 1000)
    _, rep = als_fit(y, m0, FitConfig(max_iters=30))
    e2 = np.square(rep.relative_error)
    assert np.all(np.diff(e2) <= 1e-12)


def test_ridge_fallback_flagged():
    # bond 3 on 2x2x2 data makes the normal equations singular
    y = np.random.default_rng(2).standard_normal((2, 2, 2))
    m, rep = als_fit(y, init_model(y.shape, (3, 3, 3), seed=0), FitConfig(max_iters=5))
    assert rep.ridge_used > 0
    assert np.all(np.isfinite(reconstruct(m)))


def test_masked_all_ones_matches_als():
    y, _ = gen_synthetic((5, 5, 5), (2, 2, 2), seed=3)
    m0 = init_model(y.shape, (2, 2, 2), seed=5)
    cfg = FitConfig(max_iters=40)
    _, a = als_fit(y, m0, cfg)
    _, b = masked_als_fit(y, np.ones(y.shape), m0, cfg)
    np.testing.assert_allclose(a.relative_error, b.relative_error, rtol=1e-8)


def test_masked_truth_is_held():
    y, truth, W = (*gen_synthetic((6, 6, 6), (2, 2, 2), seed=4), random_mask((6, 6, 6), 0.5, seed=4))
    _, rep = masked_als_fit(y, W, truth, FitConfig(max_iters=20, rel_err_tol=1e-300))
    assert max(rep.relative_error) <= 1e-10


def test_masked_errors():
    y = np.ones((3, 3, 3))
    m0 = init_model(y.shape, (2, 2, 2), seed=0)
    with pytest.raises(ValueError):
        masked_als_fit(y, np.zeros(y.shape), m0)
    with pytest.raises(ValueError):
        masked_als_fit(y, np.ones((3, 3, 2)), m0)


def test_sparse_mask_warns(caplog):
    y = np.random.default_rng(5).standard_normal((4, 4, 4))
    W = np.zeros(y.shape)
    W[0] = 1.0
    W[:, 0, 0] = 1.0
    with caplog.at_level(logging.WARNING, logger="tchain"):
        masked_als_fit(y, W, init_model(y.shape, (2, 2, 2), seed=0), FitConfig(max_iters=2))
    assert any("fewer than" in r.message for r in caplog.records)


def test_ss_control_without_events_equals_als():
    y, _ = gen_synthetic((5, 5, 5), (2, 2, 2), seed=6)
    m0 = init_model(y.shape, (2, 2, 2), seed=7)
    cfg = FitConfig(max_iters=60, ss_max=1e300, stall_window=1000)
    _, a = als_fit(y, m0, cfg)
    _, b = fit_with_ss_control(y, m0, cfg)
    assert not b.correction_events
    assert a.relative_error == b.relative_error


def test_scheduled_correction_and_safety():
    y, _ = gen_synthetic((6, 6, 6), (3, 3, 3), seed=8)
    m0 = init_model(y.shape, (3, 3, 3), seed=9)
    cfg = FitConfig(max_iters=80, correction_schedule=[20, 50])
    _, rep = fit_with_ss_control(y, m0, cfg)
    assert [e.iteration for e in rep.correction_events] == [20, 50]
    for e in rep.correction_events:
        assert e.error_after <= e.error_before * (1 + 1e-9)
        assert e.ss_after <= e.ss_before
        assert e.kind == "intensity+ssc"
    _, rep2 = fit_with_ss_control(y, m0, cfg, CorrectionConfig())
    assert all(e.kind == "ssc" for e in rep2.correction_events)


def test_trigger_respects_cooldown_and_cap():
    y, _ = gen_synthetic((6, 6, 6), (3, 3, 3), seed=10)
    m0 = init_model(y.shape, (3, 3, 3), seed=11)
    cfg = FitConfig(max_iters=100, ss_max=1e-3, correction_cooldown=15, max_corrections=4)
    _, rep = fit_with_ss_control(y, m0, cfg)
    its = [e.iteration for e in rep.correction_events]
    assert len(its) == 4
    assert all(b - a >= 15 for a, b in zip(its, its[1:]))


def test_determinism():
    y, _ = gen_synthetic((5, 5, 5), (2, 2, 2), seed=12)
    m0 = init_model(y.shape, (2, 2, 2), seed=13)
    cfg = FitConfig(max_iters=50, correction_schedule=[10])
    _, a = fit_with_ss_control(y, m0, cfg)
    _, b = fit_with_ss_control(y, m0, cfg)
    assert a.relative_error == b.relative_error and a.sensitivity == b.sensitivity


def test_corrections_lower_stall_error():
    """Runs that needed a correction end below their error at the first correction."""
    improved = total = 0
    for s in range(10):
        y, _ = gen_synthetic((7, 7, 7), (3, 3, 3), seed=100 + s)
        m0 = init_model(y.shape, (3, 3, 3), seed=200 + s)
        _, rep = fit_with_ss_control(y, m0, FitConfig(max_iters=5000, ss_max=1e5))
        if not rep.correction_events:
            continue
        total += 1
        improved += rep.final_error < rep.correction_events[0].error_before
    assert total >= 3
    assert improved / total >= 0.8


def test_report_and_config_serialization():
    y, _ = gen_synthetic((4, 4, 4), (2, 2, 2), seed=14)
    _, rep = als_fit(y, init_model(y.shape, (2, 2, 2), seed=0), FitConfig(max_iters=5))
    d = rep.to_dict()
    assert d["iterations"] == 5 == len(d["sensitivity"]) == len(d["intensity"])
    assert rep.termination in {"converged", "stalled", "max_iters"}
    cfg = FitConfig.from_dict({"max_iters": 9, "correction_schedule": [3]})
    assert FitConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        FitConfig.from_dict({"nope": 1})
    with pytest.raises(ValueError):
        FitConfig(ss_max=0)
    with pytest.raises(ValueError):
        FitConfig(correction_schedule="sometimes")


def test_success_criterion():
    assert is_success(1e-6) and not is_success(2e-6)
    assert is_success(1e-3, squared=True) and not is_success(2e-3, squared=True)
