import numpy as np
import pytest
from scipy.integrate import quad

from mfdplan.schedule import (level_weights, make_subdivision, make_vp_schedule,
                              work_ablation, work_full)


def test_vp_boundary_conditions():
    s = make_vp_schedule(0.1, 20.0, 1.0, 1e-3, 200)
    assert s.alpha(0.0) == 1.0
    assert s.sigma(0.0) == 0.0
    # unit-variance data: marginal variance is 1 at t=0 (and throughout)
    assert s.marginal_var(0.0) == pytest.approx(1.0, abs=1e-12)


def test_alpha_matches_quadrature_of_linear_beta():
    s = make_vp_schedule(0.1, 20.0, 1.0, 1e-3, 200)
    # independent oracle: numeric quadrature of the linear rate
    integral, _ = quad(lambda u: 0.1 + (20.0 - 0.1) * u, 0.0, 1.0)
    assert integral == pytest.approx((0.1 + 20.0) / 2)
    assert s.alpha(1.0) == pytest.approx(np.exp(-0.5 * integral), rel=1e-12)
    for t in (0.2, 0.5, 0.77):
        integral, _ = quad(lambda u: 0.1 + 19.9 * u, 0.0, t)
        assert s.alpha(t) == pytest.approx(np.exp(-0.5 * integral), rel=1e-10)


def test_marginal_var_monotone_and_continuous():
    s = make_vp_schedule(0.1, 20.0, 1.0, 1e-3, 200)
    ts = np.linspace(0.0, 1.0, 400)
    mv = s.marginal_var(ts)
    assert (np.diff(mv) > -1e-12).all()
    assert np.abs(np.diff(mv)).max() < 1e-2


def test_vp_schedule_rejects_bad_params():
    with pytest.raises(ValueError):
        make_vp_schedule(0.1, 20.0, 1.0, 1.5, 200)  # t_min >= T
    with pytest.raises(ValueError):
        make_vp_schedule(-0.1, 20.0, 1.0, 1e-3, 200)
    with pytest.raises(ValueError):
        make_vp_schedule(0.1, 20.0, 1.0, -1e-3, 200)
    with pytest.raises(ValueError):
        make_vp_schedule(20.0, 0.1, 1.0, 1e-3, 200)


def test_subdivision_paper_default():
    sub = make_subdivision(16, 2, 4, 200, 0.10)
    assert sub.N_levels == (1, 2, 4, 8, 16)
    assert sub.S == 40
    assert sub.S * (sub.K + 1) == 200
    cuts = np.array(sub.t_cuts)
    assert (np.diff(cuts) < 0).all()
    assert cuts[0] == 1.0 and cuts[-1] == pytest.approx(1e-3)


def test_subdivision_degenerate_single_level():
    sub = make_subdivision(37, 1, 0, 128, 0.5)
    assert sub.N_levels == (37,)
    assert sub.S == 128


def test_subdivision_divisibility_errors():
    with pytest.raises(ValueError):
        make_subdivision(1000, 2, 4, 200, 0.10)   # 16 does not divide 1000
    sub = make_subdivision(992, 2, 4, 200, 0.10)  # N_0 = 62
    assert sub.N_levels[0] == 62
    with pytest.raises(ValueError):
        make_subdivision(16, 2, 4, 201, 0.10)     # 5 does not divide 201


def test_work_full_paper_values():
    sub = make_subdivision(16, 2, 4, 200, 0.10)
    for n in (16, 64, 992):
        assert work_full(sub, n) == pytest.approx(77.59375 * n, rel=1e-12)
    sub0 = make_subdivision(16, 2, 4, 200, 0.0)
    assert work_full(sub0, 16) == pytest.approx(77.5 * 16, rel=1e-12)
    flat = make_subdivision(16, 1, 0, 200, 0.10)
    assert work_full(flat, 16) == 200 * 16


def test_work_ablation_identity_paper_decomposition():
    sub = make_subdivision(16, 2, 4, 200, 0.10)
    # 77.5 N denoising + 122.5 N fresh-chain make-up = 200 N
    levels = np.array(sub.N_levels) / 16
    denoise = 40 * levels.sum()
    fresh = 40 * sum(levels[k] * (k + 1) for k in range(4))
    assert denoise == pytest.approx(77.5)
    assert fresh == pytest.approx(122.5)
    assert work_ablation(sub, 16, "no_branching") == 200 * 16
    assert work_ablation(sub, 16, "no_subdivision") == 200 * 16


def test_work_identity_100_random_tuples():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 100:
        kp1 = int(rng.choice([1, 2, 4, 5, 8, 10]))
        b = int(rng.integers(1, 5))
        n0 = int(rng.integers(1, 6))
        n = n0 * b ** (kp1 - 1)
        sub = make_subdivision(n, b, kp1 - 1, 200, float(rng.uniform(0, 2)))
        assert work_ablation(sub, n, "no_branching") == 200 * n
        assert work_ablation(sub, n, "no_subdivision") == 200 * n
        if kp1 > 1 and sub.c_psi < sub.S:
            assert work_full(sub, n) <= 200 * n
        checked += 1


def test_speedup_factor():
    sub = make_subdivision(16, 2, 4, 200, 0.10)
    speedup = (200 * 16) / work_full(sub, 16)
    assert speedup == pytest.approx(200 / 77.59375, abs=1e-6)
    assert round(speedup, 2) == 2.58


def test_level_weights():
    sub = make_subdivision(16, 2, 4, 200, 0.10)
    assert level_weights(sub, "practical_b_pow") == [1, 0.5, 0.25, 0.125, 0.0625]
    th = level_weights(sub, "theoretical")
    assert th[0] == 1.0
    assert all(th[k + 1] < th[k] for k in range(4))
    # theoretical decays strictly faster than practical beyond level 0
    pr = level_weights(sub, "practical_b_pow")
    assert all(t < p for t, p in zip(th[1:], pr[1:]))
