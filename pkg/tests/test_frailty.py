import json
import math

import numpy as np
import pytest
from scipy import integrate, stats

from survrisk.cox import encode_design, fit_cox
from survrisk.errors import ConfigError, UnfitError
from survrisk.frailty import FrailtyFit, e_step, fit_gamma_frailty, predict_risk_frailty
from survrisk.simulate import SimulationConfig, simulate_cohort


def frailty_data(theta, n_groups, per_group, seed):
    c = simulate_cohort(SimulationConfig(
        n_subjects=n_groups * per_group, n_locations=n_groups, frailty_variance=theta,
        beta={"age": 0.03, "smoker": 0.5}, weibull_shape=1.2, weibull_scale=6000,
        censoring_rate=1e-4, seed=seed))
    return encode_design(c, ("age", "smoker")).values, c.time, c.event, c.zip3


def test_e_step_formula():
    z = e_step(0.5, [3, 0], [2.0, 1.0])
    np.testing.assert_allclose(z, [(2 + 3) / (2 + 2.0), 2 / 3.0])
    np.testing.assert_array_equal(e_step(0, [3, 0], [2.0, 1.0]), [1, 1])


def test_fixed_zero_theta_is_cox():
    x, t, e, g = frailty_data(0.0, 5, 100, 1)
    fr = fit_gamma_frailty(x, t, e, g, theta=0)
    cox = fit_cox(x, t, e)
    np.testing.assert_allclose(fr.beta, cox.beta, atol=1e-10)
    assert set(fr.frailty_means.values()) == {1.0}


def test_marginal_loglik_matches_numerical_integration():
    x, t, e, g = frailty_data(0.8, 4, 15, 2)
    theta = 0.8
    fit = fit_gamma_frailty(x, t, e, g, theta=theta)
    H0 = fit.baseline_cumhaz
    jumps = dict(zip(H0.times.tolist(), np.diff(np.concatenate(([0.0], H0.cumhaz)))))
    lp = x @ fit.beta
    total = 0.0
    prior = stats.gamma(a=1 / theta, scale=theta)
    for label in np.unique(g):
        m = g == label
        d = int(e[m].sum())
        lam = float(np.sum(H0(t[m]) * np.exp(lp[m])))
        const = sum(math.log(jumps[ti]) + li for ti, li in zip(t[m][e[m]], lp[m][e[m]]))
        val, _ = integrate.quad(lambda z: z**d * math.exp(-z * lam) * prior.pdf(z), 0, np.inf,
                                epsabs=0, epsrel=1e-11, limit=200)
        total += const + math.log(val)
    assert fit.marginal_loglik == pytest.approx(total, rel=1e-8)


def test_estimated_theta_maximises_profile():
    x, t, e, g = frailty_data(0.5, 20, 60, 3)
    fit = fit_gamma_frailty(x, t, e, g)
    assert all(ll <= fit.marginal_loglik + 1e-9 for _, ll in fit.profile)
    assert 0 < fit.theta < 10 and not fit.boundary


def test_no_heterogeneity_gives_small_theta():
    x, t, e, g = frailty_data(0.0, 20, 200, 4)
    fit = fit_gamma_frailty(x, t, e, g)
    assert fit.theta <= 0.01


def test_heterogeneity_is_detected():
    x, t, e, g = frailty_data(0.5, 40, 250, 5)
    fit = fit_gamma_frailty(x, t, e, g)
    assert 0.2 <= fit.theta <= 1.0
    # posterior means follow the raw group O/E direction
    assert np.corrcoef(list(fit.frailty_means.values()),
                       [e[g == k].mean() for k in fit.frailty_means])[0, 1] > 0.5


def test_bad_arguments():
    x, t, e, g = frailty_data(0.0, 2, 20, 6)
    with pytest.raises(ConfigError):
        fit_gamma_frailty(x, t, e, g, theta=-1)
    with pytest.raises(ConfigError):
        fit_gamma_frailty(x, t, e, g, bounds=(1.0, 0.5))
    with pytest.raises(UnfitError):
        fit_gamma_frailty(x, t, np.zeros_like(e), g)


def test_roundtrip_and_unknown_group():
    x, t, e, g = frailty_data(0.5, 3, 50, 7)
    fit = fit_gamma_frailty(x, t, e, g, theta=0.5)
    again = FrailtyFit.from_dict(json.loads(json.dumps(fit.to_dict())))
    np.testing.assert_array_equal(again.beta, fit.beta)
    assert again.frailty_means == fit.frailty_means
    np.testing.assert_array_equal(again.frailty_of(["zzz", None]), [1.0, 1.0])
    r = predict_risk_frailty(fit, x[:3], 1000.0, g[:3])
    assert np.all((r > 0) & (r < 1))
