import numpy as np
import pytest

from twinheat import thermal as th
from twinheat.thermal import ModelKind, ThermalParams

DT = 15.0

TRUE_PARAMS = {
    ModelKind.TI: ThermalParams(c_i=2.0, r_ia=1.5, phi_h=0.8),
    ModelKind.TITH: ThermalParams(c_i=1.0, c_h=0.4, r_ia=6.0, r_ih=1.0, phi_h=2.0),
    ModelKind.TITE: ThermalParams(c_i=1.0, c_e=8.0, r_ie=1.2, r_ea=4.0, phi_h=2.0),
    ModelKind.TITETH: ThermalParams(c_i=1.0, c_e=8.0, c_h=0.4, r_ie=1.2, r_ea=4.0,
                                    r_ih=1.0, phi_h=2.0),
    ModelKind.TITETHRIA: ThermalParams(c_i=1.0, c_e=8.0, c_h=0.4, r_ia=9.0, r_ie=1.2,
                                       r_ea=4.0, r_ih=1.0, phi_h=2.0),
}


def synth_inputs(days, seed):
    n = days * 96
    rng = np.random.default_rng(seed)
    hours = np.arange(n) * 0.25
    t_a = (8.0 - 3.0 * np.cos(2 * np.pi * (hours - 5) / 24)
           + 0.05 * rng.normal(0, 0.3, n).cumsum())
    a = ((np.sin(2 * np.pi * hours / 5.5 + rng.uniform(0, 6)) > 0.2)
         | (rng.random(n) < 0.05)).astype(float)
    return t_a, a


def generate(kind, params, days, seed, sigma=0.0, t_i0=16.0):
    """Trajectory from a known model; hidden nodes start at t_i0."""
    t_a, a = synth_inputs(days, seed)
    params = ThermalParams(**{**params.__dict__, "sigma": sigma})
    rng = np.random.default_rng(seed + 1000) if sigma > 0 else None
    traj = th.simulate(kind, params, t_i0, t_a, a, DT, rng=rng)
    return traj[:-1], t_a, a


# -- stepping -------------------------------------------------------------


def test_step_hand_oracle_cooling():
    # dt/(C_i*R_ia) = 0.1 with dt = 6 min = 0.1 h
    p = ThermalParams(c_i=1.0, r_ia=1.0, phi_h=1.0)
    out = th.step(ModelKind.TI, p, np.array([18.0]), t_a=8.0, a=0.0, dt_minutes=6.0)
    assert out[0] == pytest.approx(17.0, abs=1e-12)


def test_step_hand_oracle_heating():
    p = ThermalParams(c_i=1.0, r_ia=1.0, phi_h=1.0)
    out = th.step(ModelKind.TI, p, np.array([18.0]), t_a=8.0, a=1.0, dt_minutes=6.0)
    assert out[0] == pytest.approx(17.1, abs=1e-12)


@pytest.mark.parametrize("kind", list(ModelKind))
def test_equilibrium_is_fixed_point(kind):
    params = TRUE_PARAMS[kind]
    state = th.initial_state(kind, 15.0)
    out = th.step(kind, params, state, t_a=15.0, a=0.0, dt_minutes=DT)
    assert np.allclose(out, 15.0, atol=1e-12)


@pytest.mark.parametrize("kind", list(ModelKind))
def test_heating_never_cools(kind):
    params = TRUE_PARAMS[kind]
    state = th.initial_state(kind, 17.0)
    cold = th.step(kind, params, state, 5.0, 0.0, DT)
    warm = th.step(kind, params, state, 5.0, 1.0, DT)
    assert np.all(warm >= cold)
    # and after a second step the heat reaches T_i for every kind
    cold2 = th.step(kind, params, cold, 5.0, 0.0, DT)
    warm2 = th.step(kind, params, warm, 5.0, 1.0, DT)
    assert warm2[0] > cold2[0]


@pytest.mark.parametrize("kind", list(ModelKind))
def test_step_is_affine_in_state(kind):
    params = TRUE_PARAMS[kind]
    rng = np.random.default_rng(3)
    dim = len(th.STATE_VARS[kind])
    s1 = rng.uniform(10, 25, dim)
    s2 = rng.uniform(10, 25, dim)
    lam = 0.3
    mixed = th.step(kind, params, lam * s1 + (1 - lam) * s2, 7.0, 0.5, DT)
    split = (lam * th.step(kind, params, s1, 7.0, 0.5, DT)
             + (1 - lam) * th.step(kind, params, s2, 7.0, 0.5, DT))
    assert np.allclose(mixed, split, atol=1e-12)


def test_unstable_step_raises_blowup():
    # dt/(C_i*R_ia) = 50: Euler wildly unstable
    p = ThermalParams(c_i=0.1, r_ia=0.05, phi_h=0.0)
    state = np.array([18.0])
    with pytest.raises(th.NumericalBlowup):
        for _ in range(10):
            state = th.step(ModelKind.TI, p, state, 8.0, 0.0, DT)


def test_process_noise_is_seeded_and_optional():
    p = ThermalParams(c_i=1.0, r_ia=2.0, phi_h=1.0, sigma=0.3)
    t_a, a = synth_inputs(1, 5)
    clean1 = th.simulate(ModelKind.TI, p, 18.0, t_a, a, DT)
    clean2 = th.simulate(ModelKind.TI, p, 18.0, t_a, a, DT)
    assert np.array_equal(clean1, clean2)  # no rng: sigma ignored
    noisy1 = th.simulate(ModelKind.TI, p, 18.0, t_a, a, DT, rng=np.random.default_rng(1))
    noisy2 = th.simulate(ModelKind.TI, p, 18.0, t_a, a, DT, rng=np.random.default_rng(1))
    assert np.array_equal(noisy1, noisy2)
    assert not np.array_equal(noisy1, clean1)


# -- one-step predictions vs an independent reference --------------------------


def reference_predictions(kind, p, t_i, t_a, a, dt_minutes):
    """Plain-python injection predictor, written independently of the package."""
    dt = dt_minutes / 60.0
    n = len(t_i)
    te = th_ = t_i[0]
    preds = []
    for k in range(n - 1):
        ti = t_i[k]
        if kind == ModelKind.TI:
            dti = ((t_a[k] - ti) / p.r_ia + p.phi_h * a[k]) / p.c_i
            preds.append(ti + dt * dti)
        elif kind == ModelKind.TITH:
            dti = ((t_a[k] - ti) / p.r_ia + (th_ - ti) / p.r_ih) / p.c_i
            dth = ((ti - th_) / p.r_ih + p.phi_h * a[k]) / p.c_h
            preds.append(ti + dt * dti)
            th_ = th_ + dt * dth
        elif kind == ModelKind.TITE:
            dti = ((te - ti) / p.r_ie + p.phi_h * a[k]) / p.c_i
            dte = ((ti - te) / p.r_ie + (t_a[k] - te) / p.r_ea) / p.c_e
            preds.append(ti + dt * dti)
            te = te + dt * dte
        else:
            leak = (t_a[k] - ti) / p.r_ia if kind == ModelKind.TITETHRIA else 0.0
            dti = ((te - ti) / p.r_ie + (th_ - ti) / p.r_ih + leak) / p.c_i
            dte = ((ti - te) / p.r_ie + (t_a[k] - te) / p.r_ea) / p.c_e
            dth = ((ti - th_) / p.r_ih + p.phi_h * a[k]) / p.c_h
            preds.append(ti + dt * dti)
            te, th_ = te + dt * dte, th_ + dt * dth
    return np.array(preds)


@pytest.mark.parametrize("kind", list(ModelKind))
def test_fast_predictor_matches_reference(kind):
    params = TRUE_PARAMS[kind]
    rng = np.random.default_rng(11)
    n = 300
    t_i = 17.0 + rng.normal(0, 1.5, n).cumsum() * 0.1
    t_a = 8.0 + rng.normal(0, 1.0, n)
    a = (rng.random(n) < 0.4).astype(float)
    fast = th.one_step_predictions(kind, params, t_i, t_a, a, DT)
    ref = reference_predictions(kind, params, t_i, t_a, a, DT)
    assert np.allclose(fast, ref, atol=1e-10)


def test_evaluate_mse_hand_computed():
    # near-constant predictor: R_ia=50, C_i=100 leaks only 5e-5 per step
    p = ThermalParams(c_i=100.0, r_ia=50.0, phi_h=0.0)
    t_i = np.array([18.0, 19.0, 21.0])
    t_a = np.array([10.0, 10.0, 10.0])
    a = np.zeros(3)
    k_ia = 0.25 / (100.0 * 50.0)
    pred1 = 18.0 + k_ia * (10.0 - 18.0)
    pred2 = 19.0 + k_ia * (10.0 - 19.0)
    expected = ((19.0 - pred1) ** 2 + (21.0 - pred2) ** 2) / 2.0
    got = th.evaluate_mse(ModelKind.TI, p, t_i, t_a, a, DT)
    assert got == pytest.approx(expected, rel=1e-12)
    # and the tiny leak keeps it within a hair of the first-difference variance
    assert got == pytest.approx(np.mean(np.diff(t_i) ** 2), rel=1e-3)


# -- fitting ----------------------------------------------------------------


def test_fit_rejects_short_series():
    t_i = np.linspace(18, 17, 50)
    with pytest.raises(th.InsufficientData):
        th.fit(ModelKind.TI, t_i, np.full(50, 8.0), np.zeros(50), DT, seed=1)


def test_fit_rejects_constant_series():
    n = 200
    with pytest.raises(th.DegenerateSeries):
        th.fit(ModelKind.TI, np.full(n, 18.0), np.full(n, 8.0), np.zeros(n), DT, seed=1)


def test_fit_recovers_ti_model():
    true = TRUE_PARAMS[ModelKind.TI]
    t_i, t_a, a = generate(ModelKind.TI, true, 7, seed=7)
    res = th.fit(ModelKind.TI, t_i, t_a, a, DT, seed=42)
    assert res.train_mse < 1e-9
    rescaled = th.rescale_gauge(res.params, ModelKind.TI, true.c_i)
    assert rescaled.c_i == pytest.approx(2.0)
    assert rescaled.r_ia == pytest.approx(1.5, rel=0.05)
    assert rescaled.phi_h == pytest.approx(0.8, rel=0.05)


def test_fit_is_deterministic():
    t_i, t_a, a = generate(ModelKind.TI, TRUE_PARAMS[ModelKind.TI], 2, seed=3, sigma=0.1)
    r1 = th.fit(ModelKind.TI, t_i, t_a, a, DT, seed=5)
    r2 = th.fit(ModelKind.TI, t_i, t_a, a, DT, seed=5)
    assert r1.train_mse == r2.train_mse
    assert r1.params == r2.params


def test_fit_never_worse_than_its_starts():
    # reproduce the multi-start draws exactly as fit makes them
    kind = ModelKind.TITH
    t_i, t_a, a = generate(kind, TRUE_PARAMS[kind], 3, seed=9, sigma=0.2)
    seed = 21
    res = th.fit(kind, t_i, t_a, a, DT, seed=seed)
    names = [f for f in th.PARAM_FIELDS[kind] if f != "c_i"]
    lo = np.log([th._BOUND_OF[n[0]][0] for n in names])
    hi = np.log([th._BOUND_OF[n[0]][1] for n in names])
    starts = np.random.default_rng(seed).uniform(lo, hi, size=(16, len(names)))
    with np.errstate(over="ignore", invalid="ignore"):
        start_mses = []
        for vec in starts:
            params = th._params_from_vector(kind, vec)
            start_mses.append(th.evaluate_mse(kind, params, t_i, t_a, a, DT))
    assert res.train_mse <= np.nanmin(start_mses) + 1e-15


def test_rescale_gauge_preserves_dynamics():
    for kind, params in TRUE_PARAMS.items():
        other = th.rescale_gauge(params, kind, 7.3)
        t_a, a = synth_inputs(2, 17)
        orig = th.simulate(kind, params, 16.0, t_a, a, DT)
        scaled = th.simulate(kind, other, 16.0, t_a, a, DT)
        assert np.allclose(orig, scaled, atol=1e-9)


def test_pick_best_kind_tie_breaks_to_simpler():
    scores = [
        th.KindScore(ModelKind.TI, 0.0, 3e-3),
        th.KindScore(ModelKind.TITH, 0.0, 1e-10),
        th.KindScore(ModelKind.TITE, 0.0, 4e-10),  # within 1e-9 of the floor
        th.KindScore(ModelKind.TITETH, 0.0, 5e-11),  # actual argmin
        th.KindScore(ModelKind.TITETHRIA, 0.0, 2e-3),
    ]
    assert th.pick_best_kind(scores) == ModelKind.TITH
    # outside the tolerance the argmin wins
    scores[1] = th.KindScore(ModelKind.TITH, 0.0, 1e-5)
    scores[2] = th.KindScore(ModelKind.TITE, 0.0, 1e-5)
    assert th.pick_best_kind(scores) == ModelKind.TITETH


def test_select_model_prefers_generating_kind():
    kind = ModelKind.TITE
    t_i, t_a, a = generate(kind, TRUE_PARAMS[kind], 10, seed=7)
    hold = generate(kind, TRUE_PARAMS[kind], 2, seed=31)
    sel = th.select_model(t_i, t_a, a, DT, train_samples=8 * 96, seed=42,
                          n_starts=8, heldout=hold)
    assert sel.best.kind == kind
    assert len(sel.scores) == 5
    assert sel.best.train_mse < 1e-9


# -- persistence ----------------------------------------------------------


def test_twin_json_round_trip(tmp_path):
    t_i, t_a, a = generate(ModelKind.TI, TRUE_PARAMS[ModelKind.TI], 2, seed=3)
    res = th.fit(ModelKind.TI, t_i, t_a, a, DT, seed=5)
    window = {"start": "2022-11-07T00:00:00Z", "end": "2022-11-09T00:00:00Z",
              "samples": len(t_i)}
    path = tmp_path / "twin.json"
    th.save_twin(res, DT, window, path)
    doc = __import__("json").loads(path.read_text())
    assert doc["kind"] == "Ti"
    assert doc["dtMinutes"] == DT
    assert doc["fittedAt"] == window["end"]
    assert doc["dataWindow"] == window
    assert set(doc["params"]) == {"C_i", "R_ia", "Phi_h", "sigma"}
    kind, params, dt = th.load_twin(path)
    assert kind == ModelKind.TI
    assert dt == DT
    assert params.r_ia == pytest.approx(res.params.r_ia)
    pred_a = th.one_step_predictions(ModelKind.TI, res.params, t_i, t_a, a, DT)
    pred_b = th.one_step_predictions(kind, params, t_i, t_a, a, DT)
    assert np.allclose(pred_a, pred_b, atol=1e-12)
