"""Grey-box RC thermal models: stepping, one-step prediction, fitting, selection.

Five nested lumped-parameter kinds describe a room's air temperature T_i.
Optional hidden nodes add an envelope temperature T_e and a heater-medium
temperature T_h; the richest kind also has a direct air-to-ambient leak.
All dynamics are linear; one forward-Euler step of length dt is

    x' = A @ x + B @ [T_a, a]

with x the state vector (T_i first). Time is measured in hours internally,
resistances in degC per unit power, capacities in energy per degC. Every kind
carries an exact scaling symmetry (C -> s*C, R -> R/s, Phi_h -> s*Phi_h gives
the same input/output map), so the fit pins C_i = 1 and the remaining
parameters carry all identifiable content.

Fitting minimizes the mean squared one-step-ahead prediction error of T_i:
hidden states are propagated by the model while the observed T_i is injected
at every step, which is also how a twin tracks its physical counterpart when
subscribed to live sensor data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter

BLOWUP_LIMIT = 200.0  # degC; beyond this the Euler step has left physical territory


class ModelKind(str, Enum):
    TI = "Ti"
    TITH = "TiTh"
    TITE = "TiTe"
    TITETH = "TiTeTh"
    TITETHRIA = "TiTeThRia"


# Complexity order for tie-breaking: fewer hidden nodes first, then fewer params.
KIND_ORDER = [ModelKind.TI, ModelKind.TITH, ModelKind.TITE, ModelKind.TITETH,
              ModelKind.TITETHRIA]

STATE_VARS = {
    ModelKind.TI: ("T_i",),
    ModelKind.TITH: ("T_i", "T_h"),
    ModelKind.TITE: ("T_i", "T_e"),
    ModelKind.TITETH: ("T_i", "T_e", "T_h"),
    ModelKind.TITETHRIA: ("T_i", "T_e", "T_h"),
}

PARAM_FIELDS = {
    ModelKind.TI: ("c_i", "r_ia", "phi_h"),
    ModelKind.TITH: ("c_i", "c_h", "r_ia", "r_ih", "phi_h"),
    ModelKind.TITE: ("c_i", "c_e", "r_ie", "r_ea", "phi_h"),
    ModelKind.TITETH: ("c_i", "c_e", "c_h", "r_ie", "r_ea", "r_ih", "phi_h"),
    ModelKind.TITETHRIA: ("c_i", "c_e", "c_h", "r_ia", "r_ie", "r_ea", "r_ih", "phi_h"),
}

# Search bounds: resistances and capacities span the plausible building range,
# the heater gain floor sits at 1e-4 because the search runs on log-parameters.
R_BOUNDS = (0.05, 50.0)
C_BOUNDS = (0.1, 100.0)
PHI_BOUNDS = (1e-4, 10.0)

_BOUND_OF = {"c": C_BOUNDS, "r": R_BOUNDS, "p": PHI_BOUNDS}


class NumericalBlowup(ArithmeticError):
    pass


class InsufficientData(ValueError):
    pass


class DegenerateSeries(ValueError):
    pass


@dataclass(frozen=True)
class ThermalParams:
    """Parameter set; fields a kind does not use stay None."""

    c_i: float = 1.0
    c_e: Optional[float] = None
    c_h: Optional[float] = None
    r_ia: Optional[float] = None
    r_ie: Optional[float] = None
    r_ea: Optional[float] = None
    r_ih: Optional[float] = None
    phi_h: float = 0.0
    sigma: float = 0.0  # process-noise std on T_i, degC per step

    def used(self, kind: ModelKind) -> dict[str, float]:
        return {name: getattr(self, name) for name in PARAM_FIELDS[kind]}


def rescale_gauge(params: ThermalParams, kind: ModelKind, c_i: float) -> ThermalParams:
    """Move a parameter set along its scaling orbit so that its c_i matches.

    The returned parameters generate exactly the same trajectories.
    """
    s = c_i / params.c_i
    updates: dict[str, float] = {}
    for name in PARAM_FIELDS[kind]:
        v = getattr(params, name)
        if name.startswith("c"):
            updates[name] = v * s
        elif name.startswith("r"):
            updates[name] = v / s
        else:  # phi_h
            updates[name] = v * s
    return replace(params, **updates)


def transition_matrices(kind: ModelKind, params: ThermalParams,
                        dt_minutes: float) -> tuple[np.ndarray, np.ndarray]:
    """(A, B) of the Euler step x' = A @ x + B @ [T_a, a]."""
    dt = dt_minutes / 60.0
    p = params
    if kind == ModelKind.TI:
        k_ia = dt / (p.c_i * p.r_ia)
        A = np.array([[1.0 - k_ia]])
        B = np.array([[k_ia, dt * p.phi_h / p.c_i]])
    elif kind == ModelKind.TITH:
        k_ia = dt / (p.c_i * p.r_ia)
        k_ih = dt / (p.c_i * p.r_ih)
        g_ih = dt / (p.c_h * p.r_ih)
        A = np.array([
            [1.0 - k_ia - k_ih, k_ih],
            [g_ih, 1.0 - g_ih],
        ])
        B = np.array([
            [k_ia, 0.0],
            [0.0, dt * p.phi_h / p.c_h],
        ])
    elif kind == ModelKind.TITE:
        k_ie = dt / (p.c_i * p.r_ie)
        g_ie = dt / (p.c_e * p.r_ie)
        g_ea = dt / (p.c_e * p.r_ea)
        A = np.array([
            [1.0 - k_ie, k_ie],
            [g_ie, 1.0 - g_ie - g_ea],
        ])
        B = np.array([
            [0.0, dt * p.phi_h / p.c_i],
            [g_ea, 0.0],
        ])
    elif kind in (ModelKind.TITETH, ModelKind.TITETHRIA):
        k_ia = dt / (p.c_i * p.r_ia) if kind == ModelKind.TITETHRIA else 0.0
        k_ie = dt / (p.c_i * p.r_ie)
        k_ih = dt / (p.c_i * p.r_ih)
        g_ie = dt / (p.c_e * p.r_ie)
        g_ea = dt / (p.c_e * p.r_ea)
        h_ih = dt / (p.c_h * p.r_ih)
        A = np.array([
            [1.0 - k_ia - k_ie - k_ih, k_ie, k_ih],
            [g_ie, 1.0 - g_ie - g_ea, 0.0],
            [h_ih, 0.0, 1.0 - h_ih],
        ])
        B = np.array([
            [k_ia, 0.0],
            [g_ea, 0.0],
            [0.0, dt * p.phi_h / p.c_h],
        ])
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return A, B


def initial_state(kind: ModelKind, t_i: float) -> np.ndarray:
    """Hidden nodes start at the first observed air temperature."""
    return np.full(len(STATE_VARS[kind]), float(t_i))


def step(kind: ModelKind, params: ThermalParams, state: np.ndarray, t_a: float,
         a: float, dt_minutes: float, rng: Optional[np.random.Generator] = None,
         matrices: Optional[tuple[np.ndarray, np.ndarray]] = None) -> np.ndarray:
    """One Euler step. `rng` enables process noise of std params.sigma on T_i."""
    A, B = matrices if matrices is not None else transition_matrices(kind, params, dt_minutes)
    new = A @ np.asarray(state, dtype=float) + B @ np.array([t_a, a], dtype=float)
    if rng is not None and params.sigma > 0:
        new[0] += rng.normal(0.0, params.sigma)
    if not np.all(np.isfinite(new)) or np.any(np.abs(new) > BLOWUP_LIMIT):
        raise NumericalBlowup(
            f"{kind.value} state left [-{BLOWUP_LIMIT}, {BLOWUP_LIMIT}] degC")
    return new


def simulate(kind: ModelKind, params: ThermalParams, t_i0: float,
             t_a: np.ndarray, a: np.ndarray, dt_minutes: float,
             rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Free-running trajectory of T_i, length len(t_a)+1 including the start."""
    t_a = np.asarray(t_a, dtype=float)
    a = np.asarray(a, dtype=float)
    if t_a.shape != a.shape:
        raise ValueError("t_a and a must have equal length")
    matrices = transition_matrices(kind, params, dt_minutes)
    state = initial_state(kind, t_i0)
    out = np.empty(len(t_a) + 1)
    out[0] = t_i0
    for k in range(len(t_a)):
        state = step(kind, params, state, t_a[k], a[k], dt_minutes,
                     rng=rng, matrices=matrices)
        out[k + 1] = state[0]
    return out


def _hidden_filter(phi: float, drive: np.ndarray, init: float) -> np.ndarray:
    """h[k] for k = 0..len(drive): h[0] = init, h[k] = phi*h[k-1] + drive[k-1]."""
    out = np.empty(len(drive) + 1)
    out[0] = init
    if len(drive):
        out[1:] = lfilter([1.0], [1.0, -phi], drive, zi=np.array([phi * init]))[0]
    return out


def one_step_predictions(kind: ModelKind, params: ThermalParams, t_i: np.ndarray,
                         t_a: np.ndarray, a: np.ndarray,
                         dt_minutes: float) -> np.ndarray:
    """Predicted T_i[1:]: observed T_i injected, hidden states model-propagated."""
    t_i = np.asarray(t_i, dtype=float)
    t_a = np.asarray(t_a, dtype=float)
    a = np.asarray(a, dtype=float)
    n = len(t_i)
    if len(t_a) != n or len(a) != n:
        raise ValueError("series must have equal length")
    if n < 2:
        raise ValueError("need at least two samples")
    dt = dt_minutes / 60.0
    p = params
    y, ua, u = t_i[: n - 1], t_a[: n - 1], a[: n - 1]

    if kind == ModelKind.TI:
        k_ia = dt / (p.c_i * p.r_ia)
        return y + k_ia * (ua - y) + (dt * p.phi_h / p.c_i) * u

    if kind == ModelKind.TITH:
        k_ia = dt / (p.c_i * p.r_ia)
        k_ih = dt / (p.c_i * p.r_ih)
        g_ih = dt / (p.c_h * p.r_ih)
        drive = g_ih * y[:-1] + (dt * p.phi_h / p.c_h) * u[:-1]
        th = _hidden_filter(1.0 - g_ih, drive, t_i[0])
        return y + k_ia * (ua - y) + k_ih * (th - y)

    if kind == ModelKind.TITE:
        k_ie = dt / (p.c_i * p.r_ie)
        g_ie = dt / (p.c_e * p.r_ie)
        g_ea = dt / (p.c_e * p.r_ea)
        drive = g_ie * y[:-1] + g_ea * ua[:-1]
        te = _hidden_filter(1.0 - g_ie - g_ea, drive, t_i[0])
        return y + k_ie * (te - y) + (dt * p.phi_h / p.c_i) * u

    if kind in (ModelKind.TITETH, ModelKind.TITETHRIA):
        k_ie = dt / (p.c_i * p.r_ie)
        k_ih = dt / (p.c_i * p.r_ih)
        g_ie = dt / (p.c_e * p.r_ie)
        g_ea = dt / (p.c_e * p.r_ea)
        h_ih = dt / (p.c_h * p.r_ih)
        te = _hidden_filter(1.0 - g_ie - g_ea, g_ie * y[:-1] + g_ea * ua[:-1], t_i[0])
        th = _hidden_filter(1.0 - h_ih, h_ih * y[:-1] + (dt * p.phi_h / p.c_h) * u[:-1],
                            t_i[0])
        pred = y + k_ie * (te - y) + k_ih * (th - y)
        if kind == ModelKind.TITETHRIA:
            pred = pred + (dt / (p.c_i * p.r_ia)) * (ua - y)
        return pred

    raise ValueError(f"unknown kind {kind!r}")


def evaluate_mse(kind: ModelKind, params: ThermalParams, t_i: np.ndarray,
                 t_a: np.ndarray, a: np.ndarray, dt_minutes: float) -> float:
    """Mean squared one-step-ahead T_i prediction error."""
    pred = one_step_predictions(kind, params, t_i, t_a, a, dt_minutes)
    err = pred - np.asarray(t_i, dtype=float)[1:]
    return float(np.mean(err * err))


# -- fitting -------------------------------------------------------------------

MIN_FIT_SAMPLES = 96


@dataclass(frozen=True)
class FitResult:
    kind: ModelKind
    params: ThermalParams
    train_mse: float
    n_samples: int


def _search_fields(kind: ModelKind) -> tuple[str, ...]:
    # c_i is the gauge and stays pinned at 1.
    return tuple(f for f in PARAM_FIELDS[kind] if f != "c_i")


def _params_from_vector(kind: ModelKind, log_vec: np.ndarray) -> ThermalParams:
    values = {name: float(np.exp(v)) for name, v in zip(_search_fields(kind), log_vec)}
    return ThermalParams(c_i=1.0, **values)


def fit(kind: ModelKind, t_i: np.ndarray, t_a: np.ndarray, a: np.ndarray,
        dt_minutes: float, seed: int, n_starts: int = 16) -> FitResult:
    """Fit one kind by multi-start + Powell local search on log-parameters.

    Deterministic for a given seed. The result's train MSE never exceeds the
    best multi-start candidate's initial MSE (local search only accepts
    improvements).
    """
    t_i = np.asarray(t_i, dtype=float)
    t_a = np.asarray(t_a, dtype=float)
    a = np.asarray(a, dtype=float)
    n = len(t_i)
    if n < MIN_FIT_SAMPLES:
        raise InsufficientData(f"need >= {MIN_FIT_SAMPLES} samples, got {n}")
    if len(t_a) != n or len(a) != n:
        raise ValueError("series must have equal length")
    if float(np.ptp(t_i)) < 1e-12:
        raise DegenerateSeries("T_i is constant; dynamics unidentifiable")

    names = _search_fields(kind)
    lo = np.log([_BOUND_OF[name[0]][0] for name in names])
    hi = np.log([_BOUND_OF[name[0]][1] for name in names])
    target = t_i[1:]

    def objective(log_vec: np.ndarray) -> float:
        # Extreme corners of the box make the Euler filters unstable; the
        # resulting inf/nan just means "terrible fit".
        with np.errstate(over="ignore", invalid="ignore"):
            params = _params_from_vector(kind, np.clip(log_vec, lo, hi))
            pred = one_step_predictions(kind, params, t_i, t_a, a, dt_minutes)
            err = pred - target
            mse = float(np.mean(err * err))
        # cap keeps Brent's internal products finite at hopeless corners
        return min(mse, 1e12) if math.isfinite(mse) else 1e12

    rng = np.random.default_rng(seed)
    starts = rng.uniform(lo, hi, size=(n_starts, len(names)))
    bounds = list(zip(lo, hi))

    best_vec = None
    best_val = math.inf
    best_start_val = math.inf
    for start in starts:
        start_val = objective(start)
        best_start_val = min(best_start_val, start_val)
        res = minimize(objective, start, method="Powell", bounds=bounds,
                       options={"maxfev": 250 * len(names), "xtol": 1e-7,
                                "ftol": 1e-12})
        val = min(res.fun, start_val)
        vec = res.x if res.fun <= start_val else start
        if val < best_val:
            best_val = val
            best_vec = vec

    # Polish the winner with a tight tolerance.
    res = minimize(objective, best_vec, method="Powell", bounds=bounds,
                   options={"maxfev": 4000 * len(names), "xtol": 1e-12,
                            "ftol": 1e-16})
    if res.fun <= best_val:
        best_val = float(res.fun)
        best_vec = res.x

    assert best_val <= best_start_val + 1e-15
    params = _params_from_vector(kind, np.clip(best_vec, lo, hi))
    params = replace(params, sigma=math.sqrt(max(best_val, 0.0)))
    return FitResult(kind=kind, params=params, train_mse=best_val, n_samples=n)


@dataclass(frozen=True)
class KindScore:
    kind: ModelKind
    train_mse: float
    heldout_mse: float


@dataclass(frozen=True)
class SelectionResult:
    best: FitResult
    scores: tuple[KindScore, ...]


MSE_TIE_TOL = 1e-9


def pick_best_kind(scores: list[KindScore]) -> ModelKind:
    """Argmin of held-out MSE; ties within MSE_TIE_TOL go to the simpler kind."""
    ranked = sorted(scores, key=lambda s: KIND_ORDER.index(s.kind))
    floor = min(s.heldout_mse for s in ranked)
    return next(s.kind for s in ranked if s.heldout_mse <= floor + MSE_TIE_TOL)


def select_model(t_i: np.ndarray, t_a: np.ndarray, a: np.ndarray, dt_minutes: float,
                 train_samples: int, seed: int, n_starts: int = 16,
                 heldout: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
                 ) -> SelectionResult:
    """Fit every kind on the first train_samples, rank by held-out MSE.

    The held-out window defaults to the remainder of the series. Ties within
    MSE_TIE_TOL go to the simpler kind (fewer hidden nodes, then fewer
    parameters).
    """
    t_i = np.asarray(t_i, dtype=float)
    t_a = np.asarray(t_a, dtype=float)
    a = np.asarray(a, dtype=float)
    if heldout is None:
        if not (0 < train_samples < len(t_i)):
            raise InsufficientData("train_samples must split the series")
        heldout = (t_i[train_samples:], t_a[train_samples:], a[train_samples:])
    fits: dict[ModelKind, FitResult] = {}
    scores: list[KindScore] = []
    for kind in KIND_ORDER:
        result = fit(kind, t_i[:train_samples], t_a[:train_samples],
                     a[:train_samples], dt_minutes, seed, n_starts=n_starts)
        held = evaluate_mse(kind, result.params, *heldout, dt_minutes)
        fits[kind] = result
        scores.append(KindScore(kind, result.train_mse, held))
    best_kind = pick_best_kind(scores)
    return SelectionResult(best=fits[best_kind], scores=tuple(scores))


# -- persistence ---------------------------------------------------------------

_JSON_NAMES = {
    "c_i": "C_i", "c_e": "C_e", "c_h": "C_h", "r_ia": "R_ia", "r_ie": "R_ie",
    "r_ea": "R_ea", "r_ih": "R_ih", "phi_h": "Phi_h", "sigma": "sigma",
}
_FROM_JSON = {v: k for k, v in _JSON_NAMES.items()}


def twin_to_dict(result: FitResult, dt_minutes: float,
                 data_window: dict) -> dict:
    """JSON document for a fitted twin; fittedAt is the window end (see docs)."""
    params = {_JSON_NAMES[k]: v for k, v in result.params.used(result.kind).items()}
    params["sigma"] = result.params.sigma
    return {
        "kind": result.kind.value,
        "params": params,
        "dtMinutes": dt_minutes,
        "trainMse": result.train_mse,
        "fittedAt": data_window["end"],
        "dataWindow": data_window,
    }


def twin_from_dict(doc: dict) -> tuple[ModelKind, ThermalParams, float]:
    kind = ModelKind(doc["kind"])
    fields = {_FROM_JSON[k]: float(v) for k, v in doc["params"].items()}
    return kind, ThermalParams(**fields), float(doc["dtMinutes"])


def save_twin(result: FitResult, dt_minutes: float, data_window: dict,
              path: str | Path) -> None:
    Path(path).write_text(json.dumps(twin_to_dict(result, dt_minutes, data_window),
                                     indent=2, sort_keys=True) + "\n")


def load_twin(path: str | Path) -> tuple[ModelKind, ThermalParams, float]:
    return twin_from_dict(json.loads(Path(path).read_text()))
