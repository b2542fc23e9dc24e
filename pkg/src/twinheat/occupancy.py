"""Time-varying two-state Markov occupancy models on a weekly 15-minute grid.

Each of n_max occupants moves independently between out (0) and in (1); the
transition matrix depends on (day of week, slot of day), so the model is one
(7, 96, 2, 2) array with row-stochastic 2x2 blocks. The room counts as
occupied while at least one occupant is in, hence
P(occupied) = 1 - prod_k (1 - q_k) for independent per-occupant marginals q_k.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

SLOTS_PER_DAY = 96
DAYS_PER_WEEK = 7
SLOTS_PER_WEEK = SLOTS_PER_DAY * DAYS_PER_WEEK

ROW_SUM_TOL = 1e-9


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class OccupancyModel:
    n_max: int
    p: np.ndarray  # (7, 96, 2, 2); p[day, slot, current, next]

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        p = np.asarray(self.p, dtype=float)
        if p.shape != (DAYS_PER_WEEK, SLOTS_PER_DAY, 2, 2):
            raise ValueError(f"p must have shape (7, 96, 2, 2), got {p.shape}")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("transition probabilities must lie in [0, 1]")
        if np.any(np.abs(p.sum(axis=3) - 1.0) > ROW_SUM_TOL):
            raise ValueError("transition rows must sum to 1")
        object.__setattr__(self, "p", p)


def sample_step(model: OccupancyModel, day: int, slot: int, states: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
    """Advance every occupant one slot using the (day, slot) matrix."""
    states = np.asarray(states)
    p_in = model.p[day, slot, states, 1]
    return (rng.random(len(states)) < p_in).astype(np.int8)


def sample_counts(model: OccupancyModel, n_steps: int, rng: np.random.Generator,
                  start_day: int = 0, start_slot: int = 0,
                  init_states: Optional[np.ndarray] = None) -> np.ndarray:
    """Occupant-count series over consecutive slots; index 0 is the start slot."""
    states = (np.zeros(model.n_max, dtype=np.int8) if init_states is None
              else np.asarray(init_states, dtype=np.int8).copy())
    counts = np.empty(n_steps, dtype=np.int64)
    pos = start_day * SLOTS_PER_DAY + start_slot
    for k in range(n_steps):
        counts[k] = int(states.sum())
        day, slot = divmod(pos % SLOTS_PER_WEEK, SLOTS_PER_DAY)
        states = sample_step(model, day, slot, states, rng)
        pos += 1
    return counts


def marginal_occupied_prob(model: OccupancyModel, horizon_weeks: int = 4) -> np.ndarray:
    """(7, 96) grid of P(room occupied) over the final week of the horizon.

    Per-occupant Bernoulli marginals start at q=0 (everyone out) on day 0,
    slot 0 and are propagated exactly; the room probability applies the
    independence formula.
    """
    if horizon_weeks < 1:
        raise ValueError("horizon_weeks must be >= 1")
    q = 0.0
    grid = np.empty((DAYS_PER_WEEK, SLOTS_PER_DAY))
    for week in range(horizon_weeks):
        last = week == horizon_weeks - 1
        for day in range(DAYS_PER_WEEK):
            for slot in range(SLOTS_PER_DAY):
                if last:
                    grid[day, slot] = q
                mat = model.p[day, slot]
                q = q * mat[1, 1] + (1.0 - q) * mat[0, 1]
    return 1.0 - (1.0 - grid) ** model.n_max


def fit_occupancy(counts: np.ndarray, n_max: int, start_day: int = 0,
                  start_slot: int = 0) -> OccupancyModel:
    """Per-(day, slot) transition frequencies with Laplace pseudo-count 1.

    `counts` holds occupant counts on consecutive 15-minute slots. Aggregate
    counts cannot reveal who moved, so each consecutive pair is explained with
    the minimum churn: min(o, o') stayed in, |o - o'| entered or left, and the
    rest stayed out. Rows the data never observes stay at the smoothing prior
    (1/2, 1/2).
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1:
        raise ValueError("counts must be one-dimensional")
    if len(counts) < 2 * SLOTS_PER_WEEK:
        raise InsufficientData(
            f"need at least two weeks ({2 * SLOTS_PER_WEEK} slots), got {len(counts)}")
    if np.any(counts < 0) or np.any(counts > n_max):
        raise ValueError("counts must lie in [0, n_max]")

    tallies = np.zeros((DAYS_PER_WEEK, SLOTS_PER_DAY, 2, 2), dtype=np.int64)
    pos = start_day * SLOTS_PER_DAY + start_slot
    for k in range(len(counts) - 1):
        day, slot = divmod((pos + k) % SLOTS_PER_WEEK, SLOTS_PER_DAY)
        o0, o1 = counts[k], counts[k + 1]
        stays_in = min(o0, o1)
        enters = max(0, o1 - o0)
        leaves = max(0, o0 - o1)
        stays_out = n_max - o0 - enters
        cell = tallies[day, slot]
        cell[1, 1] += stays_in
        cell[1, 0] += leaves
        cell[0, 1] += enters
        cell[0, 0] += stays_out

    smoothed = tallies + 1.0
    p = smoothed / smoothed.sum(axis=3, keepdims=True)
    return OccupancyModel(n_max=n_max, p=p)


# -- builtin synthetic profiles -------------------------------------------------


def _fill(grid: np.ndarray, days, start_hour: float, end_hour: float, value: float):
    a, b = int(round(start_hour * 4)), int(round(end_hour * 4))
    for d in days:
        grid[d, a:b] = value


def _from_equilibrium(pi: np.ndarray, kappa: float) -> np.ndarray:
    """Transition blocks whose per-slot stationary in-probability equals pi.

    p(out->in) = kappa*pi and p(in->out) = kappa*(1-pi) relax toward pi at
    rate kappa per slot, so slowly varying pi is tracked closely.
    """
    p = np.empty((DAYS_PER_WEEK, SLOTS_PER_DAY, 2, 2))
    p[..., 0, 1] = kappa * pi
    p[..., 0, 0] = 1.0 - p[..., 0, 1]
    p[..., 1, 0] = kappa * (1.0 - pi)
    p[..., 1, 1] = 1.0 - p[..., 1, 0]
    return p


WEEKDAYS = range(0, 5)
WEEKEND = range(5, 7)
ALL_DAYS = range(0, 7)


def _bedroom_profile() -> OccupancyModel:
    # Nocturnal, with a shifted lie-in on weekend mornings.
    pi = np.full((DAYS_PER_WEEK, SLOTS_PER_DAY), 0.03)
    _fill(pi, ALL_DAYS, 0, 7, 0.97)
    _fill(pi, WEEKDAYS, 7, 8, 0.40)
    _fill(pi, WEEKDAYS, 21, 22, 0.15)
    _fill(pi, WEEKDAYS, 22, 23, 0.60)
    _fill(pi, WEEKDAYS, 23, 24, 0.97)
    _fill(pi, WEEKEND, 7, 9, 0.97)  # lie-in
    _fill(pi, WEEKEND, 9, 10, 0.50)
    _fill(pi, WEEKEND, 10, 21, 0.04)
    _fill(pi, WEEKEND, 21, 22, 0.12)
    _fill(pi, WEEKEND, 22, 23, 0.50)
    _fill(pi, WEEKEND, 23, 24, 0.95)
    return OccupancyModel(n_max=2, p=_from_equilibrium(pi, kappa=0.5))


def _bathroom_profile() -> OccupancyModel:
    # Low, nearly flat daytime rate: short random visits.
    pi = np.full((DAYS_PER_WEEK, SLOTS_PER_DAY), 0.02)
    _fill(pi, WEEKDAYS, 6, 9, 0.30)
    _fill(pi, WEEKDAYS, 9, 18, 0.17)
    _fill(pi, WEEKDAYS, 18, 22, 0.30)
    _fill(pi, WEEKDAYS, 22, 23, 0.10)
    _fill(pi, WEEKEND, 7, 10, 0.30)
    _fill(pi, WEEKEND, 10, 18, 0.17)
    _fill(pi, WEEKEND, 18, 22, 0.30)
    _fill(pi, WEEKEND, 22, 23, 0.10)
    return OccupancyModel(n_max=1, p=_from_equilibrium(pi, kappa=0.7))


def _living_room_profile() -> OccupancyModel:
    # Morning, lunch and evening peaks for a four-person household.
    pi = np.full((DAYS_PER_WEEK, SLOTS_PER_DAY), 0.01)
    _fill(pi, WEEKDAYS, 7, 9, 0.35)
    _fill(pi, WEEKDAYS, 9, 12, 0.10)
    _fill(pi, WEEKDAYS, 12, 14, 0.30)
    _fill(pi, WEEKDAYS, 14, 18, 0.12)
    _fill(pi, ALL_DAYS, 18, 22, 0.55)
    _fill(pi, ALL_DAYS, 22, 23, 0.25)
    _fill(pi, ALL_DAYS, 23, 24, 0.05)
    _fill(pi, WEEKEND, 8, 10, 0.35)
    _fill(pi, WEEKEND, 10, 12, 0.20)
    _fill(pi, WEEKEND, 12, 14, 0.30)
    _fill(pi, WEEKEND, 14, 18, 0.20)
    return OccupancyModel(n_max=4, p=_from_equilibrium(pi, kappa=0.4))


def builtin_synthetic_profiles() -> dict[str, OccupancyModel]:
    return {
        "living_room": _living_room_profile(),
        "bedroom": _bedroom_profile(),
        "bathroom": _bathroom_profile(),
    }


# -- persistence ---------------------------------------------------------------


def occupancy_to_dict(model: OccupancyModel) -> dict:
    return {"nMax": model.n_max, "p": model.p.tolist()}


def occupancy_from_dict(doc: dict) -> OccupancyModel:
    return OccupancyModel(n_max=int(doc["nMax"]), p=np.asarray(doc["p"], dtype=float))


def save_occupancy(model: OccupancyModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(occupancy_to_dict(model), sort_keys=True) + "\n")


def load_occupancy(path: str | Path) -> OccupancyModel:
    return occupancy_from_dict(json.loads(Path(path).read_text()))
