"""Heating-control MDP over the twin models, plus a ground-truth room plant.

The same episode machinery serves two roles: a virtual environment whose
dynamics come from a fitted thermal twin and occupancy model (used to train
the agent without touching the real system), and a plant simulator with
committed hidden parameters that stands in for the real house during data
generation and closed-loop evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .occupancy import SLOTS_PER_DAY, SLOTS_PER_WEEK, OccupancyModel, sample_step
from .thermal import (
    STATE_VARS,
    ModelKind,
    ThermalParams,
    initial_state,
    step as thermal_step,
    transition_matrices,
)


class EpisodeFinished(RuntimeError):
    pass


@dataclass(frozen=True)
class MdpConfig:
    episode_steps: int = 1000
    step_minutes: float = 15.0
    comfort_temp: float = 18.0
    swing_band: float = 3.0
    energy_weight: float = 0.25
    swing_weight: float = 0.2
    discount: float = 0.95
    n_heat_levels: int = 3
    # evaluate the swing penalty exactly as printed in its source formula,
    # whose sign rewards leaving the heat off when too cold; default is the
    # described behaviour (penalize actions that do not restore equilibrium)
    literal_swing_formula: bool = False

    def __post_init__(self):
        if self.episode_steps < 1:
            raise ValueError("episode_steps must be >= 1")
        if self.step_minutes <= 0:
            raise ValueError("step_minutes must be positive")
        if self.swing_band <= 0 or self.energy_weight <= 0 or self.swing_weight <= 0:
            raise ValueError("swing_band, energy_weight, swing_weight must be positive")
        if not 0 < self.discount < 1:
            raise ValueError("discount must lie in (0, 1)")
        if self.n_heat_levels < 2:
            raise ValueError("need at least two heat levels")


def action_power(cfg: MdpConfig, action_index: int) -> float:
    """Discrete action -> normalized heater power on an even grid over [0, 1]."""
    if not 0 <= action_index < cfg.n_heat_levels:
        raise ValueError(f"action index {action_index} outside 0..{cfg.n_heat_levels - 1}")
    return action_index / (cfg.n_heat_levels - 1)


def reward(t_i: float, occupants: int, power: float, cfg: MdpConfig) -> float:
    """Comfort bonus minus energy cost minus the temperature-swing penalty.

    Comfort pays 1 when the room is above comfort_temp while someone is in it.
    Energy costs energy_weight per unit of normalized power. When the room has
    drifted more than swing_band away from comfort_temp, an action that does
    not push it back (heat off while too cold, heat on while too hot) costs
    swing_weight.
    """
    if not 0.0 <= power <= 1.0:
        raise ValueError("power must lie in [0, 1]")
    if occupants < 0:
        raise ValueError("occupants must be >= 0")
    delta = t_i - cfg.comfort_temp
    heating = power > 0

    if cfg.literal_swing_formula:
        comfort = 1.0 if (delta > 0 and occupants - 1 > 0) else 0.0
        swing = 0.0
        if abs(delta) - cfg.swing_band > 0:
            swing = (1.0 - 2.0 * heating) * math.copysign(1.0, delta)
        return comfort - cfg.energy_weight * power - cfg.swing_weight * swing

    comfort = 1.0 if (delta > 0 and occupants > 0) else 0.0
    penalty = 0.0
    if abs(delta) > cfg.swing_band:
        restoring = heating if delta < 0 else not heating
        if not restoring:
            penalty = cfg.swing_weight
    return comfort - cfg.energy_weight * power - penalty


# -- ambient weather -------------------------------------------------------------

AMBIENT_START_C = 12.0
AMBIENT_END_C = 5.0
AMBIENT_DAILY_AMPLITUDE_C = 3.0
AMBIENT_COLDEST_HOUR = 5.0


def generate_ambient(days: int, seed: int, noise_sigma: float = 0.5,
                     noise_rho: float = 0.9) -> np.ndarray:
    """Synthetic outdoor trace on the 15-minute grid, anchored Monday 00:00.

    A linear seasonal drift from 12 degC down to 5 degC across the horizon,
    a daily sinusoid of 3 degC amplitude bottoming out at 05:00, and AR(1)
    weather noise on top.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    n = days * SLOTS_PER_DAY
    k = np.arange(n)
    drift = AMBIENT_START_C + (AMBIENT_END_C - AMBIENT_START_C) * k / max(n - 1, 1)
    hour = (k % SLOTS_PER_DAY) * 24.0 / SLOTS_PER_DAY
    sinus = -AMBIENT_DAILY_AMPLITUDE_C * np.cos(
        2.0 * np.pi * (hour - AMBIENT_COLDEST_HOUR) / 24.0)
    noise = np.zeros(n)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        shocks = rng.normal(0.0, noise_sigma, size=n)
        level = 0.0
        for i in range(n):
            level = noise_rho * level + shocks[i]
            noise[i] = level
    return drift + sinus + noise


# -- environment -----------------------------------------------------------------


@dataclass(frozen=True)
class EnvState:
    """Everything the simulator knows at one step."""

    thermal: np.ndarray        # hidden model state, first entry is true T_i
    t_i_observed: float        # sensor reading of the first entry
    occupants: np.ndarray      # per-occupant in/out flags
    day: int
    slot: int
    t_ambient: float

    @property
    def t_i_true(self) -> float:
        return float(self.thermal[0])

    @property
    def occupant_count(self) -> int:
        return int(self.occupants.sum())


@dataclass(frozen=True)
class Transition:
    state: EnvState
    action_index: int
    reward: float
    next_state: EnvState
    done: bool


def thermal_feature_count(kind: ModelKind) -> int:
    """Model-state features fed to the agent: every node, plus the direct
    ambient leak flux for the kind that has one."""
    return len(STATE_VARS[kind]) + (1 if kind == ModelKind.TITETHRIA else 0)


TEMP_CENTER_C = 17.0
TEMP_SCALE_C = 6.0
AMBIENT_CENTER_C = 8.0
AMBIENT_SCALE_C = 6.0
LEAK_DELTA_SCALE_C = 12.0  # typical indoor/outdoor gap used to scale the leak flux
MIN_FEATURE_SCALE = 0.1    # keeps near-constant training windows from exploding


@dataclass(frozen=True)
class FeatureStats:
    """Normalization constants for the temperature-valued features.

    Defaults are plausible winter-indoor numbers; fits replace them with the
    statistics of their own training window.
    """

    temp_center: float = TEMP_CENTER_C
    temp_scale: float = TEMP_SCALE_C
    ambient_center: float = AMBIENT_CENTER_C
    ambient_scale: float = AMBIENT_SCALE_C

    def __post_init__(self):
        if self.temp_scale <= 0 or self.ambient_scale <= 0:
            raise ValueError("feature scales must be positive")


def compute_feature_stats(t_i: np.ndarray, t_a: np.ndarray) -> FeatureStats:
    """Mean/std of the observed indoor and ambient series, scale floored."""
    t_i = np.asarray(t_i, dtype=float)
    t_a = np.asarray(t_a, dtype=float)
    return FeatureStats(
        temp_center=float(t_i.mean()),
        temp_scale=max(float(t_i.std()), MIN_FEATURE_SCALE),
        ambient_center=float(t_a.mean()),
        ambient_scale=max(float(t_a.std()), MIN_FEATURE_SCALE),
    )


def feature_stats_to_dict(stats: FeatureStats) -> dict:
    return {"tempCenter": stats.temp_center, "tempScale": stats.temp_scale,
            "ambientCenter": stats.ambient_center, "ambientScale": stats.ambient_scale}


def feature_stats_from_dict(data: dict) -> FeatureStats:
    return FeatureStats(temp_center=float(data["tempCenter"]),
                        temp_scale=float(data["tempScale"]),
                        ambient_center=float(data["ambientCenter"]),
                        ambient_scale=float(data["ambientScale"]))


class FeatureBuilder:
    """Assembles the agent's input vector by twinning a thermal model to the
    observed room temperature.

    Hidden nodes are not measurable, so they are reconstructed by propagating
    the model one step per sample and re-injecting each new observation. The
    same builder runs during virtual training and plant evaluation, so the
    agent sees identical feature semantics in both.
    """

    def __init__(self, kind: ModelKind, params: ThermalParams, dt_minutes: float,
                 n_max: int, stats: Optional[FeatureStats] = None):
        self.kind = kind
        self.n_max = n_max
        self.stats = stats or FeatureStats()
        self._matrices = transition_matrices(kind, params, dt_minutes)
        self._state: Optional[np.ndarray] = None
        self.n_features = thermal_feature_count(kind) + 4

    def reset(self, t_i_observed: float) -> None:
        self._state = initial_state(self.kind, t_i_observed)

    def update(self, t_i_observed: float, t_ambient: float, power: float) -> None:
        a_mat, b_mat = self._matrices
        predicted = a_mat @ self._state + b_mat @ np.array([t_ambient, power])
        predicted[0] = t_i_observed
        self._state = predicted

    def features(self, state: EnvState) -> np.ndarray:
        out = np.empty(self.n_features)
        n_thermal = len(self._state)
        out[:n_thermal] = (self._state - self.stats.temp_center) / self.stats.temp_scale
        pos = n_thermal
        if self.kind == ModelKind.TITETHRIA:
            out[pos] = (state.t_ambient - self._state[0]) / LEAK_DELTA_SCALE_C
            pos += 1
        out[pos] = state.day / 7.0
        out[pos + 1] = state.slot / SLOTS_PER_DAY
        out[pos + 2] = state.occupant_count / self.n_max
        out[pos + 3] = (state.t_ambient - self.stats.ambient_center) / self.stats.ambient_scale
        return out


OCCUPANCY_BURN_IN_STEPS = SLOTS_PER_DAY  # one day settles the chains from all-out
DEFAULT_INITIAL_T_I = 17.0


class HeatingEnv:
    """One room: thermal model + occupancy chains + weather + reward.

    Noise uses three independent seeded streams with a fixed number of draws
    per step (one process draw, one sensor draw, n_max occupancy draws), so
    turning a noise source off never shifts the others.
    """

    def __init__(self, kind: ModelKind, params: ThermalParams,
                 occupancy: OccupancyModel, ambient: np.ndarray, cfg: MdpConfig,
                 *, seed: int, sensor_sigma: float = 0.0,
                 feature_builder: Optional[FeatureBuilder] = None,
                 random_start: bool = True, start_position: int = 0,
                 initial_t_i: float = DEFAULT_INITIAL_T_I):
        ambient = np.asarray(ambient, dtype=float)
        if len(ambient) < cfg.episode_steps:
            raise ValueError("ambient trace shorter than one episode")
        if not np.all(np.isfinite(ambient)):
            raise ValueError("ambient trace must be finite")
        self.kind = kind
        self.params = params
        self.occupancy = occupancy
        self.ambient = ambient
        self.cfg = cfg
        self.sensor_sigma = float(sensor_sigma)
        self.feature_builder = feature_builder
        self._random_start = random_start
        self._start_position = int(start_position)
        self._initial_t_i = float(initial_t_i)
        self._matrices = transition_matrices(kind, params, cfg.step_minutes)
        streams = np.random.default_rng(seed).spawn(4)
        self._rng_start, self._rng_process, self._rng_sensor, self._rng_occ = streams
        self._state: Optional[EnvState] = None
        self._position = 0
        self._steps_taken = 0

    @property
    def n_actions(self) -> int:
        return self.cfg.n_heat_levels

    @property
    def n_features(self) -> Optional[int]:
        return self.feature_builder.n_features if self.feature_builder else None

    @property
    def state(self) -> EnvState:
        if self._state is None:
            raise RuntimeError("reset() the environment first")
        return self._state

    @property
    def steps_taken(self) -> int:
        return self._steps_taken

    @property
    def done(self) -> bool:
        return self._steps_taken >= self.cfg.episode_steps

    def _calendar(self, position: int) -> tuple[int, int]:
        day = (position // SLOTS_PER_DAY) % 7
        slot = position % SLOTS_PER_DAY
        return day, slot

    def _ambient_at(self, position: int) -> float:
        return float(self.ambient[position % len(self.ambient)])

    def reset(self) -> EnvState:
        if self._random_start:
            self._position = int(self._rng_start.integers(0, len(self.ambient)))
        else:
            self._position = self._start_position
        # settle the occupancy chains from the all-out state before the episode
        occupants = np.zeros(self.occupancy.n_max, dtype=np.int8)
        for back in range(OCCUPANCY_BURN_IN_STEPS, 0, -1):
            day, slot = self._calendar(self._position - back + SLOTS_PER_WEEK * 4)
            occupants = sample_step(self.occupancy, day, slot, occupants, self._rng_occ)
        thermal = initial_state(self.kind, self._initial_t_i)
        observed = float(thermal[0] + self.sensor_sigma * self._rng_sensor.standard_normal())
        day, slot = self._calendar(self._position)
        self._state = EnvState(thermal=thermal, t_i_observed=observed,
                               occupants=occupants, day=day, slot=slot,
                               t_ambient=self._ambient_at(self._position))
        self._steps_taken = 0
        if self.feature_builder is not None:
            self.feature_builder.reset(observed)
        return self._state

    def features(self) -> Optional[np.ndarray]:
        if self.feature_builder is None:
            return None
        return self.feature_builder.features(self.state)

    def step(self, action_index: int) -> Transition:
        if self._state is None:
            raise RuntimeError("reset() the environment first")
        if self.done:
            raise EpisodeFinished(f"episode is over after {self._steps_taken} steps")
        power = action_power(self.cfg, action_index)
        current = self._state
        drive_t_a = current.t_ambient

        thermal = thermal_step(self.kind, replace(self.params, sigma=0.0),
                               current.thermal, drive_t_a, power,
                               self.cfg.step_minutes, matrices=self._matrices)
        process_draw = self._rng_process.standard_normal()
        if self.params.sigma > 0:
            thermal = thermal.copy()
            thermal[0] += self.params.sigma * process_draw

        occupants = sample_step(self.occupancy, current.day, current.slot,
                                current.occupants, self._rng_occ)
        sensor_draw = self._rng_sensor.standard_normal()
        observed = float(thermal[0] + self.sensor_sigma * sensor_draw)

        self._position += 1
        self._steps_taken += 1
        day, slot = self._calendar(self._position)
        next_state = EnvState(thermal=thermal, t_i_observed=observed,
                              occupants=occupants, day=day, slot=slot,
                              t_ambient=self._ambient_at(self._position))
        self._state = next_state
        if self.feature_builder is not None:
            self.feature_builder.update(observed, drive_t_a, power)
        # reward looks at the temperature and occupancy the action produced
        step_reward = reward(float(thermal[0]), next_state.occupant_count, power,
                             self.cfg)
        return Transition(state=current, action_index=action_index,
                          reward=step_reward, next_state=next_state,
                          done=self.done)


# -- ground-truth plant ----------------------------------------------------------

PLANT_PROCESS_SIGMA = 0.05  # degC per 15-min step on the true room node


@dataclass(frozen=True)
class RoomPlantSpec:
    room: str
    thermal: ThermalParams     # sigma field = process noise
    sensor_sigma: float        # degC on the emitted temperature readings
    heater_domain: str = "heater"


PLANT_SPECS: dict[str, RoomPlantSpec] = {
    "bathroom": RoomPlantSpec(
        room="bathroom",
        thermal=ThermalParams(c_i=1.0, c_e=2.8, c_h=0.8, r_ie=7.0, r_ea=10.0,
                              r_ia=35.0, r_ih=0.4, phi_h=5.0,
                              sigma=PLANT_PROCESS_SIGMA),
        sensor_sigma=0.60,
    ),
    "living_room": RoomPlantSpec(
        room="living_room",
        thermal=ThermalParams(c_i=2.2, c_e=7.0, c_h=0.5, r_ie=3.0, r_ea=3.5,
                              r_ia=20.0, r_ih=0.6, phi_h=9.0,
                              sigma=PLANT_PROCESS_SIGMA),
        sensor_sigma=0.58,
    ),
    "bedroom": RoomPlantSpec(
        room="bedroom",
        thermal=ThermalParams(c_i=1.9, c_e=6.0, c_h=0.4, r_ie=3.2, r_ea=4.5,
                              r_ia=24.0, r_ih=1.0, phi_h=7.0,
                              sigma=PLANT_PROCESS_SIGMA),
        sensor_sigma=0.85,
    ),
}

PLANT_KIND = ModelKind.TITETHRIA


def get_plant_spec(room: str) -> RoomPlantSpec:
    try:
        return PLANT_SPECS[room]
    except KeyError:
        raise KeyError(f"unknown room profile {room!r}; "
                       f"choose one of {sorted(PLANT_SPECS)}") from None


def make_plant_env(room: str, cfg: MdpConfig, seed: int, *,
                   occupancy: Optional[OccupancyModel] = None,
                   ambient: Optional[np.ndarray] = None, ambient_days: int = 14,
                   process_noise: bool = True, sensor_noise: bool = True,
                   feature_builder: Optional[FeatureBuilder] = None,
                   random_start: bool = True, start_position: int = 0) -> HeatingEnv:
    """Ground-truth simulator for one room with committed hidden parameters."""
    from .occupancy import builtin_synthetic_profiles

    spec = get_plant_spec(room)
    if occupancy is None:
        occupancy = builtin_synthetic_profiles()[room]
    if ambient is None:
        ambient = generate_ambient(ambient_days, seed)
    params = spec.thermal if process_noise else replace(spec.thermal, sigma=0.0)
    return HeatingEnv(PLANT_KIND, params, occupancy, ambient, cfg, seed=seed,
                      sensor_sigma=spec.sensor_sigma if sensor_noise else 0.0,
                      feature_builder=feature_builder, random_start=random_start,
                      start_position=start_position)


def make_virtual_env(kind: ModelKind, params: ThermalParams,
                     occupancy: OccupancyModel, ambient: np.ndarray,
                     cfg: MdpConfig, seed: int, *, random_start: bool = True,
                     start_position: int = 0,
                     stats: Optional[FeatureStats] = None) -> HeatingEnv:
    """Training environment whose dynamics come from the fitted twins.

    The twin propagates deterministically; its fitted residual scale plays as
    observation noise, which is where it came from. Features are built by the
    same twin tracking its own output.
    """
    builder = FeatureBuilder(kind, params, cfg.step_minutes, occupancy.n_max, stats)
    return HeatingEnv(kind, replace(params, sigma=0.0), occupancy, ambient, cfg,
                      seed=seed, sensor_sigma=params.sigma,
                      feature_builder=builder, random_start=random_start,
                      start_position=start_position)


# -- baseline policies -----------------------------------------------------------


@dataclass(frozen=True)
class SetpointWindow:
    start_hour: float
    end_hour: float          # exclusive; wraps past midnight when end < start
    setpoint: float

    def active(self, slot: int) -> bool:
        hour = slot * 24.0 / SLOTS_PER_DAY
        if self.start_hour <= self.end_hour:
            return self.start_hour <= hour < self.end_hour
        return hour >= self.start_hour or hour < self.end_hour


Schedule = tuple[SetpointWindow, ...]

ROOM_SCHEDULES: dict[str, Schedule] = {
    # heated only at night, at a low setpoint
    "bedroom": (SetpointWindow(22.0, 7.0, 16.0),),
    # heated during the day
    "living_room": (SetpointWindow(7.0, 22.0, 18.0),),
    # heated morning and evening
    "bathroom": (SetpointWindow(6.0, 9.0, 18.0), SetpointWindow(18.0, 22.0, 18.0)),
}


def constant_schedule(setpoint: float) -> Schedule:
    return (SetpointWindow(0.0, 24.0, setpoint),)


def schedule_setpoint(schedule: Schedule, slot: int) -> Optional[float]:
    for window in schedule:
        if window.active(slot):
            return window.setpoint
    return None


class ThermostatPolicy:
    """Bang-bang control with hysteresis on the observed temperature."""

    def __init__(self, schedule: Schedule, n_actions: int, deadband: float = 0.5):
        self.schedule = schedule
        self.n_actions = n_actions
        self.deadband = deadband
        self._heating = False

    def reset(self) -> None:
        self._heating = False

    def act(self, state: EnvState) -> int:
        setpoint = schedule_setpoint(self.schedule, state.slot)
        if setpoint is None:
            self._heating = False
        elif state.t_i_observed < setpoint - self.deadband:
            self._heating = True
        elif state.t_i_observed > setpoint + self.deadband:
            self._heating = False
        return self.n_actions - 1 if self._heating else 0


class ConstantPolicy:
    def __init__(self, action_index: int):
        self.action_index = action_index

    def reset(self) -> None:
        pass

    def act(self, state: EnvState) -> int:
        return self.action_index


# -- rollouts and metrics ----------------------------------------------------------


@dataclass
class RolloutMetrics:
    mean_reward: float
    energy_used: float            # full-power-equivalent hours
    comfort_violation_steps: int  # someone present while at or below comfort temp
    ideal_reward: float           # occupied fraction: perfect foresight, free energy
    steps: int


@dataclass
class RolloutRecord:
    t_i_true: list[float] = field(default_factory=list)
    t_i_observed: list[float] = field(default_factory=list)
    t_ambient: list[float] = field(default_factory=list)
    power: list[float] = field(default_factory=list)
    occupants: list[int] = field(default_factory=list)
    reward: list[float] = field(default_factory=list)
    day: list[int] = field(default_factory=list)
    slot: list[int] = field(default_factory=list)


def run_policy(env: HeatingEnv, policy, episodes: int = 1,
               record: Optional[RolloutRecord] = None) -> RolloutMetrics:
    """Roll full episodes; per-step mean reward plus energy and comfort tallies."""
    total_reward = 0.0
    energy = 0.0
    violations = 0
    occupied = 0
    steps = 0
    dt_hours = env.cfg.step_minutes / 60.0
    for _ in range(episodes):
        env.reset()
        policy.reset()
        while not env.done:
            action = policy.act(env.state)
            transition = env.step(action)
            power = action_power(env.cfg, action)
            nxt = transition.next_state
            total_reward += transition.reward
            energy += power * dt_hours
            present = nxt.occupant_count > 0
            occupied += present
            if present and nxt.t_i_true <= env.cfg.comfort_temp:
                violations += 1
            if record is not None:
                record.t_i_true.append(nxt.t_i_true)
                record.t_i_observed.append(nxt.t_i_observed)
                record.t_ambient.append(nxt.t_ambient)
                record.power.append(power)
                record.occupants.append(nxt.occupant_count)
                record.reward.append(transition.reward)
                record.day.append(nxt.day)
                record.slot.append(nxt.slot)
            steps += 1
    return RolloutMetrics(mean_reward=total_reward / steps,
                          energy_used=energy,
                          comfort_violation_steps=violations,
                          ideal_reward=occupied / steps,
                          steps=steps)
