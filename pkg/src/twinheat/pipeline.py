"""Pipeline stages: generate data, fit twins, train the agent, evaluate it.

Each stage reads only files earlier stages produced and overwrites its own
outputs, so deleting any suffix of the artifact chain and rerunning with the
same config reproduces it bit for bit. `run_pipeline` chains all four stages
and writes a manifest with a content digest for every artifact.
"""

from __future__ import annotations

import hashlib
import json
import signal
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .bridge import LegacyBridge, format_ts, parse_ts
from .clock import SimulatedClock
from .dqn import (
    DqnConfig,
    GreedyPolicy,
    TrainResult,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .env import (
    ROOM_SCHEDULES,
    FeatureBuilder,
    FeatureStats,
    MdpConfig,
    RolloutMetrics,
    RolloutRecord,
    ThermostatPolicy,
    action_power,
    compute_feature_stats,
    feature_stats_from_dict,
    feature_stats_to_dict,
    get_plant_spec,
    make_plant_env,
    make_virtual_env,
    run_policy,
)
from .httpd import TwinService
from .occupancy import fit_occupancy, load_occupancy, save_occupancy
from .registry import Registry
from .report import (
    plot_day_trace,
    plot_eval_bars,
    plot_mse_table,
    plot_occupancy_profile,
    plot_training_curve,
    write_epoch_rewards,
    write_eval_metrics,
    write_eval_report,
    write_mse_table,
)
from .thermal import load_twin, select_model, save_twin

# Data generation is anchored to a fixed Monday so weekly occupancy slots
# line up with the calendar implied by the timestamps.
DATA_EPOCH = parse_ts("2026-03-02T00:00:00Z")

HELDOUT_DAYS = 7
SLOTS_PER_DAY = 96
EVAL_AMBIENT_DAYS = 14

SENSORS_CSV = "sensors.csv"
PRESENCE_CSV = "presence.csv"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class DqnSettings:
    """DqnConfig hyperparameters minus the layer dims.

    The input and output widths are fixed by the selected twin kind, so they
    are derived at train time instead of being persisted in the config.
    """

    learning_rate: float = 1e-5
    dropout: float = 0.1
    epochs: int = 25
    episodes_per_epoch: int = 20
    discount: float = 0.95
    tau_start: float = 1.0
    tau_end: float = 1e-6
    replay_capacity: int = 50_000
    batch_size: int = 64
    target_sync_steps: int = 500


@dataclass(frozen=True)
class SeedBundle:
    data: int
    fit: int
    train: int
    eval: int


@dataclass(frozen=True)
class StagePaths:
    data_dir: Path
    twin_dir: Path
    checkpoint_dir: Path
    metrics_dir: Path


@dataclass(frozen=True)
class ServeSettings:
    host: str = "127.0.0.1"
    port: int = 8720
    sweep_interval_seconds: float = 1.0


@dataclass(frozen=True)
class PipelineConfig:
    room: str = "bathroom"
    train_days: int = 7
    dt_minutes: float = 15.0
    eval_episodes: int = 30
    mdp: MdpConfig = field(default_factory=MdpConfig)
    dqn: DqnSettings = field(default_factory=DqnSettings)
    seeds: SeedBundle = field(default_factory=lambda: SeedBundle(101, 5, 7, 13))
    paths: StagePaths = field(default_factory=lambda: StagePaths(
        Path("runs/data"), Path("runs/twin"),
        Path("runs/checkpoint"), Path("runs/metrics")))
    serve: ServeSettings = field(default_factory=ServeSettings)

    def __post_init__(self):
        if self.train_days < 1:
            raise ConfigError("trainDays must be >= 1")
        if self.eval_episodes < 1:
            raise ConfigError("evalEpisodes must be >= 1")
        if self.dt_minutes != self.mdp.step_minutes:
            raise ConfigError("dtMinutes must equal mdp.stepMinutes")
        try:
            get_plant_spec(self.room)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None


# JSON key -> dataclass field, one table per config section.
_MDP_KEYS = {
    "episodeSteps": "episode_steps", "stepMinutes": "step_minutes",
    "comfortTemp": "comfort_temp", "swingBand": "swing_band",
    "energyWeight": "energy_weight", "swingWeight": "swing_weight",
    "discount": "discount", "nHeatLevels": "n_heat_levels",
    "literalSwingFormula": "literal_swing_formula",
}
_DQN_KEYS = {
    "learningRate": "learning_rate", "dropout": "dropout", "epochs": "epochs",
    "episodesPerEpoch": "episodes_per_epoch", "discount": "discount",
    "tauStart": "tau_start", "tauEnd": "tau_end",
    "replayCapacity": "replay_capacity", "batchSize": "batch_size",
    "targetSyncSteps": "target_sync_steps",
}
_SEED_KEYS = {"data": "data", "fit": "fit", "train": "train", "eval": "eval"}
_PATH_KEYS = {
    "dataDir": "data_dir", "twinDir": "twin_dir",
    "checkpointDir": "checkpoint_dir", "metricsDir": "metrics_dir",
}
_SERVE_KEYS = {
    "host": "host", "port": "port",
    "sweepIntervalSeconds": "sweep_interval_seconds",
}
_TOP_KEYS = {"room", "trainDays", "dtMinutes", "evalEpisodes", "mdp", "dqn",
             "seeds", "paths", "serve"}


def _section(doc: dict, name: str, keys: dict[str, str], build: Callable,
             cast: Optional[Callable] = None):
    sub = doc.get(name, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"{name} must be an object")
    unknown = set(sub) - set(keys)
    if unknown:
        raise ConfigError(f"unknown {name} key(s): {', '.join(sorted(unknown))}")
    fields = {keys[k]: (cast(v) if cast else v) for k, v in sub.items()}
    try:
        return build(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def config_from_dict(doc: dict) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    if "seeds" not in doc:
        raise ConfigError("seeds section is required (data, fit, train, eval)")
    seeds_doc = doc["seeds"]
    if not isinstance(seeds_doc, dict) or set(seeds_doc) != set(_SEED_KEYS):
        raise ConfigError("seeds must set exactly data, fit, train, eval")
    top = {}
    for key, attr in (("room", "room"), ("trainDays", "train_days"),
                      ("dtMinutes", "dt_minutes"),
                      ("evalEpisodes", "eval_episodes")):
        if key in doc:
            top[attr] = doc[key]
    try:
        return PipelineConfig(
            mdp=_section(doc, "mdp", _MDP_KEYS, MdpConfig),
            dqn=_section(doc, "dqn", _DQN_KEYS, DqnSettings),
            seeds=_section(doc, "seeds", _SEED_KEYS, SeedBundle, cast=int),
            paths=_section(doc, "paths", _PATH_KEYS, StagePaths, cast=Path),
            serve=_section(doc, "serve", _SERVE_KEYS, ServeSettings),
            **top,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def config_to_dict(config: PipelineConfig) -> dict:
    def pack(obj, keys: dict[str, str]) -> dict:
        values = asdict(obj)
        return {k: (str(values[a]) if isinstance(values[a], Path) else values[a])
                for k, a in keys.items()}

    return {
        "room": config.room,
        "trainDays": config.train_days,
        "dtMinutes": config.dt_minutes,
        "evalEpisodes": config.eval_episodes,
        "mdp": pack(config.mdp, _MDP_KEYS),
        "dqn": pack(config.dqn, _DQN_KEYS),
        "seeds": pack(config.seeds, _SEED_KEYS),
        "paths": pack(config.paths, _PATH_KEYS),
        "serve": pack(config.serve, _SERVE_KEYS),
    }


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply `--set dotted.key=value` pairs onto the raw config document."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        dotted, raw = item.split("=", 1)
        keys = [k for k in dotted.split(".") if k]
        if not keys:
            raise ConfigError(f"override {item!r} has an empty key")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} descends into a scalar")
        node[keys[-1]] = value
    return doc


def load_config(path: str | Path, overrides: Optional[list[str]] = None) -> PipelineConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(apply_overrides(doc, overrides or []))


# -- generate ---------------------------------------------------------------------


def _total_days(config: PipelineConfig) -> int:
    return config.train_days + HELDOUT_DAYS


def _step_seconds(config: PipelineConfig) -> float:
    return config.dt_minutes * 60.0


def _row_ts(config: PipelineConfig, step: int) -> str:
    # Row k carries the state observed after step k, i.e. slot k+1.
    return format_ts(DATA_EPOCH + (step + 1) * _step_seconds(config))


def cmd_generate(config: PipelineConfig) -> dict[str, Path]:
    """Roll the plant under its manual thermostat and export bridge CSVs."""
    total_steps = _total_days(config) * SLOTS_PER_DAY
    cfg = replace(config.mdp, episode_steps=total_steps)
    env = make_plant_env(config.room, cfg, seed=config.seeds.data,
                         ambient_days=_total_days(config), random_start=False)
    record = RolloutRecord()
    run_policy(env, ThermostatPolicy(ROOM_SCHEDULES[config.room], env.n_actions),
               record=record)

    data_dir = config.paths.data_dir
    data_dir.mkdir(parents=True, exist_ok=True)
    sensors = data_dir / SENSORS_CSV
    presence = data_dir / PRESENCE_CSV
    climate = f"climate.{config.room}"
    heater = f"heater.{config.room}"
    with sensors.open("w") as fh:
        fh.write("ts,entity_id,domain,value\n")
        for k in range(total_steps):
            ts = _row_ts(config, k)
            fh.write(f"{ts},{climate},climate,{record.t_i_observed[k]:.6f}\n")
            fh.write(f"{ts},weather.outdoor,weather,{record.t_ambient[k]:.6f}\n")
            fh.write(f"{ts},{heater},heater,{record.power[k]:.6f}\n")
    with presence.open("w") as fh:
        fh.write("ts,entity_id,domain,value\n")
        for k in range(total_steps):
            fh.write(f"{_row_ts(config, k)},occupancy.{config.room},occupancy,"
                     f"{record.occupants[k]}\n")
    return {"sensors": sensors, "presence": presence}


# -- fit --------------------------------------------------------------------------


def _ingest(config: PipelineConfig, stage: str,
            registry: Optional[Registry] = None,
            command_log: Optional[Path] = None) -> LegacyBridge:
    bridge = LegacyBridge(registry=registry, command_log_path=command_log)
    for name in (SENSORS_CSV, PRESENCE_CSV):
        path = config.paths.data_dir / name
        if not path.exists():
            raise StageError(stage, f"missing data file {path}; run generate first")
        bridge.ingest_csv(path)
    return bridge


def _load_series(bridge: LegacyBridge, config: PipelineConfig, stage: str,
                 entity: str) -> np.ndarray:
    total_steps = _total_days(config) * SLOTS_PER_DAY
    step = _step_seconds(config)
    points = bridge.read_series(entity, DATA_EPOCH + step,
                                DATA_EPOCH + total_steps * step,
                                resample_minutes=int(config.dt_minutes))
    if len(points) != total_steps:
        raise StageError(stage, f"{entity}: expected {total_steps} resampled "
                                f"points, got {len(points)}")
    return np.array([p.value for p in points])


def cmd_fit(config: PipelineConfig) -> dict[str, Path]:
    """Select the best thermal twin and fit the occupancy twin from the CSVs."""
    bridge = _ingest(config, "fit")
    room = config.room
    t_i = _load_series(bridge, config, "fit", f"climate.{room}")
    t_a = _load_series(bridge, config, "fit", "weather.outdoor")
    power = _load_series(bridge, config, "fit", f"heater.{room}")
    counts = _load_series(bridge, config, "fit", f"occupancy.{room}")
    counts = np.rint(counts).astype(int)

    n_train = config.train_days * SLOTS_PER_DAY
    heldout = HELDOUT_DAYS * SLOTS_PER_DAY
    selection = select_model(
        t_i, t_a, power, dt_minutes=config.dt_minutes, train_samples=n_train,
        seed=config.seeds.fit,
        heldout=(t_i[-heldout:], t_a[-heldout:], power[-heldout:]))
    stats = compute_feature_stats(t_i[:n_train], t_a[:n_train])
    occupancy = fit_occupancy(counts, n_max=max(1, int(counts.max())),
                              start_day=0, start_slot=1)

    twin_dir = config.paths.twin_dir
    twin_dir.mkdir(parents=True, exist_ok=True)
    step = _step_seconds(config)
    window = {
        "start": format_ts(DATA_EPOCH + step),
        "end": format_ts(DATA_EPOCH + n_train * step),
        "trainSamples": n_train,
        "heldoutSamples": heldout,
    }
    twin_path = twin_dir / "twin.json"
    save_twin(selection.best, config.dt_minutes, window, twin_path)
    occ_path = twin_dir / "occupancy.json"
    save_occupancy(occupancy, occ_path)
    stats_path = twin_dir / "feature_stats.json"
    stats_path.write_text(json.dumps(feature_stats_to_dict(stats), indent=2,
                                     sort_keys=True) + "\n")
    return {
        "twin": twin_path,
        "occupancy": occ_path,
        "feature_stats": stats_path,
        "mse_table": write_mse_table(selection, twin_dir / "mse_table.csv"),
        "mse_figure": plot_mse_table(
            selection, twin_dir / "mse_by_kind.png",
            title=f"{room}, {config.train_days} train days"),
        "occupancy_figure": plot_occupancy_profile(
            occupancy, twin_dir / "occupancy_profile.png",
            title=f"{room} occupied probability"),
    }


# -- train ------------------------------------------------------------------------


def _load_stats(config: PipelineConfig, stage: str) -> FeatureStats:
    path = config.paths.twin_dir / "feature_stats.json"
    if not path.exists():
        raise StageError(stage, f"missing {path}; run fit first")
    return feature_stats_from_dict(json.loads(path.read_text()))


def cmd_train(config: PipelineConfig) -> dict[str, Path]:
    """Train the agent inside the virtual env built from the persisted twins."""
    twin_path = config.paths.twin_dir / "twin.json"
    if not twin_path.exists():
        raise StageError("train", f"missing {twin_path}; run fit first")
    kind, params, dt = load_twin(twin_path)
    if dt != config.dt_minutes:
        raise StageError("train", f"twin was fitted at {dt} min, config says "
                                  f"{config.dt_minutes}")
    occupancy = load_occupancy(config.paths.twin_dir / "occupancy.json")
    stats = _load_stats(config, "train")
    bridge = _ingest(config, "train")
    ambient = _load_series(bridge, config, "train", "weather.outdoor")

    venv = make_virtual_env(kind, params, occupancy, ambient, config.mdp,
                            seed=config.seeds.train, stats=stats)
    dqn_cfg = DqnConfig(n_features=venv.n_features, n_actions=venv.n_actions,
                        **asdict(config.dqn))
    result = train(venv, dqn_cfg, seed=config.seeds.train)

    ckpt_dir = config.paths.checkpoint_dir
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = ckpt_dir / "checkpoint.json"
    save_checkpoint(ckpt_path, result)
    return {
        "checkpoint": ckpt_path,
        "epochs": write_epoch_rewards(result.per_epoch_rewards,
                                      ckpt_dir / "epochs.jsonl"),
        "curve_figure": plot_training_curve(
            result.per_epoch_rewards, ckpt_dir / "training_curve.png",
            title=f"{config.room}, {config.train_days}-day twin"),
    }


# -- eval -------------------------------------------------------------------------


class PublishingPolicy:
    """Wraps a policy so every chosen action goes out as a bridge command."""

    def __init__(self, inner, bridge: LegacyBridge, entity_id: str,
                 cfg: MdpConfig, clock: SimulatedClock):
        self.inner = inner
        self.bridge = bridge
        self.entity_id = entity_id
        self.cfg = cfg
        self.clock = clock

    def reset(self) -> None:
        self.inner.reset()

    def act(self, state) -> int:
        action = self.inner.act(state)
        self.clock.advance(self.cfg.step_minutes * 60.0)
        self.bridge.publish_command(self.entity_id,
                                    {"power_fraction": action_power(self.cfg, action)})
        return action


def _aggregate(rows: list[RolloutMetrics]) -> RolloutMetrics:
    return RolloutMetrics(
        mean_reward=float(np.mean([r.mean_reward for r in rows])),
        energy_used=float(np.sum([r.energy_used for r in rows])),
        comfort_violation_steps=int(np.sum([r.comfort_violation_steps for r in rows])),
        ideal_reward=float(np.mean([r.ideal_reward for r in rows])),
        steps=int(np.sum([r.steps for r in rows])),
    )


def _episode_rows(env, policy, episodes: int,
                  record: Optional[RolloutRecord] = None) -> list[RolloutMetrics]:
    rows = []
    for episode in range(episodes):
        rows.append(run_policy(env, policy, episodes=1,
                               record=record if episode == 0 else None))
    return rows


def cmd_eval(config: PipelineConfig) -> dict[str, Path]:
    """Close the loop on the plant: greedy agent vs thermostat vs ideal."""
    ckpt_path = config.paths.checkpoint_dir / "checkpoint.json"
    if not ckpt_path.exists():
        raise StageError("eval", f"missing {ckpt_path}; run train first")
    result = load_checkpoint(ckpt_path)
    kind, params, _ = load_twin(config.paths.twin_dir / "twin.json")
    occupancy = load_occupancy(config.paths.twin_dir / "occupancy.json")
    stats = result.feature_stats or FeatureStats()

    metrics_dir = config.paths.metrics_dir
    metrics_dir.mkdir(parents=True, exist_ok=True)
    commands_path = metrics_dir / "commands.jsonl"
    commands_path.unlink(missing_ok=True)  # the bridge log appends
    clock = SimulatedClock(start=DATA_EPOCH)
    bridge = LegacyBridge(clock=clock, command_log_path=commands_path)

    builder = FeatureBuilder(kind, params, config.mdp.step_minutes,
                             occupancy.n_max, stats)
    agent_env = make_plant_env(config.room, config.mdp, seed=config.seeds.eval,
                               ambient_days=EVAL_AMBIENT_DAYS,
                               feature_builder=builder)
    policy = PublishingPolicy(GreedyPolicy(result.net, agent_env), bridge,
                              f"heater.{config.room}", config.mdp, clock)
    first_episode = RolloutRecord()
    agent_rows = _episode_rows(agent_env, policy, config.eval_episodes,
                               record=first_episode)

    base_env = make_plant_env(config.room, config.mdp, seed=config.seeds.eval,
                              ambient_days=EVAL_AMBIENT_DAYS)
    base_rows = _episode_rows(
        base_env, ThermostatPolicy(ROOM_SCHEDULES[config.room], base_env.n_actions),
        config.eval_episodes)

    agent = _aggregate(agent_rows)
    baseline = _aggregate(base_rows)
    artifacts = {
        "report": write_eval_report(agent, baseline, metrics_dir / "report.json"),
        "metrics": write_eval_metrics(agent_rows, metrics_dir / "metrics.jsonl"),
        "commands": commands_path,
        "bars_figure": plot_eval_bars(
            agent, baseline, metrics_dir / "eval_bars.png",
            title=f"{config.room}, {config.train_days}-day twin"),
    }
    if len(first_episode.t_i_true) >= SLOTS_PER_DAY:
        artifacts["trace_figure"] = plot_day_trace(
            first_episode, metrics_dir / "day_trace.png",
            comfort_temp=config.mdp.comfort_temp,
            swing_band=config.mdp.swing_band,
            title=f"{config.room} agent, first evaluation day")
    return artifacts


# -- serve ------------------------------------------------------------------------


def cmd_serve(config: PipelineConfig,
              stop_event: Optional[threading.Event] = None,
              ready: Optional[Callable[[TwinService], None]] = None) -> dict[str, Path]:
    """Run the registry + bridge HTTP service until stopped.

    Re-ingests any existing CSV exports so a restarted service rebuilds its
    ephemeral registry state from the bridge store. Installs SIGINT/SIGTERM
    handlers when running on the main thread; otherwise rely on stop_event.
    """
    registry = Registry()
    bridge = LegacyBridge(registry=registry)
    ingested = []
    for name in (SENSORS_CSV, PRESENCE_CSV):
        path = config.paths.data_dir / name
        if path.exists():
            bridge.ingest_csv(path)
            ingested.append(path)
    try:
        service = TwinService(registry, bridge, host=config.serve.host,
                              port=config.serve.port,
                              sweep_interval=config.serve.sweep_interval_seconds)
    except OSError as exc:
        raise StageError("serve", f"cannot bind {config.serve.host}:"
                                  f"{config.serve.port}: {exc}") from None
    stop = stop_event or threading.Event()
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: stop.set())
    service.start()
    try:
        if ready is not None:
            ready(service)
        stop.wait()
    finally:
        service.stop()
    return {path.name: path for path in ingested}


# -- pipeline ---------------------------------------------------------------------


def file_digest(path: Path) -> str:
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


STAGES: tuple[tuple[str, Callable[[PipelineConfig], dict[str, Path]]], ...] = (
    ("generate", cmd_generate),
    ("fit", cmd_fit),
    ("train", cmd_train),
    ("eval", cmd_eval),
)


def run_pipeline(config: PipelineConfig) -> dict:
    """generate -> fit -> train -> eval, manifest written last.

    A stage failure still writes the manifest (with the failed stage marked)
    before the error propagates.
    """
    manifest: dict = {"config": config_to_dict(config), "stages": {}}
    manifest_path = config.paths.metrics_dir / "manifest.json"
    failure: Optional[StageError] = None
    for name, stage in STAGES:
        started = time.monotonic()
        try:
            artifacts = stage(config)
        except StageError as exc:
            failure = exc
        except Exception as exc:  # noqa: BLE001 - stage-labeled for the CLI
            failure = StageError(name, str(exc))
        if failure is not None:
            manifest["stages"][name] = {
                "status": "failed",
                "error": str(failure),
                "seconds": round(time.monotonic() - started, 3),
            }
            break
        manifest["stages"][name] = {
            "status": "ok",
            "seconds": round(time.monotonic() - started, 3),
            "artifacts": {str(path): file_digest(path)
                          for path in artifacts.values()},
        }
    config.paths.metrics_dir.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if failure is not None:
        raise failure
    return manifest
