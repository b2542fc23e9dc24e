"""From-scratch deep Q-learning on numpy.

An MLP with two hidden layers scaled off the input width, ReLU, inverted
dropout, Adam, Boltzmann exploration with a log-decaying temperature, a FIFO
replay ring and a periodically synced target network. Everything is seeded
and single-threaded so a training run is bit-identical given its seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .env import FeatureStats, HeatingEnv, feature_stats_from_dict, feature_stats_to_dict


@dataclass(frozen=True)
class DqnConfig:
    n_features: int                  # input width, from FeatureBuilder.n_features
    n_actions: int                   # output width, one Q-value per heat level
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

    def __post_init__(self):
        if self.n_features < 1 or self.n_actions < 2:
            raise ValueError("need at least one feature and two actions")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.tau_end >= self.tau_start:
            raise ValueError("temperature must decay")
        if self.epochs < 1 or self.episodes_per_epoch < 1:
            raise ValueError("epochs and episodes_per_epoch must be >= 1")
        if self.replay_capacity < self.batch_size:
            raise ValueError("replay capacity smaller than one batch")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.target_sync_steps < 1:
            raise ValueError("learning_rate, batch_size, target_sync_steps must be positive")

    @property
    def layer_dims(self) -> tuple[int, int, int, int]:
        # hidden widths scale with the input: 10x, then 5x the first hidden
        return (self.n_features, 10 * self.n_features, 50 * self.n_features,
                self.n_actions)


@dataclass
class Network:
    """Plain MLP parameters; weights[k] maps layer k to k+1, row-major."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def copy(self) -> "Network":
        return Network([w.copy() for w in self.weights],
                       [b.copy() for b in self.biases])


def init_network(layer_dims: tuple[int, ...], rng: np.random.Generator) -> Network:
    """He-scaled normal weights (ReLU hidden layers), zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        scale = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Network(weights, biases)


def forward(net: Network, x: np.ndarray, dropout: float = 0.0,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Q-values for one feature vector or a batch (last axis = features).

    With dropout > 0 an rng must be supplied; hidden activations are masked
    and scaled by 1/(1-p) so inference needs no rescaling.
    """
    if dropout > 0 and rng is None:
        raise ValueError("dropout needs an rng")
    h = np.asarray(x, dtype=float)
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if k < last:
            np.maximum(h, 0.0, out=h)
            if dropout > 0:
                mask = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
                h *= mask
    return h


def loss_and_grads(net: Network, x: np.ndarray, actions: np.ndarray,
                   targets: np.ndarray, dropout: float = 0.0,
                   rng: Optional[np.random.Generator] = None):
    """Half mean squared TD error over the batch, plus its gradients.

    Returns (loss, grad_weights, grad_biases) with gradients shaped like the
    network parameters. Dropout masks are drawn once and shared between the
    forward pass and backprop.
    """
    if dropout > 0 and rng is None:
        raise ValueError("dropout needs an rng")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    actions = np.asarray(actions, dtype=np.int64)
    targets = np.asarray(targets, dtype=float)
    n = len(x)
    last = len(net.weights) - 1

    inputs = []   # what each layer saw
    gates = []    # d(hidden output)/d(pre-activation): ReLU support times mask
    h = x
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w.T + b
        if k < last:
            gate = (z > 0).astype(float)
            if dropout > 0:
                gate *= (rng.random(z.shape) >= dropout) / (1.0 - dropout)
            gates.append(gate)
            h = z * gate
        else:
            h = z
    q = h

    picked = q[np.arange(n), actions]
    err = picked - targets
    loss = 0.5 * float(np.mean(err ** 2))

    dq = np.zeros_like(q)
    dq[np.arange(n), actions] = err / n

    grad_w = [None] * len(net.weights)
    grad_b = [None] * len(net.biases)
    delta = dq
    for k in range(last, -1, -1):
        grad_w[k] = delta.T @ inputs[k]
        grad_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ net.weights[k]) * gates[k - 1]
    return loss, grad_w, grad_b


class AdamOptimizer:
    """Standard Adam with bias correction, one slot pair per parameter array."""

    def __init__(self, net: Network, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p) for p in net.weights + net.biases]
        self._v = [np.zeros_like(p) for p in net.weights + net.biases]

    def step(self, net: Network, grad_w: list, grad_b: list) -> None:
        self.t += 1
        params = net.weights + net.biases
        grads = grad_w + grad_b
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions, uniformly sampled."""

    def __init__(self, capacity: int, n_features: int):
        self.capacity = capacity
        self.x = np.empty((capacity, n_features))
        self.action = np.empty(capacity, dtype=np.int64)
        self.reward = np.empty(capacity)
        self.x_next = np.empty((capacity, n_features))
        self.done = np.empty(capacity, dtype=bool)
        self._next = 0
        self.size = 0

    def push(self, x, action, reward, x_next, done) -> None:
        i = self._next
        self.x[i] = x
        self.action[i] = action
        self.reward[i] = reward
        self.x_next[i] = x_next
        self.done[i] = done
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=batch_size)
        return (self.x[idx], self.action[idx], self.reward[idx],
                self.x_next[idx], self.done[idx])


def softmax_select(q: np.ndarray, tau: float, rng: np.random.Generator) -> int:
    """Boltzmann draw over Q/tau; at tau <= 1e-6 it is a plain argmax."""
    q = np.asarray(q, dtype=float)
    if tau <= 1e-6:
        return int(np.argmax(q))  # ties go to the lowest index
    z = (q - q.max()) / tau
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(q), p=p))


def temperature_schedule(step: int, total_steps: int, tau_start: float = 1.0,
                         tau_end: float = 1e-6) -> float:
    """Log-linear decay from tau_start at step 0 to tau_end at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError("step must lie in [0, total_steps)")
    if total_steps == 1:
        return tau_end
    frac = step / (total_steps - 1)
    return float(tau_start * (tau_end / tau_start) ** frac)


@dataclass
class TrainResult:
    net: Network
    per_epoch_rewards: list[float]
    trained_epochs: int
    seed: int
    feature_stats: Optional[FeatureStats] = None


def train(env: HeatingEnv, cfg: DqnConfig, seed: int) -> TrainResult:
    """Fit a Q-network against the environment.

    Epochs x episodes_per_epoch x episode_steps steps. Each step: Boltzmann
    action from the online net, env step, transition into the replay ring,
    one minibatch Adam update (once the ring holds a batch), target net
    synced every target_sync_steps updates. The per-epoch metric is the mean
    per-step reward over that epoch's episodes. Bit-identical per seed.
    """
    if env.feature_builder is None:
        raise ValueError("training needs an env with a feature builder")
    if env.n_features != cfg.n_features:
        raise ValueError(f"env emits {env.n_features} features, config says {cfg.n_features}")
    if env.n_actions != cfg.n_actions:
        raise ValueError(f"env takes {env.n_actions} actions, config says {cfg.n_actions}")

    rng_init, rng_explore, rng_replay, rng_dropout = np.random.default_rng(seed).spawn(4)
    net = init_network(cfg.layer_dims, rng_init)
    target = net.copy()
    optimizer = AdamOptimizer(net, cfg.learning_rate)
    buffer = ReplayBuffer(cfg.replay_capacity, cfg.n_features)

    steps_per_episode = env.cfg.episode_steps
    total_steps = cfg.epochs * cfg.episodes_per_epoch * steps_per_episode
    global_step = 0
    updates = 0
    per_epoch = []

    for _ in range(cfg.epochs):
        epoch_reward = 0.0
        for _ in range(cfg.episodes_per_epoch):
            env.reset()
            while not env.done:
                x = env.features()
                q = forward(net, x)
                tau = temperature_schedule(global_step, total_steps,
                                           cfg.tau_start, cfg.tau_end)
                action = softmax_select(q, tau, rng_explore)
                transition = env.step(action)
                buffer.push(x, action, transition.reward, env.features(),
                            transition.done)
                epoch_reward += transition.reward
                global_step += 1

                if buffer.size >= cfg.batch_size:
                    bx, ba, br, bxn, bdone = buffer.sample(cfg.batch_size, rng_replay)
                    q_next = forward(target, bxn).max(axis=1)
                    td_target = br + cfg.discount * q_next * ~bdone
                    _, gw, gb = loss_and_grads(net, bx, ba, td_target,
                                               dropout=cfg.dropout, rng=rng_dropout)
                    optimizer.step(net, gw, gb)
                    updates += 1
                    if updates % cfg.target_sync_steps == 0:
                        target = net.copy()

        per_epoch.append(epoch_reward / (cfg.episodes_per_epoch * steps_per_episode))

    stats = env.feature_builder.stats
    return TrainResult(net=net, per_epoch_rewards=per_epoch,
                       trained_epochs=cfg.epochs, seed=seed, feature_stats=stats)


class GreedyPolicy:
    """Argmax over the net's Q-values, dropout inactive; ties to lowest index."""

    def __init__(self, net: Network, env: HeatingEnv):
        if env.feature_builder is None:
            raise ValueError("greedy play needs an env with a feature builder")
        self.net = net
        self.env = env

    def reset(self) -> None:
        pass

    def act(self, state) -> int:
        return int(np.argmax(forward(self.net, self.env.features())))


def evaluate(net: Network, env: HeatingEnv, episodes: int = 1) -> float:
    """Mean per-step reward of the greedy policy; env's own seed drives it."""
    from .env import run_policy

    return run_policy(env, GreedyPolicy(net, env), episodes=episodes).mean_reward


# -- persistence -------------------------------------------------------------------


def checkpoint_to_dict(result: TrainResult) -> dict:
    data = {
        "layerDims": list(result.net.layer_dims),
        "seed": result.seed,
        "trainedEpochs": result.trained_epochs,
        "weights": [w.tolist() for w in result.net.weights],
        "biases": [b.tolist() for b in result.net.biases],
    }
    if result.feature_stats is not None:
        data["featureStats"] = feature_stats_to_dict(result.feature_stats)
    return data


def checkpoint_from_dict(data: dict) -> TrainResult:
    dims = tuple(data["layerDims"])
    weights = [np.asarray(w, dtype=float) for w in data["weights"]]
    biases = [np.asarray(b, dtype=float) for b in data["biases"]]
    net = Network(weights, biases)
    if net.layer_dims != dims:
        raise ValueError("checkpoint layerDims do not match its weight shapes")
    stats = None
    if "featureStats" in data:
        stats = feature_stats_from_dict(data["featureStats"])
    return TrainResult(net=net, per_epoch_rewards=[], trained_epochs=int(data["trainedEpochs"]),
                       seed=int(data["seed"]), feature_stats=stats)


def save_checkpoint(path: str | Path, result: TrainResult) -> None:
    Path(path).write_text(json.dumps(checkpoint_to_dict(result), indent=2,
                                     sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> TrainResult:
    return checkpoint_from_dict(json.loads(Path(path).read_text()))
