"""DDPG bidding agent written directly on numpy.

Networks are small dense MLPs with ReLU hidden layers whose parameters live in
one flat vector, so optimiser steps and soft target updates are single
vector operations. The actor ends in ``bid_cap * sigmoid``; the critic takes
the scaled observation with the scaled bid appended as a fifth input.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .auction import RUNNING, EnvironmentConfig, Episode, reset, run_episode, step
from .special_fn import OuParams, RngStream, ou_step
from .task_model import TaskSpec

FORMAT = "cloudalloc-ddpg-checkpoint"
FORMAT_VERSION = 1
OBS_DIM = 4


class Mlp:
    """Dense network ``sizes[0] -> ... -> sizes[-1]`` with ReLU hidden units.

    ``output`` is ``"linear"`` or ``"sigmoid"`` (scaled by ``scale``). The
    last layer must have a single unit.
    """

    def __init__(self, sizes, output: str = "linear", scale: float = 1.0, params=None):
        if len(sizes) < 2 or sizes[-1] != 1:
            raise ValueError("sizes must have >= 2 entries and end with 1")
        if output not in ("linear", "sigmoid"):
            raise ValueError(f"unknown output activation {output!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.output = output
        self.scale = float(scale)
        n = sum(i * o + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))
        if params is None:
            self.params = np.zeros(n)
        else:
            self.params = np.array(params, dtype=float)
            if self.params.shape != (n,):
                raise ValueError(f"expected {n} parameters, got {self.params.shape}")
        self._layers = self._views(self.params)
        self._cache = None

    def _views(self, flat):
        layers, k = [], 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            w = flat[k : k + i * o].reshape(i, o)
            k += i * o
            b = flat[k : k + o]
            k += o
            layers.append((w, b))
        return layers

    @property
    def layers(self):
        return self._layers

    def init(self, rng: RngStream) -> Mlp:
        """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
        for w, b in self._layers:
            bound = 1.0 / math.sqrt(w.shape[0])
            w[...] = rng.uniform_weights(-bound, bound, w.shape)
            b[...] = rng.uniform_weights(-bound, bound, b.shape)
        return self

    def copy(self) -> Mlp:
        return Mlp(self.sizes, self.output, self.scale, self.params.copy())

    def forward(self, x):
        """Scalar output for a 1-D input, shape ``(n,)`` for a batch."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {h.shape[1]} != {self.sizes[0]}")
        acts = [h]
        last = len(self._layers) - 1
        for k, (w, b) in enumerate(self._layers):
            z = h @ w + b
            h = np.maximum(z, 0.0) if k < last else z
            acts.append(h)
        z = h[:, 0]
        if self.output == "sigmoid":
            sig = 0.5 * (1.0 + np.tanh(0.5 * z))
            out = self.scale * sig
        else:
            sig = None
            out = z
        self._cache = (acts, sig, single)
        return float(out[0]) if single else out

    def backward(self, grad_out):
        """Gradients of ``sum(grad_out * output)`` w.r.t. parameters and input.

        Uses the activations cached by the latest ``forward``. Returns the
        flat parameter gradient and the input gradient (same shape as the
        input given to ``forward``).
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        acts, sig, single = self._cache
        g = np.asarray(grad_out, dtype=float).reshape(-1)
        if g.shape[0] != acts[0].shape[0]:
            raise ValueError("grad_out length does not match the cached batch")
        if self.output == "sigmoid":
            g = g * self.scale * sig * (1.0 - sig)
        grad = np.empty_like(self.params)
        gviews = self._views(grad)
        delta = g[:, None]
        for k in range(len(self._layers) - 1, -1, -1):
            w, _ = self._layers[k]
            gw, gb = gviews[k]
            gw[...] = acts[k].T @ delta
            gb[...] = delta.sum(axis=0)
            delta = delta @ w.T
            if k > 0:
                delta = delta * (acts[k] > 0)
        return grad, (delta[0] if single else delta)


class Sgd:
    """Plain gradient descent: ``params -= lr * grad``."""

    def __init__(self, size: int, lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray):
        params -= self.lr * grad

    def state(self) -> dict:
        return {}

    def load_state(self, state: dict):
        pass


class Adam:
    def __init__(self, size: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray):
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        lr_t = self.lr * math.sqrt(1 - self.beta2**self.t) / (1 - self.beta1**self.t)
        params -= lr_t * self.m / (np.sqrt(self.v) + self.eps)

    def state(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t}

    def load_state(self, state: dict):
        self.m = np.array(state["m"])
        self.v = np.array(state["v"])
        self.t = int(state["t"])


OPTIMIZERS = {"sgd": Sgd, "adam": Adam}


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.r)


class ReplayBuffer:
    """FIFO ring of transitions; minibatches drawn without replacement."""

    def __init__(self, capacity: int, obs_dim: int = OBS_DIM):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros(capacity)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self.inserted = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, done):
        k = self.inserted % self.capacity
        self.s[k] = s
        self.a[k] = a
        self.r[k] = r
        self.s2[k] = s2
        self.done[k] = float(done)
        self.inserted += 1
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: RngStream) -> Batch:
        if n > self.size:
            raise ValueError(f"cannot draw {n} from {self.size} transitions")
        idx = rng.choice(self.size, n)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx])

    def ordered(self) -> Batch:
        """Stored transitions from oldest to newest."""
        if self.size < self.capacity:
            idx = np.arange(self.size)
        else:
            idx = (np.arange(self.capacity) + self.inserted) % self.capacity
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx])


@dataclass(frozen=True)
class TrainConfig:
    discount: float = 0.99
    soft_update: float = 0.001
    batch_size: int = 32
    buffer_size: int = 50_000
    episodes: int = 5000
    actor_lr: float = 1e-5
    critic_lr: float = 1e-4
    hidden: tuple = (20, 15)
    bid_cap: float = 1.5
    noise_theta: float = 0.15
    noise_sigma: float = 0.3
    optimizer: str = "adam"
    eval_every: int = 100
    eval_episodes: int = 20

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0 <= self.discount < 1:
            raise ValueError("discount must be in [0, 1)")
        if not 0 < self.soft_update < 1:
            raise ValueError("soft_update must be in (0, 1)")
        if self.batch_size < 1 or self.buffer_size < self.batch_size:
            raise ValueError("need 1 <= batch_size <= buffer_size")
        if self.actor_lr <= 0 or self.critic_lr <= 0 or self.bid_cap <= 0:
            raise ValueError("learning rates and bid_cap must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}")
        if self.episodes < 0 or self.eval_every < 1 or self.eval_episodes < 1:
            raise ValueError("bad episode counts")

    @property
    def noise(self) -> OuParams:
        return OuParams(mu=0.0, theta=self.noise_theta, sigma=self.noise_sigma, dt=1.0)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ValueError(f"unknown train key(s) {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out


def soft_update(live: Mlp, target: Mlp, delta: float) -> Mlp:
    """``target <- delta * live + (1 - delta) * target`` in place."""
    if live.sizes != target.sizes:
        raise ValueError("soft update between networks of different shapes")
    target.params *= 1.0 - delta
    target.params += delta * live.params
    return target


class Ddpg:
    """Actor, critic, their targets and optimisers."""

    def __init__(self, actor: Mlp, critic: Mlp, config: TrainConfig, target_actor=None, target_critic=None):
        self.config = config
        self.actor = actor
        self.critic = critic
        self.target_actor = target_actor if target_actor is not None else actor.copy()
        self.target_critic = target_critic if target_critic is not None else critic.copy()
        opt = OPTIMIZERS[config.optimizer]
        self.actor_opt = opt(actor.params.size, config.actor_lr)
        self.critic_opt = opt(critic.params.size, config.critic_lr)

    @classmethod
    def create(cls, config: TrainConfig, rng: RngStream, obs_dim: int = OBS_DIM) -> Ddpg:
        actor = Mlp((obs_dim, *config.hidden, 1), "sigmoid", config.bid_cap).init(rng.child("actor"))
        critic = Mlp((obs_dim + 1, *config.hidden, 1)).init(rng.child("critic"))
        return cls(actor, critic, config)

    def act(self, obs) -> float:
        return self.actor.forward(obs)

    def _critic_input(self, s, a):
        return np.hstack([s, (np.asarray(a) / self.config.bid_cap)[:, None]])

    def critic_update(self, batch: Batch) -> np.ndarray:
        """One TD step on the critic; returns the TD errors.

        The bootstrap term uses the target networks and is dropped on
        terminal transitions.
        """
        if len(batch) == 0:
            raise ValueError("empty batch")
        cfg = self.config
        a2 = self.target_actor.forward(batch.s2)
        q2 = self.target_critic.forward(self._critic_input(batch.s2, a2))
        y = batch.r + cfg.discount * (1.0 - batch.done) * q2
        q = self.critic.forward(self._critic_input(batch.s, batch.a))
        td = y - q
        grad, _ = self.critic.backward(td)
        self.critic_opt.step(self.critic.params, -grad / len(batch))
        return td

    def action_gradient(self, s) -> tuple[np.ndarray, np.ndarray]:
        """``mu(s)`` and ``dQ/da`` at ``a = mu(s)`` under the live critic."""
        a = self.actor.forward(s)
        self.critic.forward(self._critic_input(s, a))
        _, gin = self.critic.backward(np.ones(len(a)))
        return a, gin[:, -1] / self.config.bid_cap

    def actor_update(self, batch: Batch) -> None:
        if len(batch) == 0:
            raise ValueError("empty batch")
        _, dq_da = self.action_gradient(batch.s)
        # action_gradient left the actor cache at batch.s
        self.actor.forward(batch.s)
        grad, _ = self.actor.backward(dq_da)
        self.actor_opt.step(self.actor.params, -grad / len(batch))

    def update_targets(self) -> None:
        soft_update(self.actor, self.target_actor, self.config.soft_update)
        soft_update(self.critic, self.target_critic, self.config.soft_update)


@dataclass
class PolicyCheckpoint:
    actor: Mlp
    critic: Mlp
    target_actor: Mlp
    target_critic: Mlp
    config: TrainConfig
    episode: int
    seed: int
    meta: dict = field(default_factory=dict)

    def policy(self):
        cap = self.config.bid_cap
        actor = self.actor.copy()
        return lambda state: actor.forward(state.observation(cap))

    def to_dict(self) -> dict:
        def net(m: Mlp):
            return {"sizes": list(m.sizes), "output": m.output, "scale": m.scale, "params": m.params.tolist()}

        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "seed": self.seed,
            "episode": self.episode,
            "config": self.config.to_dict(),
            "meta": self.meta,
            "actor": net(self.actor),
            "critic": net(self.critic),
            "target_actor": net(self.target_actor),
            "target_critic": net(self.target_critic),
        }

    @classmethod
    def from_dict(cls, data: dict) -> PolicyCheckpoint:
        if data.get("format") != FORMAT or data.get("version") != FORMAT_VERSION:
            raise ValueError("not a supported checkpoint (format/version mismatch)")

        def net(d):
            return Mlp(d["sizes"], d["output"], d["scale"], d["params"])

        ck = cls(
            actor=net(data["actor"]),
            critic=net(data["critic"]),
            target_actor=net(data["target_actor"]),
            target_critic=net(data["target_critic"]),
            config=TrainConfig.from_dict(data["config"]),
            episode=int(data["episode"]),
            seed=int(data["seed"]),
            meta=dict(data.get("meta", {})),
        )
        if ck.actor.sizes != ck.target_actor.sizes or ck.critic.sizes != ck.target_critic.sizes:
            raise ValueError("target networks do not match live network shapes")
        return ck

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> PolicyCheckpoint:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def snapshot(agent: Ddpg, episode: int, seed: int, meta=None) -> PolicyCheckpoint:
    return PolicyCheckpoint(
        agent.actor.copy(),
        agent.critic.copy(),
        agent.target_actor.copy(),
        agent.target_critic.copy(),
        agent.config,
        episode,
        seed,
        dict(meta or {}),
    )


def evaluate(policy, task: TaskSpec, env: EnvironmentConfig, episodes: int, rng: RngStream) -> list[Episode]:
    """Noise-free rollouts; episode ``k`` uses stream ``rng.child(k)``."""
    return [run_episode(policy, env, task, rng.child(k)) for k in range(episodes)]


@dataclass(frozen=True)
class CurvePoint:
    episode: int
    test_mean: float
    test_std: float
    total_bid: float


def train(
    task: TaskSpec,
    env: EnvironmentConfig,
    config: TrainConfig,
    seed: int = 0,
    eval_env: EnvironmentConfig | None = None,
) -> tuple[PolicyCheckpoint, list[CurvePoint]]:
    """Run DDPG and return the best checkpoint by test mean plus the curve.

    Every ``eval_every`` episodes the noise-free actor is rolled out
    ``eval_episodes`` times in ``eval_env`` (default ``env``), always on the
    same evaluation streams.
    """
    if abs(env.bid_cap - config.bid_cap) > 1e-12:
        raise ValueError("environment and training bid caps differ")
    eval_env = eval_env or env
    root = RngStream(seed).child("train")
    agent = Ddpg.create(config, root.child("init"))
    buffer = ReplayBuffer(config.buffer_size)
    noise_params = config.noise
    noise_rng = root.child("noise")
    replay_rng = root.child("replay")
    eval_rng = root.child("eval")
    cap = config.bid_cap

    best = snapshot(agent, 0, seed)
    best_mean = -math.inf
    curve: list[CurvePoint] = []

    for ep in range(1, config.episodes + 1):
        env_rng = root.child("episode", ep)
        state = reset(task, env, env_rng)
        obs = state.observation(cap)
        noise = 0.0
        while state.status == RUNNING:
            noise = ou_step(noise, noise_params, noise_rng)
            bid = min(max(agent.act(obs) + noise, 0.0), cap)
            state, reward, _ = step(state, bid, env, task, env_rng)
            obs2 = state.observation(cap)
            buffer.add(obs, bid, reward, obs2, state.status != RUNNING)
            obs = obs2
            if len(buffer) >= config.batch_size:
                batch = buffer.sample(config.batch_size, replay_rng)
                agent.critic_update(batch)
                agent.actor_update(batch)
                agent.update_targets()

        if ep % config.eval_every == 0:
            actor = agent.actor
            runs = evaluate(lambda s: actor.forward(s.observation(cap)), task, eval_env, config.eval_episodes, eval_rng)
            rewards = np.array([r.total_reward for r in runs])
            point = CurvePoint(ep, float(rewards.mean()), float(rewards.std()), float(np.mean([r.total_bid for r in runs])))
            curve.append(point)
            if point.test_mean > best_mean:
                best_mean = point.test_mean
                best = snapshot(agent, ep, seed, {"test_mean": point.test_mean, "test_std": point.test_std})
    return best, curve
