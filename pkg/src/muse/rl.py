"""Latent-state reinforcement learning: DQN and DDPG over observation adapters.

An adapter turns a multimodal observation (possibly with missing modalities)
into the policy's input vector. Raw adapters concatenate with zero
imputation; latent adapters run a frozen representation model and hand the
policy its multimodal posterior mean, fusing only the modalities that are
actually available. Policies never fine-tune the representation model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ParamStore, Tensor
from .envs import Observation
from .model import MuseModel, _init_mlp, _mlp_head, _ACTS
from .rng import make_rng

__all__ = [
    "Transition",
    "ReplayBuffer",
    "ObservationAdapter",
    "q_target",
    "DqnConfig",
    "DdpgConfig",
    "DqnAgent",
    "DdpgAgent",
    "train_dqn",
    "train_ddpg",
    "zero_shot_eval",
    "random_policy_eval",
]


@dataclass
class Transition:
    obs: np.ndarray
    action: object
    reward: float
    next_obs: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform sampling."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._data: list[Transition] = []
        self._cursor = 0
        self.inserted = 0

    def __len__(self):
        return len(self._data)

    def push(self, tr: Transition) -> None:
        if len(self._data) < self.capacity:
            self._data.append(tr)
        else:
            self._data[self._cursor] = tr
        self._cursor = (self._cursor + 1) % self.capacity
        self.inserted += 1

    def sample(self, batch_size: int, rng) -> list[Transition]:
        idx = rng.integers(0, len(self._data), size=batch_size)
        return [self._data[i] for i in idx]


ADAPTER_KINDS = ("raw_fusion", "raw_fusion_dropout", "vae_latent",
                 "mvae_latent", "muse_latent")


class ObservationAdapter:
    """Maps observations to policy input vectors under a modality mask."""

    def __init__(self, kind: str, model: MuseModel | None = None,
                 dropout_p: float = 0.2, modality_dims: dict | None = None):
        if kind not in ADAPTER_KINDS:
            raise ContractError(f"unknown adapter kind '{kind}'")
        if kind.endswith("latent") and model is None:
            raise ContractError(f"adapter '{kind}' needs a representation model")
        self.kind = kind
        self.model = model
        self.dropout_p = dropout_p
        self.modality_dims = modality_dims

    def dim(self) -> int:
        if self.kind in ("raw_fusion", "raw_fusion_dropout"):
            return sum(self.modality_dims.values())
        return self.model.top_latent_dim

    def vector(self, obs, mask: dict | None = None, training: bool = False,
               rng=None) -> np.ndarray:
        if isinstance(obs, np.ndarray):
            return obs
        data = obs.flat() if isinstance(obs, Observation) else dict(obs)
        if mask is None:
            mask = {name: True for name in data}
        if self.kind == "raw_fusion_dropout" and training:
            mask = dict(mask)
            for name in mask:
                if mask[name] and rng.uniform() < self.dropout_p:
                    mask[name] = False
        available = {n: v for n, v in data.items() if mask.get(n, True)}

        if self.kind in ("raw_fusion", "raw_fusion_dropout"):
            if not available:
                raise ContractError("raw adapter with every modality masked")
            parts = [available.get(n, np.zeros(d))
                     for n, d in self.modality_dims.items()]
            return np.concatenate(parts)

        model = self.model
        if self.kind == "vae_latent":
            # fusion architecture: unavailable blocks are zero-imputed
            q = model._fusion_encode({n: v[None, :] for n, v in available.items()}
                                     if available else
                                     {model.modalities[0].name:
                                      np.zeros((1, model.modalities[0].data_dim))})
            return q.mean.value[0]
        # muse_latent / mvae_latent: PoE over available modalities only
        if not available:
            return np.zeros(model.top_latent_dim)
        if model.hierarchical:
            codes = {n: model.code_of(n, v[None, :], "deterministic").value
                     for n, v in available.items()}
            q = model.encode_multimodal(codes)
        else:
            q = model.encode_multimodal({n: v[None, :] for n, v in available.items()})
        return q.mean.value[0]


def q_target(reward: float, done: bool, q_next: np.ndarray, gamma: float) -> float:
    """Bellman backup target: r + gamma * max_a' Q'(s', a'), or r at terminals."""
    if done:
        return float(reward)
    return float(reward + gamma * np.max(q_next))


# -- DQN -----------------------------------------------------------------


@dataclass
class DqnConfig:
    steps: int = 50_000
    buffer_capacity: int = 50_000
    batch_size: int = 128
    learning_rate: float = 1e-3
    gamma: float = 0.99
    target_update_every: int = 500
    eps_start: float = 1.0
    eps_final: float = 0.05
    eps_fraction: float = 0.3
    hidden: tuple = (128, 128)
    learn_start: int = 500
    train_every: int = 1
    seed: int = 0
    divergence_limit: float = 1e6


class DqnAgent:
    def __init__(self, obs_dim: int, n_actions: int, cfg: DqnConfig):
        self.cfg = cfg
        self.n_actions = n_actions
        self.params = ParamStore()
        rng = make_rng(cfg.seed, 0xD09)
        _init_mlp(self.params, rng, "q", obs_dim, cfg.hidden, n_actions)
        self.target = self.params.copy()

    def q_values(self, obs_vec: np.ndarray, params: ParamStore | None = None) -> np.ndarray:
        params = params or self.params
        bound = params.bind()
        out = _mlp_head(bound, "q", Tensor(obs_vec[None, :]),
                        len(self.cfg.hidden), _ACTS["relu"])
        return out.value[0]

    def act(self, obs_vec: np.ndarray, epsilon: float, rng) -> int:
        if rng.uniform() < epsilon:
            return int(rng.integers(self.n_actions))
        return int(np.argmax(self.q_values(obs_vec)))

    def loss(self, bound, obs: np.ndarray, actions: np.ndarray,
             targets: np.ndarray) -> Tensor:
        q_all = _mlp_head(bound, "q", Tensor(obs), len(self.cfg.hidden),
                          _ACTS["relu"])
        onehot = np.zeros((len(actions), self.n_actions))
        onehot[np.arange(len(actions)), actions] = 1.0
        q_sel = ad.sum_(q_all * Tensor(onehot), axis=-1)
        return ad.mean_(ad.square(q_sel - Tensor(targets)))

    def update(self, batch: list[Transition]) -> float:
        cfg = self.cfg
        obs = np.stack([t.obs for t in batch])
        next_obs = np.stack([t.next_obs for t in batch])
        actions = np.array([t.action for t in batch], dtype=np.int64)
        rewards = np.array([t.reward for t in batch])
        dones = np.array([t.done for t in batch], dtype=bool)

        bound_t = self.target.bind()
        q_next = _mlp_head(bound_t, "q", Tensor(next_obs), len(cfg.hidden),
                           _ACTS["relu"]).value
        targets = np.where(dones, rewards,
                           rewards + cfg.gamma * q_next.max(axis=-1))
        if np.abs(targets).max() > cfg.divergence_limit:
            raise ad.NumericError("DQN targets diverged")
        bound = self.params.bind()
        loss = self.loss(bound, obs, actions, targets)
        loss.backward()
        self.params.adam_step(ParamStore.collect_grads(bound), lr=cfg.learning_rate)
        return float(loss.value)


def _epsilon(step: int, cfg: DqnConfig) -> float:
    horizon = max(1, int(cfg.steps * cfg.eps_fraction))
    frac = min(1.0, step / horizon)
    return cfg.eps_start + frac * (cfg.eps_final - cfg.eps_start)


def train_dqn(env, adapter: ObservationAdapter, cfg: DqnConfig):
    """Train a DQN policy; returns (agent, per-episode reward curve)."""
    rng = make_rng(cfg.seed, 0xD41)
    agent = DqnAgent(adapter.dim(), env.n_actions, cfg)
    buf = ReplayBuffer(cfg.buffer_capacity)
    curve = []
    obs_vec = adapter.vector(env.reset(), training=True, rng=rng)
    ep_reward, episode = 0.0, 0
    for step in range(cfg.steps):
        action = agent.act(obs_vec, _epsilon(step, cfg), rng)
        obs, reward, done = env.step(action)
        next_vec = adapter.vector(obs, training=True, rng=rng)
        buf.push(Transition(obs_vec, action, reward, next_vec, done))
        ep_reward += reward
        obs_vec = next_vec
        if done:
            curve.append({"episode": episode, "reward": ep_reward, "step": step})
            episode += 1
            ep_reward = 0.0
            obs_vec = adapter.vector(env.reset(), training=True, rng=rng)
        if len(buf) >= max(cfg.learn_start, cfg.batch_size) \
                and step % cfg.train_every == 0:
            agent.update(buf.sample(cfg.batch_size, rng))
        if step % cfg.target_update_every == 0:
            agent.target = agent.params.copy()
    return agent, curve


# -- DDPG ----------------------------------------------------------------


@dataclass
class DdpgConfig:
    steps: int = 100_000
    buffer_capacity: int = 50_000
    batch_size: int = 128
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    gamma: float = 0.99
    tau: float = 0.005
    noise_sd: float = 0.1
    noise_decay_to: float = 0.02
    hidden: tuple = (64, 64)
    learn_start: int = 1000
    train_every: int = 1
    action_limit: float = 2.0
    seed: int = 0
    divergence_limit: float = 1e6


class DdpgAgent:
    def __init__(self, obs_dim: int, act_dim: int, cfg: DdpgConfig):
        self.cfg = cfg
        self.act_dim = act_dim
        rng = make_rng(cfg.seed, 0xDD9)
        self.actor = ParamStore()
        _init_mlp(self.actor, rng, "pi", obs_dim, cfg.hidden, act_dim)
        self.critic = ParamStore()
        _init_mlp(self.critic, rng, "qf", obs_dim + act_dim, cfg.hidden, 1)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()

    def _actor_out(self, bound, obs: Tensor) -> Tensor:
        raw = _mlp_head(bound, "pi", obs, len(self.cfg.hidden), _ACTS["relu"])
        return self.cfg.action_limit * ad.tanh(raw)

    def _critic_out(self, bound, obs: Tensor, act: Tensor) -> Tensor:
        x = ad.concat([obs, act], axis=-1)
        return _mlp_head(bound, "qf", x, len(self.cfg.hidden), _ACTS["relu"])

    def act(self, obs_vec: np.ndarray, noise_sd: float = 0.0, rng=None) -> np.ndarray:
        a = self._actor_out(self.actor.bind(), Tensor(obs_vec[None, :])).value[0]
        if noise_sd > 0.0:
            a = a + rng.normal(scale=noise_sd, size=a.shape)
        return np.clip(a, -self.cfg.action_limit, self.cfg.action_limit)

    def critic_loss(self, bound, obs: np.ndarray, act: np.ndarray,
                    targets: np.ndarray) -> Tensor:
        q = self._critic_out(bound, Tensor(obs), Tensor(act))
        return ad.mean_(ad.square(q - Tensor(targets[:, None])))

    def update(self, batch: list[Transition]) -> None:
        cfg = self.cfg
        obs = np.stack([t.obs for t in batch])
        next_obs = np.stack([t.next_obs for t in batch])
        acts = np.stack([np.atleast_1d(t.action) for t in batch]).astype(np.float64)
        rewards = np.array([t.reward for t in batch])
        dones = np.array([t.done for t in batch], dtype=bool)

        a_next = self._actor_out(self.actor_target.bind(), Tensor(next_obs)).value
        q_next = self._critic_out(self.critic_target.bind(), Tensor(next_obs),
                                  Tensor(a_next)).value[:, 0]
        targets = np.where(dones, rewards, rewards + cfg.gamma * q_next)
        if np.abs(targets).max() > cfg.divergence_limit:
            raise ad.NumericError("DDPG targets diverged")

        bound_c = self.critic.bind()
        closs = self.critic_loss(bound_c, obs, acts, targets)
        closs.backward()
        self.critic.adam_step(ParamStore.collect_grads(bound_c), lr=cfg.critic_lr)

        # actor ascends the critic; critic params held fixed
        bound_a = self.actor.bind()
        bound_cf = self.critic.bind()
        a_pred = self._actor_out(bound_a, Tensor(obs))
        q_pi = self._critic_out(bound_cf, Tensor(obs), a_pred)
        aloss = -ad.mean_(q_pi)
        aloss.backward()
        self.actor.adam_step(ParamStore.collect_grads(bound_a), lr=cfg.actor_lr)

        self._soft_update(self.actor_target, self.actor, cfg.tau)
        self._soft_update(self.critic_target, self.critic, cfg.tau)

    @staticmethod
    def _soft_update(target: ParamStore, source: ParamStore, tau: float) -> None:
        for name in source.names():
            target[name] = (1.0 - tau) * target[name] + tau * source[name]


def train_ddpg(env, adapter: ObservationAdapter, cfg: DdpgConfig):
    """Train a DDPG policy; returns (agent, per-episode reward curve)."""
    rng = make_rng(cfg.seed, 0xDDA)
    agent = DdpgAgent(adapter.dim(), env.action_dim, cfg)
    buf = ReplayBuffer(cfg.buffer_capacity)
    curve = []
    obs_vec = adapter.vector(env.reset(), training=True, rng=rng)
    ep_reward, episode = 0.0, 0
    for step in range(cfg.steps):
        frac = step / max(1, cfg.steps)
        noise = cfg.noise_sd + frac * (cfg.noise_decay_to - cfg.noise_sd)
        if step < cfg.learn_start:
            action = rng.uniform(-cfg.action_limit, cfg.action_limit,
                                 size=agent.act_dim)
        else:
            action = agent.act(obs_vec, noise_sd=noise, rng=rng)
        obs, reward, done = env.step(float(action[0]))
        next_vec = adapter.vector(obs, training=True, rng=rng)
        buf.push(Transition(obs_vec, action, reward, next_vec, done))
        ep_reward += reward
        obs_vec = next_vec
        if done:
            curve.append({"episode": episode, "reward": ep_reward, "step": step})
            episode += 1
            ep_reward = 0.0
            obs_vec = adapter.vector(env.reset(), training=True, rng=rng)
        if len(buf) >= max(cfg.learn_start, cfg.batch_size) \
                and step % cfg.train_every == 0:
            agent.update(buf.sample(cfg.batch_size, rng))
    return agent, curve


# -- evaluation ----------------------------------------------------------


def _episode_reward(env, policy_fn, adapter, mask) -> float:
    obs = env.reset()
    total = 0.0
    done = False
    while not done:
        vec = adapter.vector(obs, mask=mask)
        obs, reward, done = env.step(policy_fn(vec))
        total += reward
    return total


def zero_shot_eval(agent, adapter: ObservationAdapter, env, modality_mask: dict,
                   episodes: int, seed: int = 0):
    """Evaluate a trained policy under a modality mask; no parameter updates.

    Returns (mean, sd) of per-episode rewards. Episodes derive their seeds
    from `seed` through the environment's own reset stream.
    """
    env.seed = seed
    env._episode = 0
    if isinstance(agent, DdpgAgent):
        policy_fn = lambda v: float(agent.act(v)[0])
    else:
        policy_fn = lambda v: int(np.argmax(agent.q_values(v)))
    rewards = [ _episode_reward(env, policy_fn, adapter, modality_mask)
                for _ in range(episodes) ]
    return float(np.mean(rewards)), float(np.std(rewards))


def random_policy_eval(env, episodes: int, seed: int = 0, continuous: bool = False,
                       action_limit: float = 2.0):
    """Uniform-random baseline measured the same way as zero_shot_eval."""
    env.seed = seed
    env._episode = 0
    rng = make_rng(seed, 0x4A4D)
    rewards = []
    for _ in range(episodes):
        env.reset()
        total, done = 0.0, False
        while not done:
            if continuous:
                a = float(rng.uniform(-action_limit, action_limit))
                _, r, done = env.step(a)
            else:
                _, r, done = env.step(int(rng.integers(env.n_actions)))
            total += r
        rewards.append(total)
    return float(np.mean(rewards)), float(np.std(rewards))
