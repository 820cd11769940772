"""Multimodal control environments: image + synthesized sound observations.

Two environments are provided. The pendulum swing-up task pairs a 32x32
grayscale render with a sound channel: the rod tip emits a fixed tone whose
received frequency shifts with the tip velocity (radial Doppler) and whose
amplitude follows the inverse square law. The top-down shooter pairs the
render with a multi-emitter sound field: every live entity emits a
class-specific tone, receivers sum the attenuated waves, quantize to 16-bit
and report single-bin DFT magnitudes at the class frequencies.

All dynamics are deterministic given (seed, action sequence).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .rng import make_rng

__all__ = [
    "Observation",
    "doppler_frequency",
    "inverse_square_amplitude",
    "PendulumConfig",
    "PendulumEnv",
    "pendulum_step",
    "render_rod",
    "HyperhotConfig",
    "HyperhotEnv",
    "synth_waveform",
    "quantize_16bit",
    "dft_bin_magnitude",
    "write_pgm",
]


@dataclass
class Observation:
    image: np.ndarray                  # (H, W) grayscale in [0, 1]
    sound: np.ndarray                  # flat float vector
    mask: dict = field(default_factory=lambda: {"image": True, "sound": True})

    def flat(self) -> dict:
        return {"image": self.image.reshape(-1), "sound": self.sound}


# -- sound physics -------------------------------------------------------


def doppler_frequency(f0, emitter_pos, emitter_vel, receiver_pos, receiver_vel,
                      c) -> float:
    """Received frequency under radial Doppler with unit direction vectors."""
    e = np.asarray(emitter_pos, dtype=np.float64)
    r = np.asarray(receiver_pos, dtype=np.float64)
    ev = np.asarray(emitter_vel, dtype=np.float64)
    rv = np.asarray(receiver_vel, dtype=np.float64)
    if c <= 0:
        raise ValueError("speed of sound must be positive")
    diff = e - r
    dist = float(np.linalg.norm(diff))
    if dist == 0.0:
        raise ValueError("emitter and receiver positions coincide")
    u_toward_emitter = diff / dist         # from receiver toward emitter
    u_toward_receiver = -u_toward_emitter  # from emitter toward receiver
    num = c + float(rv @ u_toward_emitter)
    den = c - float(ev @ u_toward_receiver)
    if den <= 0.0:
        raise ValueError("emitter speed reaches the speed of sound")
    return f0 * num / den


def inverse_square_amplitude(K, emitter_pos, receiver_pos) -> float:
    e = np.asarray(emitter_pos, dtype=np.float64)
    r = np.asarray(receiver_pos, dtype=np.float64)
    d2 = float(np.sum((e - r) ** 2))
    if d2 == 0.0:
        raise ValueError("emitter and receiver positions coincide")
    return K / d2


# -- pendulum ------------------------------------------------------------


@dataclass
class PendulumConfig:
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    dt: float = 0.05
    max_torque: float = 2.0
    max_speed: float = 8.0
    max_steps: int = 200
    image_size: int = 32
    f0: float = 440.0
    speed_of_sound: float = 20.0
    amplitude_k: float = 1.0
    receivers: tuple = ((-1.5, 0.0), (1.5, 0.0))
    amplitude_norm: float = 4.0  # K / min_distance^2 at the default geometry
    doppler_scale: float = 4.0   # puts the shift feature on an O(1) scale


def _wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = (theta + np.pi) % (2.0 * np.pi) - np.pi
    if wrapped == -np.pi:
        wrapped = np.pi
    return float(wrapped)


def pendulum_step(theta: float, theta_dot: float, torque: float,
                  cfg: PendulumConfig = PendulumConfig()):
    """One Euler step of the swing-up dynamics; returns (theta, theta_dot, reward)."""
    g, m, length, dt = cfg.gravity, cfg.mass, cfg.length, cfg.dt
    u = float(np.clip(torque, -cfg.max_torque, cfg.max_torque))
    angle = _wrap_angle(theta)
    reward = -(angle ** 2 + 0.1 * theta_dot ** 2 + 0.001 * u ** 2)
    acc = (3.0 * g / (2.0 * length)) * np.sin(theta) + (3.0 / (m * length ** 2)) * u
    new_dot = float(np.clip(theta_dot + acc * dt, -cfg.max_speed, cfg.max_speed))
    new_theta = _wrap_angle(theta + new_dot * dt)
    return new_theta, new_dot, reward


def render_rod(theta: float, image_size: int) -> np.ndarray:
    """Anti-aliased rod from the image center; theta=0 points up (+y)."""
    half = (image_size - 1) / 2.0
    ys, xs = np.mgrid[0:image_size, 0:image_size]
    cx = (xs - half) / half
    cy = (half - ys) / half
    ux, uy = np.sin(theta), np.cos(theta)
    along = cx * ux + cy * uy
    perp = np.abs(-uy * cx + ux * cy)
    band = 2.0 / half
    img = np.clip(1.0 - perp / band, 0.0, 1.0)
    img[(along < 0.0) | (along > 0.95)] = 0.0
    return img


class PendulumEnv:
    """Swing-up task with image + Doppler/inverse-square sound observations."""

    action_dim = 1

    def __init__(self, cfg: PendulumConfig | None = None, seed: int = 0):
        self.cfg = cfg or PendulumConfig()
        self.seed = seed
        self.theta = 0.0
        self.theta_dot = 0.0
        self.steps = 0
        self._episode = 0

    def reset(self) -> Observation:
        rng = make_rng(self.seed, 0x9E4D, self._episode)
        self._episode += 1
        self.theta = float(rng.uniform(-np.pi, np.pi))
        self.theta_dot = float(rng.uniform(-1.0, 1.0))
        self.steps = 0
        return self.observe()

    def step(self, torque: float):
        self.theta, self.theta_dot, reward = pendulum_step(
            self.theta, self.theta_dot, torque, self.cfg)
        self.steps += 1
        done = self.steps >= self.cfg.max_steps
        return self.observe(), reward, done

    def sound(self) -> np.ndarray:
        cfg = self.cfg
        tip = np.array([np.sin(self.theta), np.cos(self.theta)]) * cfg.length
        tip_vel = self.theta_dot * cfg.length * np.array(
            [np.cos(self.theta), -np.sin(self.theta)])
        out = []
        for recv in cfg.receivers:
            f = doppler_frequency(cfg.f0, tip, tip_vel, recv, (0.0, 0.0),
                                  cfg.speed_of_sound)
            a = inverse_square_amplitude(cfg.amplitude_k, tip, recv)
            out.extend([(f / cfg.f0 - 1.0) * cfg.doppler_scale,
                        a / cfg.amplitude_norm])
        return np.array(out)

    def observe(self) -> Observation:
        # dark rod on a bright background, like a camera pointed at a lit scene
        return Observation(1.0 - render_rod(self.theta, self.cfg.image_size),
                           self.sound())

    @property
    def sound_dim(self) -> int:
        return 2 * len(self.cfg.receivers)


# -- sound field synthesis ----------------------------------------------


def synth_waveform(emitters, receiver, n_samples: int, sample_rate: float,
                   decay: float) -> np.ndarray:
    """Sum of attenuated sinusoids at one receiver.

    `emitters` is a sequence of (position, frequency, base_amplitude); the
    amplitude seen by the receiver decays as exp(-decay * distance^2).
    """
    t = np.arange(n_samples) / sample_rate
    wave = np.zeros(n_samples)
    r = np.asarray(receiver, dtype=np.float64)
    for pos, freq, a0 in emitters:
        d2 = float(np.sum((np.asarray(pos) - r) ** 2))
        amp = a0 * np.exp(-decay * d2)
        wave += amp * np.sin(2.0 * np.pi * freq * t)
    return wave


def quantize_16bit(wave: np.ndarray, max_amplitude: float) -> np.ndarray:
    """Clamp to [-max_amplitude, max_amplitude] and quantize to 16-bit ints."""
    clipped = np.clip(wave, -max_amplitude, max_amplitude)
    return np.round(clipped / max_amplitude * 32767.0).astype(np.int32)


def dft_bin_magnitude(wave: np.ndarray, freq: float, sample_rate: float) -> float:
    """Single-bin DFT magnitude at `freq`, normalized to sinusoid amplitude."""
    n = wave.shape[0]
    t = np.arange(n) / sample_rate
    z = np.sum(wave * np.exp(-2j * np.pi * freq * t))
    return float(2.0 * np.abs(z) / n)


# -- shooter -------------------------------------------------------------


@dataclass
class HyperhotConfig:
    image_size: int = 32
    n_enemies_per_group: int = 3
    march_period: int = 40
    march_amplitude: float = 0.08
    enemy_fire_period: int = 25
    enemy_fire_jitter: int = 5
    agent_cooldown: int = 8
    agent_speed: float = 0.03
    agent_bullet_speed: float = 0.05
    enemy_bullet_speed: float = 0.03
    hit_radius: float = 0.045
    max_steps: int = 500
    receivers: tuple = ((0.0, 0.0), (1.0 / 3.0, 0.0), (2.0 / 3.0, 0.0), (1.0, 0.0))
    class_frequencies: tuple = (1500.0, 2500.0, 3500.0, 4500.0)
    base_amplitude: float = 1.0
    sound_decay: float = 8.0
    max_amplitude: float = 4.0
    n_audio_samples: int = 1047
    sample_rate: float = 31400.0


ACTIONS = ("noop", "left", "right", "shoot")


@dataclass
class _Enemy:
    base_x: float
    y: float
    group: int          # 0 = left, 1 = right
    alive: bool = True
    next_fire: int = 0
    x: float = 0.0


@dataclass
class _Bullet:
    x: float
    y: float
    vy: float
    owner: int          # 0 = agent, 1 = enemy


class HyperhotEnv:
    """Top-down shooter over the unit square with a multi-emitter sound field.

    Rewards: +10 and terminal when the last enemy dies; -1 and terminal when
    the agent is hit or time runs out; 0 otherwise.
    """

    n_actions = len(ACTIONS)

    def __init__(self, cfg: HyperhotConfig | None = None, seed: int = 0):
        self.cfg = cfg or HyperhotConfig()
        self.seed = seed
        self._episode = 0
        self.reset()

    def reset(self) -> Observation:
        cfg = self.cfg
        self._rng = make_rng(self.seed, 0x5B07, self._episode)
        self._episode += 1
        self.t = 0
        self.done = False
        self.agent_x = 0.5
        self.cooldown = 0
        self.enemies = []
        for g, x0 in ((0, 0.12), (1, 0.62)):
            for k in range(cfg.n_enemies_per_group):
                e = _Enemy(base_x=x0 + 0.13 * k, y=0.88 - 0.0 * k, group=g)
                e.next_fire = cfg.enemy_fire_period + int(
                    self._rng.integers(-cfg.enemy_fire_jitter,
                                       cfg.enemy_fire_jitter + 1))
                self.enemies.append(e)
        self._march()
        self.bullets: list[_Bullet] = []
        return self.observe()

    def _march(self):
        cfg = self.cfg
        offset = cfg.march_amplitude * np.sin(2.0 * np.pi * self.t / cfg.march_period)
        for e in self.enemies:
            e.x = float(np.clip(e.base_x + offset, 0.02, 0.98))

    def step(self, action: int):
        if self.done:
            raise RuntimeError("step() called on a finished episode")
        cfg = self.cfg
        name = ACTIONS[action]
        if name == "left":
            self.agent_x = max(0.05, self.agent_x - cfg.agent_speed)
        elif name == "right":
            self.agent_x = min(0.95, self.agent_x + cfg.agent_speed)
        elif name == "shoot" and self.cooldown == 0:
            self.bullets.append(_Bullet(self.agent_x, 0.08, cfg.agent_bullet_speed, 0))
            self.cooldown = cfg.agent_cooldown
        self.cooldown = max(0, self.cooldown - 1)

        self.t += 1
        self._march()

        # enemy fire
        for e in self.enemies:
            if e.alive and self.t >= e.next_fire:
                self.bullets.append(_Bullet(e.x, e.y - 0.03, -cfg.enemy_bullet_speed, 1))
                e.next_fire = self.t + cfg.enemy_fire_period + int(
                    self._rng.integers(-cfg.enemy_fire_jitter,
                                       cfg.enemy_fire_jitter + 1))

        # move bullets, resolve hits
        agent_hit = False
        keep = []
        for b in self.bullets:
            b.y += b.vy
            if b.y < 0.0 or b.y > 1.0:
                continue
            if b.owner == 0:
                hit = False
                for e in self.enemies:
                    if e.alive and abs(e.x - b.x) < cfg.hit_radius \
                            and abs(e.y - b.y) < cfg.hit_radius:
                        e.alive = False
                        hit = True
                        break
                if hit:
                    continue
            else:
                if abs(b.x - self.agent_x) < cfg.hit_radius and b.y < 0.1:
                    agent_hit = True
                    continue
            keep.append(b)
        self.bullets = keep

        if all(not e.alive for e in self.enemies):
            reward, self.done = 10.0, True
        elif agent_hit or self.t >= cfg.max_steps:
            reward, self.done = -1.0, True
        else:
            reward = 0.0
        return self.observe(), reward, self.done

    # -- observations ---------------------------------------------------

    def _emitters(self):
        """(position, class index) for every live sound source."""
        out = []
        for e in self.enemies:
            if e.alive:
                out.append(((e.x, e.y), e.group))
        for b in self.bullets:
            out.append(((b.x, b.y), 2 if b.owner == 1 else 3))
        return out

    def sound(self) -> np.ndarray:
        cfg = self.cfg
        emitters = [((pos), cfg.class_frequencies[cls], cfg.base_amplitude)
                    for pos, cls in self._emitters()]
        bins = []
        for recv in cfg.receivers:
            if emitters:
                wave_q = quantize_16bit(
                    synth_waveform(emitters, recv, cfg.n_audio_samples,
                                   cfg.sample_rate, cfg.sound_decay),
                    cfg.max_amplitude)
                wave = wave_q.astype(np.float64) / 32767.0 * cfg.max_amplitude
            else:
                wave = np.zeros(cfg.n_audio_samples)
            for f in cfg.class_frequencies:
                bins.append(dft_bin_magnitude(wave, f, cfg.sample_rate))
        return np.array(bins)

    def waveforms(self) -> np.ndarray:
        """Quantized per-receiver waveforms, shape (S, n_audio_samples)."""
        cfg = self.cfg
        emitters = [((pos), cfg.class_frequencies[cls], cfg.base_amplitude)
                    for pos, cls in self._emitters()]
        rows = []
        for recv in cfg.receivers:
            wave = synth_waveform(emitters, recv, cfg.n_audio_samples,
                                  cfg.sample_rate, cfg.sound_decay) \
                if emitters else np.zeros(cfg.n_audio_samples)
            rows.append(quantize_16bit(wave, cfg.max_amplitude))
        return np.stack(rows)

    def render(self) -> np.ndarray:
        cfg = self.cfg
        size = cfg.image_size
        img = np.zeros((size, size))

        def paint(x, y, value, half=1):
            col = int(round(x * (size - 1)))
            row = int(round((1.0 - y) * (size - 1)))
            img[max(0, row - half):row + half + 1,
                max(0, col - half):col + half + 1] = value

        for e in self.enemies:
            if e.alive:
                paint(e.x, e.y, 0.7)
        for b in self.bullets:
            paint(b.x, b.y, 0.4 if b.owner == 1 else 0.55, half=0)
        paint(self.agent_x, 0.05, 1.0)
        return img

    def observe(self) -> Observation:
        return Observation(self.render(), self.sound())

    @property
    def sound_dim(self) -> int:
        return len(self.cfg.receivers) * len(self.cfg.class_frequencies)


# -- artifact dumps ------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """Binary portable graymap (P5), maxval 255."""
    h, w = image.shape
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
