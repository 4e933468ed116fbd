"""Synthetic air-hockey interaction data under haptic guidance.

A human paddle defends the lower half of the table while a scripted opponent
plays the upper half.  At every step the robot pulls the human paddle toward
an intercept point; simulated users follow that pull to a degree set by their
profile and otherwise chase their own (biased) target.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    MetaDataset, NormalizationStats, Samples, user_file_name, write_user_csv, write_user_file,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UserProfile:
    compliance: float
    lateral_bias: tuple[float, float]
    motor_noise: float
    reaction_lag: int
    skill: float

    def __post_init__(self):
        if not 0.0 <= self.compliance <= 1.0:
            raise ValueError(f"compliance must lie in [0, 1], got {self.compliance}")
        if self.motor_noise < 0:
            raise ValueError("motor_noise must be >= 0")
        if self.reaction_lag < 0:
            raise ValueError("reaction_lag must be >= 0")
        if self.skill <= 0:
            raise ValueError("skill must be positive")

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "UserProfile":
        return cls(
            compliance=float(rng.uniform(0.3, 0.95)),
            lateral_bias=(float(rng.normal(0, 0.1)), float(rng.normal(0, 0.1))),
            motor_noise=float(rng.uniform(0.005, 0.03)),
            reaction_lag=int(rng.integers(0, 4)),
            skill=float(rng.uniform(6.0, 12.0)),
        )


@dataclass(frozen=True)
class EnvConfig:
    width: float = 3.0
    length: float = 6.0
    restitution: float = 0.95
    dt: float = 0.1
    guidance_gain: float = 5.0
    intent_gain: float = 0.3
    episode_length: int = 500
    opponent_seed: int = 0
    defense_line: float = -2.1
    paddle_radius: float = 0.15
    puck_radius: float = 0.09
    puck_speed: tuple[float, float] = (1.8, 9.0)
    opponent_speed: float = 9.0
    include_opponent_velocity: bool = True

    def __post_init__(self):
        if self.width <= 0 or self.length <= 0:
            raise ValueError("table bounds must be positive")
        if self.episode_length < 2:
            raise ValueError("episode_length must be >= 2")
        if not 0 < self.guidance_gain * self.dt <= 1:
            raise ValueError("guidance_gain * dt must lie in (0, 1]")

    @property
    def dim_s(self) -> int:
        return 12 if self.include_opponent_velocity else 10

    def human_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        r = self.paddle_radius
        return (np.array([-self.width / 2 + r, -self.length / 2 + r]), np.array([self.width / 2 - r, -r]))

    def opponent_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        r = self.paddle_radius
        return (np.array([-self.width / 2 + r, r]), np.array([self.width / 2 - r, self.length / 2 - r]))


def _fold(x: float, lo: float, hi: float) -> float:
    """Reflect ``x`` back into [lo, hi] as a bouncing trajectory would."""
    span = hi - lo
    u = (x - lo) % (2 * span)
    return lo + (u if u <= span else 2 * span - u)


def _clip_norm(v: np.ndarray, limit: float) -> np.ndarray:
    n = float(np.hypot(v[0], v[1]))
    return v if n <= limit else v * (limit / n)


def intercept_point(puck_pos, puck_vel, opp_pos, env: EnvConfig) -> np.ndarray:
    """Where the guidance wants the human paddle to be.

    Incoming puck: its predicted crossing of the defense line (folding side
    wall bounces), stepping forward to meet it once it is in the human half.
    Otherwise: a position shading the opponent's likely cross-court shot.
    """
    lo, hi = env.human_bounds()
    half = env.width / 2 - env.puck_radius
    y = env.defense_line
    if puck_vel[1] < -1e-9:
        t = (env.defense_line - puck_pos[1]) / puck_vel[1]
        x = _fold(puck_pos[0] + puck_vel[0] * max(t, 0.0), -half, half)
        if puck_pos[1] < 0:
            y = env.defense_line + 1.0 * max(puck_pos[1] - env.defense_line, 0.0)
    else:
        x = -0.5 * opp_pos[0]
    return np.clip(np.array([x, y]), lo, hi)


def _collide(puck_pos, puck_vel, paddle_pos, paddle_vel, env: EnvConfig):
    d = puck_pos - paddle_pos
    dist = float(np.hypot(d[0], d[1]))
    reach = env.paddle_radius + env.puck_radius
    if dist >= reach or dist == 0.0:
        return puck_pos, puck_vel
    n = d / dist
    rel = puck_vel - paddle_vel
    vn = float(rel @ n)
    if vn < 0:
        rel = rel - (1 + env.restitution) * vn * n
    return paddle_pos + n * reach, paddle_vel + rel


def _step_puck(pos, vel, env: EnvConfig):
    pos = pos + vel * env.dt
    hx, hy = env.width / 2 - env.puck_radius, env.length / 2 - env.puck_radius
    for axis, lim in ((0, hx), (1, hy)):
        if pos[axis] > lim:
            pos[axis] = 2 * lim - pos[axis]
            vel[axis] = -abs(vel[axis]) * env.restitution
        elif pos[axis] < -lim:
            pos[axis] = -2 * lim - pos[axis]
            vel[axis] = abs(vel[axis]) * env.restitution
    speed = float(np.hypot(vel[0], vel[1]))
    lo, hi = env.puck_speed
    if speed < lo:
        vel = vel * (lo / max(speed, 1e-12)) if speed > 1e-12 else np.array([0.0, -lo])
    elif speed > hi:
        vel = vel * (hi / speed)
    return pos, vel


def simulate_episode(profile: UserProfile, env: EnvConfig, seed, episode_id: int = 0) -> Samples:
    """Roll out one episode; returns raw (unnormalized) samples.

    ``seed`` may be an int or a sequence of ints (e.g. ``(seed, user, episode)``).
    """
    rng = np.random.default_rng(seed)
    opp_rng = np.random.default_rng([env.opponent_seed, *np.atleast_1d(seed).tolist()])
    h_lo, h_hi = env.human_bounds()
    o_lo, o_hi = env.opponent_bounds()
    bias = np.asarray(profile.lateral_bias, dtype=float)
    smooth = 1.0 / (1.0 + profile.reaction_lag)

    w = env.width
    human = np.array([rng.uniform(-0.2, 0.2) * w, env.defense_line])
    human_vel = np.zeros(2)
    opp = np.array([0.0, -env.defense_line])
    opp_vel = np.zeros(2)
    puck = np.array([rng.uniform(-0.3, 0.3) * w, rng.uniform(0.2, 0.6) * w])
    puck_vel = np.array([rng.uniform(-1.0, 1.0), -rng.uniform(1.0, 2.0)]) * w
    opp_aim = 0.0

    T = env.episode_length
    xs = np.empty((T, env.dim_s))
    xr = np.empty((T, 2))
    xh = np.empty((T, 2))
    y = np.empty((T, 2))

    for t in range(T):
        parts = [human, human_vel, opp] + ([opp_vel] if env.include_opponent_velocity else []) + [puck, puck_vel]
        xs[t] = np.concatenate(parts)
        target = intercept_point(puck, puck_vel, opp, env)
        force = env.guidance_gain * (target - human)
        xr[t] = force
        xh[t] = human

        # human response
        follow = force * env.dt
        own = env.intent_gain * (np.array([puck[0], env.defense_line]) + bias - human)
        raw = profile.compliance * follow + (1.0 - profile.compliance) * own
        step = smooth * raw + (1.0 - smooth) * human_vel * env.dt
        step = _clip_norm(step, profile.skill * env.dt)
        nxt = human + step
        if profile.motor_noise > 0:
            nxt = nxt + rng.normal(0.0, profile.motor_noise, 2)
        nxt = np.clip(nxt, h_lo, h_hi)
        y[t] = nxt

        # opponent: track the puck with a wandering aim offset
        if opp_rng.random() < 0.05:
            opp_aim = float(opp_rng.uniform(-0.25, 0.25)) * w
        opp_target = np.array([puck[0] + opp_aim, -env.defense_line if puck[1] < 0 else puck[1] + 0.1 * w])
        opp_step = _clip_norm(0.3 * (opp_target - opp), env.opponent_speed * env.dt)
        new_opp = np.clip(opp + opp_step, o_lo, o_hi)
        opp_vel = (new_opp - opp) / env.dt
        opp = new_opp

        human_vel = (nxt - human) / env.dt
        human = nxt
        puck, puck_vel = _step_puck(puck.copy(), puck_vel.copy(), env)
        puck, puck_vel = _collide(puck, puck_vel, human, human_vel, env)
        puck, puck_vel = _collide(puck, puck_vel, opp, opp_vel, env)

    return Samples(xs, xr, xh, y, np.full(T, episode_id, dtype=np.int64), np.arange(T, dtype=np.int64))


def draw_profiles(n_users: int, seed: int) -> list[UserProfile]:
    return [UserProfile.sample(np.random.default_rng([seed, uid, 7919])) for uid in range(n_users)]


@dataclass
class GeneratedData:
    meta: MetaDataset
    stats: NormalizationStats
    profiles: list[UserProfile] = field(default_factory=list)


def gen_meta_dataset(
    n_users: int,
    episodes_per_user: int,
    env: EnvConfig,
    seed: int,
    out_dir=None,
    train_users=None,
    csv: bool = False,
) -> GeneratedData:
    """Simulate a multi-user dataset and (optionally) write it to ``out_dir``.

    Stored values are float32, as in the files.  Normalization statistics are
    fitted on ``train_users`` only (all users when omitted).
    """
    if n_users < 2:
        raise ValueError("need at least 2 users")
    profiles = draw_profiles(n_users, seed)
    meta: MetaDataset = {}
    for uid, prof in enumerate(profiles):
        eps = [simulate_episode(prof, env, (seed, uid, ep), episode_id=ep) for ep in range(episodes_per_user)]
        s = Samples.concat(eps)
        # round-trip through float32 so in-memory data equals what a reader sees
        s = Samples(*(getattr(s, f).astype(np.float32).astype(np.float64) for f in ("xs", "xr", "xh", "y")),
                    s.episode, s.timestep, uid)
        meta[uid] = s
    train = list(meta) if train_users is None else list(train_users)
    stats = NormalizationStats.fit(meta[u] for u in train)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for uid, s in meta.items():
            write_user_file(out / user_file_name(uid), s)
            if csv:
                write_user_csv(out / f"user_{uid:03d}.csv", s)
        stats.save(out / "stats.txt")
        (out / "profiles.json").write_text(json.dumps(
            {str(uid): asdict(p) for uid, p in enumerate(profiles)}, indent=2))
        (out / "env.json").write_text(json.dumps(asdict(env), indent=2))
        log.info("wrote %d users to %s", n_users, out)
    return GeneratedData(meta, stats, profiles)


def load_profiles(directory) -> dict[int, UserProfile]:
    raw = json.loads((Path(directory) / "profiles.json").read_text())
    return {int(k): UserProfile(v["compliance"], tuple(v["lateral_bias"]), v["motor_noise"],
                                v["reaction_lag"], v["skill"]) for k, v in raw.items()}
