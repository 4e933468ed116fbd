"""Interaction samples, per-user binary files, normalization and batch sampling."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

log = logging.getLogger(__name__)

FILE_MAGIC = b"PHRI"
_HEADER = struct.Struct("<4s6I")
STD_FLOOR = 1e-8


@dataclass
class Samples:
    """A column-oriented block of interaction samples (one user, or a batch)."""

    xs: np.ndarray
    xr: np.ndarray
    xh: np.ndarray
    y: np.ndarray
    episode: np.ndarray
    timestep: np.ndarray
    user_id: int = -1

    def __post_init__(self):
        n = len(self.xs)
        for name in ("xr", "xh", "y", "episode", "timestep"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")
        if self.xh.shape[1:] != self.y.shape[1:]:
            raise ValueError("x_h and y must share dimensionality")

    def __len__(self) -> int:
        return len(self.xs)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.xs.shape[1], self.xr.shape[1], self.xh.shape[1], self.y.shape[1]

    @property
    def episodes(self) -> np.ndarray:
        return np.unique(self.episode)

    def take(self, idx) -> "Samples":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        return Samples(self.xs[idx], self.xr[idx], self.xh[idx], self.y[idx],
                       self.episode[idx], self.timestep[idx], self.user_id)

    def in_episodes(self, episodes: Iterable[int]) -> np.ndarray:
        return np.flatnonzero(np.isin(self.episode, np.asarray(list(episodes))))

    @classmethod
    def concat(cls, parts: list["Samples"]) -> "Samples":
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("xs", "xr", "xh", "y", "episode", "timestep")), user_id=parts[0].user_id)


MetaDataset = dict[int, Samples]


# -- files ----------------------------------------------------------------------

def _record_dtype(ds: int, dr: int, dh: int, dy: int) -> np.dtype:
    return np.dtype([("xs", "<f4", (ds,)), ("xr", "<f4", (dr,)), ("xh", "<f4", (dh,)),
                     ("y", "<f4", (dy,)), ("episode", "<i4"), ("timestep", "<i4")])


def write_user_file(path, samples: Samples) -> None:
    ds, dr, dh, dy = samples.dims
    rec = np.empty(len(samples), dtype=_record_dtype(ds, dr, dh, dy))
    rec["xs"], rec["xr"], rec["xh"], rec["y"] = samples.xs, samples.xr, samples.xh, samples.y
    rec["episode"], rec["timestep"] = samples.episode, samples.timestep
    header = _HEADER.pack(FILE_MAGIC, ds, dr, dh, dy, len(samples), len(samples.episodes))
    Path(path).write_bytes(header + rec.tobytes())


def read_user_file(path, user_id: int = -1) -> Samples:
    buf = Path(path).read_bytes()
    magic, ds, dr, dh, dy, n, _n_episodes = _HEADER.unpack_from(buf)
    if magic != FILE_MAGIC:
        raise ValueError(f"{path}: not a user data file")
    rec = np.frombuffer(buf, dtype=_record_dtype(ds, dr, dh, dy), count=n, offset=_HEADER.size)
    return Samples(rec["xs"].astype(np.float64), rec["xr"].astype(np.float64),
                   rec["xh"].astype(np.float64), rec["y"].astype(np.float64),
                   rec["episode"].astype(np.int64), rec["timestep"].astype(np.int64), user_id)


def write_user_csv(path, samples: Samples) -> None:
    ds, dr, dh, dy = samples.dims
    cols = ([f"xs{i}" for i in range(ds)] + [f"xr{i}" for i in range(dr)]
            + [f"xh{i}" for i in range(dh)] + [f"y{i}" for i in range(dy)] + ["episode", "timestep"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in range(len(samples)):
            w.writerow([*(f"{v:.8g}" for v in np.concatenate(
                [samples.xs[i], samples.xr[i], samples.xh[i], samples.y[i]])),
                int(samples.episode[i]), int(samples.timestep[i])])


def user_file_name(user_id: int) -> str:
    return f"user_{user_id:03d}.bin"


def load_meta_dataset(directory) -> MetaDataset:
    directory = Path(directory)
    out: MetaDataset = {}
    for path in sorted(directory.glob("user_*.bin")):
        uid = int(path.stem.split("_")[1])
        out[uid] = read_user_file(path, uid)
    if not out:
        raise FileNotFoundError(f"no user_*.bin files in {directory}")
    return out


# -- normalization ---------------------------------------------------------------

@dataclass
class NormalizationStats:
    """Per-dimension mean/std for x_s, x_r and the shared x_h/y format.

    The x_h/y statistics are estimated from y.
    """

    mean_s: np.ndarray
    std_s: np.ndarray
    mean_r: np.ndarray
    std_r: np.ndarray
    mean_h: np.ndarray
    std_h: np.ndarray

    @classmethod
    def fit(cls, datasets: Iterable[Samples]) -> "NormalizationStats":
        pooled = Samples.concat(list(datasets))

        def ms(a):
            return a.mean(axis=0), np.maximum(a.std(axis=0), STD_FLOOR)

        return cls(*ms(pooled.xs), *ms(pooled.xr), *ms(pooled.y))

    @classmethod
    def identity(cls, dims: tuple[int, int, int, int]) -> "NormalizationStats":
        ds, dr, dh, _ = dims
        return cls(np.zeros(ds), np.ones(ds), np.zeros(dr), np.ones(dr), np.zeros(dh), np.ones(dh))

    def normalize(self, s: Samples) -> Samples:
        return Samples((s.xs - self.mean_s) / self.std_s, (s.xr - self.mean_r) / self.std_r,
                       (s.xh - self.mean_h) / self.std_h, (s.y - self.mean_h) / self.std_h,
                       s.episode, s.timestep, s.user_id)

    def denormalize(self, s: Samples) -> Samples:
        return Samples(s.xs * self.std_s + self.mean_s, s.xr * self.std_r + self.mean_r,
                       s.xh * self.std_h + self.mean_h, s.y * self.std_h + self.mean_h,
                       s.episode, s.timestep, s.user_id)

    def save(self, path) -> None:
        lines = []
        for name in ("mean_s", "std_s", "mean_r", "std_r", "mean_h", "std_h"):
            lines.append(f"{name}=" + ",".join(repr(float(v)) for v in getattr(self, name)))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        vals = {}
        for line in Path(path).read_text().splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                vals[k.strip()] = np.array([float(x) for x in v.split(",")])
        return cls(**vals)


def normalize_meta(meta: Mapping[int, Samples], stats: NormalizationStats) -> MetaDataset:
    return {uid: stats.normalize(s) for uid, s in meta.items()}


# -- sampling --------------------------------------------------------------------

def sample_disjoint(samples: Samples, batch: int, rng: np.random.Generator) -> tuple[Samples, Samples]:
    """Support and query of ``batch`` samples each, with no shared rows.

    Falls back to sampling with replacement when the user has fewer than
    ``2 * batch`` samples.
    """
    n = len(samples)
    if n == 0:
        raise ValueError("cannot sample from an empty dataset")
    if n >= 2 * batch:
        idx = rng.choice(n, size=2 * batch, replace=False)
        return samples.take(idx[:batch]), samples.take(idx[batch:])
    log.warning("user %d has %d samples < 2B=%d; sampling with replacement", samples.user_id, n, 2 * batch)
    half = rng.permutation(n)
    cut = max(1, n // 2)
    sup, qry = half[:cut], half[cut:] if n > 1 else half[:cut]
    return (samples.take(rng.choice(sup, size=batch, replace=True)),
            samples.take(rng.choice(qry, size=batch, replace=True)))


def split_episodes(samples: Samples, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Partition the user's episode ids into two non-empty disjoint sets."""
    eps = samples.episodes
    if len(eps) < 2:
        raise ValueError(f"user {samples.user_id} has {len(eps)} episode(s); episode split needs >= 2")
    perm = rng.permutation(eps)
    cut = len(eps) // 2
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def sample_episode_split(samples: Samples, batch: int, rng: np.random.Generator) -> tuple[Samples, Samples]:
    """Support and query drawn from disjoint episode sets."""
    sup_eps, qry_eps = split_episodes(samples, rng)
    sup_idx = samples.in_episodes(sup_eps)
    qry_idx = samples.in_episodes(qry_eps)
    if len(qry_idx) == 0:
        raise ValueError("empty query set")
    sup = rng.choice(sup_idx, size=batch, replace=len(sup_idx) < batch)
    qry = rng.choice(qry_idx, size=batch, replace=len(qry_idx) < batch)
    support, query = samples.take(sup), samples.take(qry)
    assert not set(support.episode.tolist()) & set(query.episode.tolist()), "episode leakage"
    return support, query
