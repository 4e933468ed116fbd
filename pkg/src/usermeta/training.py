"""Training loop and adapt-then-evaluate protocol shared by all learners."""

from __future__ import annotations

import logging
import time
from typing import Mapping

import numpy as np

from .data import MetaDataset, Samples, sample_disjoint, sample_episode_split
from .learners import HyperParams, Learner, TrainingDiverged, make_learner, save_learner
from .model import ModelConfig

log = logging.getLogger(__name__)


def model_config_for(meta: Mapping[int, Samples], hyper: HyperParams) -> ModelConfig:
    ds, dr, dh, _ = next(iter(meta.values())).dims
    return ModelConfig(dim_s=ds, dim_r=dr, dim_h=dh, hidden=hyper.hidden, embed_size=hyper.embed_size)


def sample_batches(learner: Learner, meta: MetaDataset, rng: np.random.Generator) -> list[tuple[Samples, Samples]]:
    """Support/query pairs for one meta-update.

    Multi-user learners get ``n_users`` distinct users with ``batch_size``
    samples each; the others get one user with ``n_users * batch_size``.
    """
    h = learner.hyper
    users = sorted(meta)
    if learner.multi_user:
        chosen = rng.choice(users, size=h.n_users, replace=False)
        return [sample_disjoint(meta[int(u)], h.batch_size, rng) for u in chosen]
    u = int(rng.choice(users))
    return [sample_disjoint(meta[u], h.n_users * h.batch_size, rng)]


def train(kind: str, meta: MetaDataset, hyper: HyperParams, log_path=None, checkpoint_path=None,
          checkpoint_every: int = 0, cfg: ModelConfig | None = None) -> Learner:
    """Run ``hyper.iterations`` meta-updates of ``kind`` on the (normalized) training users."""
    if len(meta) < hyper.n_users:
        raise ValueError(f"need at least {hyper.n_users} training users, got {len(meta)}")
    learner = make_learner(kind, hyper, cfg or model_config_for(meta, hyper))
    if not learner.trainable:
        return learner
    rng = np.random.default_rng([hyper.seed, 1])
    fh = open(log_path, "w") if log_path else None
    t0 = time.perf_counter()
    try:
        for it in range(1, hyper.iterations + 1):
            batches = sample_batches(learner, meta, rng)
            try:
                terms = learner.meta_step(batches)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{kind}: diverged at iteration {it}: {exc}") from exc
            if fh and (it % hyper.log_every == 0 or it == 1 or it == hyper.iterations):
                fh.write(f"iter={it} " + " ".join(f"{k}={v:.6e}" for k, v in terms.items())
                         + f" elapsed={time.perf_counter() - t0:.1f}\n")
                fh.flush()
            if checkpoint_path and checkpoint_every and it % checkpoint_every == 0:
                save_learner(learner, checkpoint_path)
    finally:
        if fh:
            fh.close()
    if checkpoint_path:
        save_learner(learner, checkpoint_path)
    return learner


def adapt_and_evaluate(learner: Learner, user: Samples, batch_size: int, rng: np.random.Generator,
                       episode_split: bool = True) -> float:
    """Adapt on a support batch and return the MSE on a disjoint query batch.

    Raises AssertionError if theta changes, which would mean evaluation leaked
    into training.
    """
    if episode_split:
        support, query = sample_episode_split(user, batch_size, rng)
    else:
        support, query = sample_disjoint(user, batch_size, rng)
    if len(query) == 0:
        raise ValueError("empty query set")
    before = learner.snapshot()
    pred = learner.adapt_predict(support, query)
    after = learner.snapshot()
    for k, v in before.items():
        assert v.tobytes() == after[k].tobytes(), f"evaluation mutated theta[{k}]"
    return float(np.mean((pred - query.y) ** 2))


def evaluate_user(learner: Learner, user: Samples, batch_size: int, draws: int, seed) -> list[float]:
    """``draws`` independent episode-split evaluations; draws depend only on ``seed``."""
    out = []
    for d in range(draws):
        rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), user.user_id, d])
        out.append(adapt_and_evaluate(learner, user, batch_size, rng, episode_split=True))
    return out


def zero_velocity_mse(data: Samples) -> float:
    if len(data) == 0:
        raise ValueError("empty split")
    return float(np.mean((data.xh - data.y) ** 2))
