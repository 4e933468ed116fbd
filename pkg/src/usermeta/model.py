"""Prediction network and UE-initialization network.

All trainable weights live in one flat dict ``theta``; every function here is
functional in ``theta`` so adapted copies (MAML-style) can be swapped in.

Prediction path::

    x_s -> ext_s --+
    x_r -> ext_r --+-> concat -> int0 -> concat(., phi) -> int1 -> int2 -> y_hat
    x_h -> ext_h --+

Initialization path (per support pair)::

    [ext_s(x_s), ext_r(x_r), ext_h(x_h), ext_h(y)] -> ue_enc  -> candidate (S)
                                                   -> w_enc   -> logit
    phi = softmax(logits) @ candidates
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .autodiff import MlpSpec, Params, Tensor, concat, init_mlp, linear, load_tensors, mlp, save_tensors
from .data import Samples


@dataclass(frozen=True)
class ModelConfig:
    dim_s: int = 12
    dim_r: int = 2
    dim_h: int = 2
    hidden: int = 64
    embed_size: int = 32
    init_network: bool = True
    extractor_layers: int = 2
    encoder_layers: int = 3

    def __post_init__(self):
        if min(self.dim_s, self.dim_r, self.dim_h, self.hidden) < 1:
            raise ValueError("dimensions must be positive")
        if self.embed_size < 0:
            raise ValueError("embed_size must be >= 0")
        if self.init_network and self.embed_size == 0:
            raise ValueError("the initialization network needs embed_size > 0")

    def to_header(self) -> dict[str, str]:
        return {f"model.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_header(cls, header: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            raw = header.get(f"model.{f.name}")
            if raw is None:
                continue
            kw[f.name] = raw == "True" if f.type in (bool, "bool") else int(raw)
        return cls(**kw)

    # layer specs
    def extractor(self, n_in: int) -> MlpSpec:
        return MlpSpec.simple(n_in, self.hidden, self.hidden, self.extractor_layers, out_activation="relu")

    def ue_encoder(self) -> MlpSpec:
        return MlpSpec.simple(4 * self.hidden, self.hidden, self.embed_size, self.encoder_layers, final_bias=False)

    def weight_encoder(self) -> MlpSpec:
        return MlpSpec.simple(4 * self.hidden, self.hidden, 1, self.encoder_layers)


class Inputs(NamedTuple):
    xs: Tensor
    xr: Tensor
    xh: Tensor
    y: Tensor

    @classmethod
    def of(cls, s: Samples) -> "Inputs":
        return cls(Tensor(s.xs), Tensor(s.xr), Tensor(s.xh), Tensor(s.y))

    def __len__(self) -> int:
        return self.xs.shape[0]


def _linear_init(rng, n_in, n_out, relu: bool) -> tuple[Tensor, Tensor]:
    bound = np.sqrt((6.0 if relu else 3.0) / n_in)
    return (Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True),
            Tensor(np.zeros(n_out), requires_grad=True))


def init_theta(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    theta: Params = {}
    theta.update(init_mlp(cfg.extractor(cfg.dim_s), rng, "ext_s"))
    theta.update(init_mlp(cfg.extractor(cfg.dim_r), rng, "ext_r"))
    theta.update(init_mlp(cfg.extractor(cfg.dim_h), rng, "ext_h"))
    h, S = cfg.hidden, cfg.embed_size
    theta["int0.weight"], theta["int0.bias"] = _linear_init(rng, 3 * h, h, True)
    theta["int1.weight"], theta["int1.bias"] = _linear_init(rng, h + S, h, True)
    theta["int2.weight"], theta["int2.bias"] = _linear_init(rng, h, cfg.dim_h, False)
    if cfg.init_network:
        theta.update(init_mlp(cfg.ue_encoder(), rng, "ue_enc"))
        theta.update(init_mlp(cfg.weight_encoder(), rng, "w_enc"))
    return theta


PREDICTION_PREFIXES = ("ext_s.", "ext_r.", "ext_h.", "int0.", "int1.", "int2.")
LAST_LAYER = ("int2.weight", "int2.bias")


def prediction_params(theta: Params) -> list[str]:
    return [k for k in theta if k.startswith(PREDICTION_PREFIXES)]


class UserModel:
    """Architecture config plus the shared parameters ``theta``."""

    def __init__(self, cfg: ModelConfig, theta: Params | None = None, seed: int = 0):
        self.cfg = cfg
        self.theta = theta if theta is not None else init_theta(cfg, np.random.default_rng(seed))

    # -- prediction network -------------------------------------------------
    def features(self, x: Inputs, theta: Params | None = None) -> tuple[Tensor, Tensor, Tensor]:
        th = self.theta if theta is None else theta
        cfg = self.cfg
        if x.xs.shape[1] != cfg.dim_s or x.xr.shape[1] != cfg.dim_r or x.xh.shape[1] != cfg.dim_h:
            raise ValueError(
                f"input dims ({x.xs.shape[1]}, {x.xr.shape[1]}, {x.xh.shape[1]}) do not match "
                f"model ({cfg.dim_s}, {cfg.dim_r}, {cfg.dim_h})")
        return (mlp(th, "ext_s", cfg.extractor(cfg.dim_s), x.xs),
                mlp(th, "ext_r", cfg.extractor(cfg.dim_r), x.xr),
                mlp(th, "ext_h", cfg.extractor(cfg.dim_h), x.xh))

    def trunk(self, feats, theta: Params | None = None) -> Tensor:
        """First integrating layer; does not depend on phi."""
        th = self.theta if theta is None else theta
        return linear(concat(list(feats), axis=1), th["int0.weight"], th["int0.bias"]).relu()

    def head(self, hidden: Tensor, phi: Tensor | None, theta: Params | None = None) -> Tensor:
        return self.output(self.penultimate(hidden, phi, theta), theta)

    def penultimate(self, hidden: Tensor, phi: Tensor | None, theta: Params | None = None) -> Tensor:
        """Activations entering the last layer (everything ANIL keeps fixed).

        ``phi`` is either one embedding of shape (S,) shared by all rows or a
        per-row matrix of shape (N, S).
        """
        th = self.theta if theta is None else theta
        S = self.cfg.embed_size
        if S:
            if phi is None:
                raise ValueError("this model is conditioned on a user embedding")
            if phi.shape == (S,):
                phi = phi.reshape(1, S).broadcast_to((hidden.shape[0], S))
            elif phi.shape != (hidden.shape[0], S):
                raise ValueError(f"phi must have shape ({S},) or ({hidden.shape[0]}, {S}), got {phi.shape}")
            hidden = concat([hidden, phi], axis=1)
        return linear(hidden, th["int1.weight"], th["int1.bias"]).relu()

    def output(self, pen: Tensor, theta: Params | None = None) -> Tensor:
        th = self.theta if theta is None else theta
        return linear(pen, th["int2.weight"], th["int2.bias"])

    def predict(self, x: Inputs, phi: Tensor | None = None, theta: Params | None = None) -> Tensor:
        return self.head(self.trunk(self.features(x, theta), theta), phi, theta)

    # -- initialization network ---------------------------------------------------
    def candidates_and_logits(self, support: Inputs, theta: Params | None = None,
                              feats=None) -> tuple[Tensor, Tensor]:
        th = self.theta if theta is None else theta
        cfg = self.cfg
        if not cfg.init_network:
            raise ValueError("model has no initialization network")
        fs, fr, fh = feats if feats is not None else self.features(support, th)
        fy = mlp(th, "ext_h", cfg.extractor(cfg.dim_h), support.y)
        pair = concat([fs, fr, fh, fy], axis=1)
        return mlp(th, "ue_enc", cfg.ue_encoder(), pair), mlp(th, "w_enc", cfg.weight_encoder(), pair)

    def init_embedding(self, support: Inputs, theta: Params | None = None, feats=None) -> Tensor:
        if len(support) == 0:
            raise ValueError("empty support set")
        cand, logits = self.candidates_and_logits(support, theta, feats)
        weights = logits.softmax(axis=0)  # (B, 1)
        return (weights.T @ cand).reshape(self.cfg.embed_size)

    def init_embeddings(self, support: Inputs, n_groups: int, theta: Params | None = None, feats=None) -> Tensor:
        """One embedding per contiguous, equal-sized group of support rows -> (K, S)."""
        n = len(support)
        if n == 0 or n % n_groups:
            raise ValueError(f"{n} support rows cannot form {n_groups} equal groups")
        B = n // n_groups
        cand, logits = self.candidates_and_logits(support, theta, feats)
        weights = logits.reshape(n_groups, B).softmax(axis=1).reshape(n, 1)
        return group_matrix(n_groups, B).T @ (cand * weights)

    def zero_embedding(self) -> Tensor:
        return Tensor(np.zeros(self.cfg.embed_size))

    # -- loss ---------------------------------------------------------------------
    def regression_loss(self, batch: Inputs, phi: Tensor | None = None, theta: Params | None = None) -> Tensor:
        if len(batch) == 0:
            raise ValueError("empty batch")
        return (self.predict(batch, phi, theta) - batch.y).square().mean()

    # -- persistence ----------------------------------------------------------------
    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.theta.items()}

    def save(self, path, extra: dict[str, object] | None = None) -> None:
        save_tensors(path, self.theta, {**self.cfg.to_header(), **(extra or {})})

    @classmethod
    def load(cls, path) -> tuple["UserModel", dict[str, str]]:
        arrays, header = load_tensors(path)
        cfg = ModelConfig.from_header(header)
        theta = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(cfg, theta), header


def group_matrix(n_groups: int, rows_per_group: int) -> Tensor:
    """One-hot (K*B, K) matrix mapping each row to its group."""
    return Tensor(np.kron(np.eye(n_groups), np.ones((rows_per_group, 1))))


def head_loss(model: UserModel, hidden: Tensor, y: Tensor, phi: Tensor | None, theta: Params | None = None) -> Tensor:
    """Regression loss from precomputed trunk activations."""
    return (model.head(hidden, phi, theta) - y).square().mean()
