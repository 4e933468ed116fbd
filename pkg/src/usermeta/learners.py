"""Meta-learning procedures and baselines behind one learner interface.

Every learner offers ``meta_step`` (one training update from sampled user
batches) and ``adapt_predict`` (adapt on a support batch, predict a query
batch without touching ``theta``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .autodiff import Adam, Params, Tensor, concat, grad, no_grad
from .data import Samples
from .model import LAST_LAYER, Inputs, ModelConfig, UserModel, group_matrix, prediction_params

log = logging.getLogger(__name__)

KINDS = (
    "proposed",
    "proposed-no-ue-init",
    "proposed-no-bias-reduction",
    "maml",
    "reptile",
    "anil",
    "cavia",
    "supervised-fixed",
    "supervised-finetuned",
    "zero-velocity",
)
EMBEDDING_KINDS = ("proposed", "proposed-no-ue-init", "proposed-no-bias-reduction", "cavia")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class HyperParams:
    alpha: float = 0.05              # embedding inner rate (proposed, CAVIA)
    alpha_param: float = 0.01        # weight inner rate (MAML/ANIL eval, Reptile, fine-tuning)
    alpha_param_train: float = 0.003  # MAML/ANIL inner rate during training
    beta: float = 0.001
    decay: float = 0.8
    lambda1: float = 1.0
    lambda2: float = 0.1
    n_users: int = 5
    batch_size: int = 200
    embed_size: int = 32
    n_adapt: int = 5
    iterations: int = 20000
    seed: int = 0
    hidden: int = 64
    first_order: bool = False
    reptile_outer: str = "interpolate"  # theta += beta * mean(theta_i - theta); "adam" is the alternative
    log_every: int = 100

    def __post_init__(self):
        if self.alpha <= 0 or self.beta < 0 or self.alpha_param <= 0 or self.alpha_param_train <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")
        for name in ("n_users", "batch_size", "embed_size", "n_adapt", "iterations", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.reptile_outer not in ("adam", "interpolate"):
            raise ValueError("reptile_outer must be 'adam' or 'interpolate'")

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyper-parameters: {sorted(unknown)}")
        return cls(**d)

    def to_header(self) -> dict[str, str]:
        return {f"hyper.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_header(cls, header: dict[str, str]) -> "HyperParams":
        kw = {}
        for f in fields(cls):
            raw = header.get(f"hyper.{f.name}")
            if raw is None:
                continue
            t = f.type if isinstance(f.type, str) else f.type.__name__
            kw[f.name] = {"float": float, "int": int, "bool": lambda v: v == "True", "str": str}[t](raw)
        return cls(**kw)


# -- building blocks ---------------------------------------------------------------

def gradient_steps(loss_fn: Callable[[list[Tensor]], Tensor], params: Sequence[Tensor], lr: float,
                   decay: float, steps: int, create_graph: bool) -> list[Tensor]:
    """Plain SGD on ``params`` with the step size multiplied by ``decay`` after each step.

    The returned tensors stay connected to the inputs' graph, so the result is
    differentiable with respect to whatever produced ``params``.  With
    ``create_graph=False`` the inner gradients enter as constants.
    """
    if steps < 1:
        raise ValueError("need at least one adaptation step")
    params = list(params)
    rate = lr
    for _ in range(steps):
        grads = grad(loss_fn(params), params, create_graph=create_graph, allow_unused=True)
        for g in grads:
            if not g.is_finite():
                raise FloatingPointError("non-finite gradient during adaptation")
        params = [p - g * rate for p, g in zip(params, grads)]
        rate *= decay
    return params


def gradient_steps_detached(loss_fn, params: Sequence[Tensor], lr: float, decay: float, steps: int) -> list[Tensor]:
    """Same update as :func:`gradient_steps`, but each iterate is a fresh leaf."""
    params = [Tensor(p.data, requires_grad=True) for p in params]
    rate = lr
    for _ in range(steps):
        grads = grad(loss_fn(params), params, allow_unused=True)
        for g in grads:
            if not g.is_finite():
                raise FloatingPointError("non-finite gradient during adaptation")
        params = [Tensor(p.data - rate * g.data, requires_grad=True) for p, g in zip(params, grads)]
        rate *= decay
    return params


def adapt_ue(model: UserModel, phi0: Tensor, support: Inputs, alpha: float, decay: float, n_adapt: int,
             track: bool, theta: Params | None = None, hidden: Tensor | None = None,
             create_graph: bool = True) -> Tensor:
    """Gradient steps on the user embedding against the support regression loss.

    ``track=True`` keeps the result differentiable w.r.t. ``theta`` and ``phi0``.
    """
    if hidden is None:
        if track:
            hidden = model.trunk(model.features(support, theta), theta)
        else:
            with no_grad():
                hidden = model.trunk(model.features(support, theta), theta)

    def loss_fn(ps):
        return (model.head(hidden, ps[0], theta) - support.y).square().mean()

    if track:
        if not phi0.requires_grad:
            phi0 = Tensor(phi0.data, requires_grad=True)
        (phi,) = gradient_steps(loss_fn, [phi0], alpha, decay, n_adapt, create_graph=create_graph)
        return phi
    (phi,) = gradient_steps_detached(loss_fn, [phi0], alpha, decay, n_adapt)
    return Tensor(phi.data)


class UserRecord(NamedTuple):
    phi: Tensor | None       # initialized embedding (None when there is no init network)
    phi_adapted: Tensor | None
    query_loss: Tensor


def meta_loss_terms(query: Tensor, phi: Tensor | None, phi_adapted: Tensor | None,
                    lambda1: float, lambda2: float) -> tuple[Tensor, dict[str, float]]:
    """Meta-loss from the mean query loss and stacked (K, S) embeddings.

    ``query`` is already averaged over the K users.  The adapted embeddings
    enter the consistency term as constants.
    """
    total = query
    terms = {"query": query.item(), "consistency": 0.0, "bias": 0.0}
    if lambda1 > 0 and phi is not None:
        if phi.shape != phi_adapted.shape:
            raise ValueError(f"phi {phi.shape} and adapted phi {phi_adapted.shape} differ")
        K = phi.shape[0]
        cons = (phi_adapted.detach() - phi).square().sum() * (lambda1 / K)
        total = total + cons
        terms["consistency"] = cons.item()
    if lambda2 > 0 and phi_adapted is not None:
        bias = phi_adapted.mean(axis=0).square().sum() * lambda2
        total = total + bias
        terms["bias"] = bias.item()
    terms["total"] = total.item()
    return total, terms


def meta_loss(records: Sequence[UserRecord], lambda1: float, lambda2: float) -> tuple[Tensor, dict[str, float]]:
    """Mean query loss plus the embedding-consistency and bias-reduction terms."""
    K = len(records)
    if K == 0:
        raise ValueError("meta_loss needs at least one user record")
    query = records[0].query_loss
    for r in records[1:]:
        query = query + r.query_loss
    query = query * (1.0 / K)

    def stack(vectors):
        if any(v is None for v in vectors):
            return None
        lengths = {v.size for v in vectors}
        if len(lengths) != 1:
            raise ValueError("embeddings differ in length")
        return concat([v.reshape(1, v.size) for v in vectors], axis=0)

    return meta_loss_terms(query, stack([r.phi for r in records]), stack([r.phi_adapted for r in records]),
                           lambda1, lambda2)


def _mse(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((pred - y) ** 2))


# -- learners ------------------------------------------------------------------------

class Learner:
    kind: str = ""
    multi_user = False      # K users x B samples per step (else 1 user x K*B)
    trainable = True

    def __init__(self, hyper: HyperParams, model: UserModel | None):
        self.hyper = hyper
        self.model = model
        self.optimizer: Adam | None = None
        if model is not None:
            self.optimizer = Adam(list(model.theta.values()), lr=hyper.beta)

    @property
    def theta(self) -> Params:
        return self.model.theta if self.model is not None else {}

    def meta_step(self, batches: Sequence[tuple[Samples, Samples]]) -> dict[str, float]:
        raise NotImplementedError

    def adapt_predict(self, support: Samples, query: Samples) -> np.ndarray:
        raise NotImplementedError

    def _apply(self, names: Sequence[str], grads: Sequence[Tensor]) -> None:
        for g in grads:
            if not g.is_finite():
                raise TrainingDiverged("non-finite meta-gradient")
        self.optimizer.params = [self.model.theta[n] for n in names]
        self.optimizer.step(grads)

    def snapshot(self) -> dict[str, np.ndarray]:
        return self.model.snapshot() if self.model is not None else {}


class ZeroVelocity(Learner):
    kind = "zero-velocity"
    trainable = False

    def __init__(self, hyper: HyperParams, dims=None):
        super().__init__(hyper, None)

    def meta_step(self, batches):
        return {}

    def adapt_predict(self, support, query):
        return query.xh.copy()


class EmbeddingLearner(Learner):
    """The proposed method, its two ablations, and CAVIA.

    They differ only in embedding initialization (network vs zero), whether
    a meta-update pools several users, and which meta-loss terms are on.
    """

    def __init__(self, kind: str, hyper: HyperParams, cfg: ModelConfig):
        self.kind = kind
        self.use_init = kind in ("proposed", "proposed-no-bias-reduction")
        self.multi_user = kind in ("proposed", "proposed-no-ue-init")
        self.lambda1 = hyper.lambda1 if self.use_init else 0.0
        self.lambda2 = hyper.lambda2 if kind in ("proposed", "proposed-no-ue-init") else 0.0
        cfg = replace(cfg, embed_size=hyper.embed_size, init_network=self.use_init)
        super().__init__(hyper, UserModel(cfg, seed=hyper.seed))
        self.names = list(self.model.theta)

    def initial_embedding(self, support: Inputs, feats=None) -> Tensor:
        if self.use_init:
            return self.model.init_embedding(support, feats=feats)
        return Tensor(np.zeros(self.hyper.embed_size), requires_grad=True)

    def user_record(self, support: Samples, query: Samples) -> UserRecord:
        """Per-user reference path (initialize, adapt, score the query)."""
        h = self.hyper
        S, Q = Inputs.of(support), Inputs.of(query)
        feats = self.model.features(S)
        hidden = self.model.trunk(feats)
        phi0 = self.initial_embedding(S, feats)
        phi = adapt_ue(self.model, phi0, S, h.alpha, h.decay, h.n_adapt, track=True, hidden=hidden,
                       create_graph=not h.first_order)
        q = self.model.regression_loss(Q, phi)
        return UserRecord(phi0 if self.use_init else None, phi, q)

    def _embeddings(self, S: Inputs, K: int, track: bool) -> tuple[Tensor, Tensor]:
        """Initial and adapted (K, S) embeddings for K stacked, equal-sized support groups."""
        h, model = self.hyper, self.model
        B = len(S) // K
        assign = group_matrix(K, B)
        dims = B * model.cfg.dim_h
        if track:
            feats = model.features(S)
            hidden = model.trunk(feats)
            phi0 = (model.init_embeddings(S, K, feats=feats) if self.use_init
                    else Tensor(np.zeros((K, h.embed_size)), requires_grad=True))
        else:
            with no_grad():
                feats = model.features(S)
                hidden = model.trunk(feats)
                phi0 = (model.init_embeddings(S, K, feats=feats) if self.use_init
                        else Tensor(np.zeros((K, h.embed_size))))

        # sum of per-user mean losses: each user's gradient only touches its row
        def loss_fn(ps):
            return (model.head(hidden, assign @ ps[0]) - S.y).square().sum() * (1.0 / dims)

        if track:
            (phi,) = gradient_steps(loss_fn, [phi0], h.alpha, h.decay, h.n_adapt, create_graph=not h.first_order)
        else:
            (phi,) = gradient_steps_detached(loss_fn, [phi0], h.alpha, h.decay, h.n_adapt)
            phi, phi0 = Tensor(phi.data), Tensor(phi0.data)
        return phi0, phi

    def meta_loss_value(self, batches) -> tuple[Tensor, dict[str, float], tuple[Tensor, Tensor]]:
        sizes = {len(s) for s, _ in batches} | {len(q) for _, q in batches}
        if len(sizes) != 1:
            raise ValueError("stacked meta-update needs equal support/query sizes")
        K = len(batches)
        S = Inputs.of(Samples.concat([s for s, _ in batches]))
        Q = Inputs.of(Samples.concat([q for _, q in batches]))
        phi0, phi = self._embeddings(S, K, track=True)
        B = len(Q) // K
        query = (self.model.head(self.model.trunk(self.model.features(Q)), group_matrix(K, B) @ phi)
                 - Q.y).square().mean()
        loss, terms = meta_loss_terms(query, phi0 if self.use_init else None, phi, self.lambda1, self.lambda2)
        return loss, terms, (phi0, phi)

    def meta_step(self, batches):
        loss, terms, _ = self.meta_loss_value(batches)
        if not math.isfinite(terms["total"]):
            raise TrainingDiverged(f"non-finite meta-loss {terms}")
        grads = grad(loss, [self.model.theta[n] for n in self.names])
        self._apply(self.names, grads)
        return terms

    def adapted_embedding(self, support: Samples) -> tuple[Tensor, Tensor]:
        """(initial, adapted) embeddings for a support batch; theta untouched."""
        phi0, phi = self._embeddings(Inputs.of(support), 1, track=False)
        S = self.hyper.embed_size
        return phi0.reshape(S), phi.reshape(S)

    def adapt_predict(self, support, query):
        _, phi = self.adapted_embedding(support)
        with no_grad():
            return self.model.predict(Inputs.of(query), phi).data


class MamlLearner(Learner):
    """MAML (all prediction weights adapted) and ANIL (last layer only)."""

    def __init__(self, kind: str, hyper: HyperParams, cfg: ModelConfig):
        self.kind = kind
        cfg = replace(cfg, embed_size=0, init_network=False)
        super().__init__(hyper, UserModel(cfg, seed=hyper.seed))
        self.names = list(self.model.theta)
        self.fast = list(LAST_LAYER) if kind == "anil" else prediction_params(self.model.theta)

    def _adapt(self, S: Inputs, lr: float, track: bool, create_graph: bool) -> Params:
        model, theta = self.model, self.model.theta
        if self.kind == "anil":
            # body activations do not depend on the adapted layer
            if track:
                pen = model.penultimate(model.trunk(model.features(S)), None)
            else:
                with no_grad():
                    pen = model.penultimate(model.trunk(model.features(S)), None)

            def loss_fn(ps):
                return (model.output(pen, {**theta, **dict(zip(self.fast, ps))}) - S.y).square().mean()
        else:
            def loss_fn(ps):
                return model.regression_loss(S, None, {**theta, **dict(zip(self.fast, ps))})

        start = [theta[n] for n in self.fast]
        if track:
            fast = gradient_steps(loss_fn, start, lr, 1.0, self.hyper.n_adapt, create_graph)
        else:
            fast = gradient_steps_detached(loss_fn, start, lr, 1.0, self.hyper.n_adapt)
        return {**theta, **dict(zip(self.fast, fast))}

    def meta_step(self, batches):
        h = self.hyper
        total = None
        for sup, qry in batches:
            adapted = self._adapt(Inputs.of(sup), h.alpha_param_train, track=True, create_graph=not h.first_order)
            q = self.model.regression_loss(Inputs.of(qry), None, adapted)
            total = q if total is None else total + q
        total = total * (1.0 / len(batches))
        if not total.is_finite():
            raise TrainingDiverged("non-finite meta-loss")
        grads = grad(total, [self.model.theta[n] for n in self.names], allow_unused=True)
        self._apply(self.names, grads)
        return {"query": total.item(), "total": total.item()}

    def adapt_predict(self, support, query):
        adapted = self._adapt(Inputs.of(support), self.hyper.alpha_param, track=False, create_graph=False)
        with no_grad():
            return self.model.predict(Inputs.of(query), None, adapted).data


class ReptileLearner(Learner):
    """First-order Reptile: move theta toward the users' inner-loop solutions."""

    kind = "reptile"
    multi_user = True

    def __init__(self, hyper: HyperParams, cfg: ModelConfig):
        cfg = replace(cfg, embed_size=0, init_network=False)
        super().__init__(hyper, UserModel(cfg, seed=hyper.seed))
        self.names = list(self.model.theta)

    def inner_solution(self, data: Samples) -> list[np.ndarray]:
        X = Inputs.of(data)
        model, theta = self.model, self.model.theta

        def loss_fn(ps):
            return model.regression_loss(X, None, dict(zip(self.names, ps)))

        fast = gradient_steps_detached(loss_fn, [theta[n] for n in self.names], self.hyper.alpha_param,
                                       1.0, self.hyper.n_adapt)
        return [f.data for f in fast]

    def meta_step(self, batches):
        solutions = [self.inner_solution(Samples.concat([s, q])) for s, q in batches]
        current = [self.model.theta[n].data for n in self.names]
        mean_delta = [np.mean([sol[i] for sol in solutions], axis=0) - current[i] for i in range(len(current))]
        if not all(np.all(np.isfinite(d)) for d in mean_delta):
            raise TrainingDiverged("non-finite Reptile update")
        if self.hyper.reptile_outer == "interpolate":
            eps = self.hyper.beta
            for n, d in zip(self.names, mean_delta):
                self.model.theta[n].data = self.model.theta[n].data + eps * d
        else:
            self._apply(self.names, [Tensor(-d) for d in mean_delta])
        with no_grad():
            loss = np.mean([self.model.regression_loss(Inputs.of(q)).item() for _, q in batches])
        return {"query": float(loss), "total": float(loss)}

    def adapt_predict(self, support, query):
        fast = self.inner_solution(support)
        adapted = {n: Tensor(v) for n, v in zip(self.names, fast)}
        with no_grad():
            return self.model.predict(Inputs.of(query), None, adapted).data


class SupervisedLearner(Learner):
    """Plain regression on pooled users; optionally fine-tuned on the support batch."""

    def __init__(self, kind: str, hyper: HyperParams, cfg: ModelConfig):
        self.kind = kind
        cfg = replace(cfg, embed_size=0, init_network=False)
        super().__init__(hyper, UserModel(cfg, seed=hyper.seed))
        self.names = list(self.model.theta)

    def meta_step(self, batches):
        data = Samples.concat([Samples.concat([s, q]) for s, q in batches])
        loss = self.model.regression_loss(Inputs.of(data))
        if not loss.is_finite():
            raise TrainingDiverged("non-finite training loss")
        grads = grad(loss, [self.model.theta[n] for n in self.names])
        self._apply(self.names, grads)
        return {"query": loss.item(), "total": loss.item()}

    def adapt_predict(self, support, query):
        theta = self.model.theta
        if self.kind == "supervised-finetuned":
            S = Inputs.of(support)

            def loss_fn(ps):
                return self.model.regression_loss(S, None, dict(zip(self.names, ps)))

            fast = gradient_steps_detached(loss_fn, [theta[n] for n in self.names], self.hyper.alpha_param,
                                           1.0, self.hyper.n_adapt)
            theta = dict(zip(self.names, fast))
        with no_grad():
            return self.model.predict(Inputs.of(query), None, theta).data


def make_learner(kind: str, hyper: HyperParams, cfg: ModelConfig | None = None) -> Learner:
    cfg = cfg or ModelConfig(hidden=hyper.hidden)
    cfg = replace(cfg, hidden=hyper.hidden)
    if kind in EMBEDDING_KINDS:
        return EmbeddingLearner(kind, hyper, cfg)
    if kind in ("maml", "anil"):
        return MamlLearner(kind, hyper, cfg)
    if kind == "reptile":
        return ReptileLearner(hyper, cfg)
    if kind in ("supervised-fixed", "supervised-finetuned"):
        return SupervisedLearner(kind, hyper, cfg)
    if kind == "zero-velocity":
        return ZeroVelocity(hyper)
    raise ValueError(f"unknown learner kind {kind!r}; expected one of {KINDS}")


def save_learner(learner: Learner, path) -> None:
    from .autodiff import save_tensors

    header = {"kind": learner.kind, **learner.hyper.to_header()}
    if learner.model is not None:
        learner.model.save(path, header)
    else:
        save_tensors(path, {}, header)


def load_learner(path) -> Learner:
    from .autodiff import load_tensors

    arrays, header = load_tensors(path)
    kind = header["kind"]
    hyper = HyperParams.from_header(header)
    cfg = ModelConfig.from_header(header) if "model.hidden" in header else None
    learner = make_learner(kind, hyper, cfg)
    if learner.model is not None:
        if set(arrays) != set(learner.model.theta):
            raise ValueError(f"{path}: parameter names do not match a {kind} model")
        for k, v in arrays.items():
            learner.model.theta[k].data = v
    return learner
