"""Functional MLP layers over named parameter dictionaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

ACTIVATIONS = ("relu", "tanh", "identity")

Params = dict[str, Tensor]


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input first) with one activation per layer.

    ``final_bias=False`` drops the bias of the last layer.
    """

    widths: tuple[int, ...]
    activations: tuple[str, ...]
    final_bias: bool = True

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must be positive: {self.widths}")
        if len(self.activations) != self.n_layers:
            raise ValueError("need exactly one activation per layer")
        bad = [a for a in self.activations if a not in ACTIVATIONS]
        if bad:
            raise ValueError(f"unknown activations {bad}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @classmethod
    def simple(cls, n_in: int, hidden: int, n_out: int, n_layers: int,
               out_activation: str = "identity", final_bias: bool = True) -> "MlpSpec":
        widths = (n_in,) + (hidden,) * (n_layers - 1) + (n_out,)
        acts = ("relu",) * (n_layers - 1) + (out_activation,)
        return cls(widths, acts, final_bias)


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str) -> Params:
    """Kaiming-style uniform fan-in initialization; biases start at zero."""
    params: Params = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        gain = 2.0 if spec.activations[i] == "relu" else 1.0
        bound = np.sqrt(3.0 * gain / fan_in)
        params[f"{prefix}.{i}.weight"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
        if i < spec.n_layers - 1 or spec.final_bias:
            params[f"{prefix}.{i}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True)
    return params


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    return out if bias is None else out + bias


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return x.relu()
    if kind == "tanh":
        return x.tanh()
    return x


def mlp(params: Params, prefix: str, spec: MlpSpec, x: Tensor) -> Tensor:
    if x.shape[-1] != spec.widths[0]:
        raise ValueError(f"{prefix}: expected input width {spec.widths[0]}, got {x.shape[-1]}")
    for i in range(spec.n_layers):
        x = linear(x, params[f"{prefix}.{i}.weight"], params.get(f"{prefix}.{i}.bias"))
        x = activate(x, spec.activations[i])
    return x
