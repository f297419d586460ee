"""Hybrid-expert adaptor: shared + per-side dedicated expert MLPs combined by
softmax gates, mapping wide knowledge vectors (m) to compact augmented
vectors (q).

Expert ordering inside each side's gate is fixed as shared-first, then
dedicated, and checkpoint names follow that order; reordering would
silently corrupt restored gates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Literal

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Linear, Mlp

Side = Literal["user", "item"]
AdaptorKind = Literal["hein", "moe", "mlp"]


@dataclass(frozen=True)
class HeinConfig:
    input_dim: int
    output_dim: int = 32
    n_shared: int = 2
    n_user: int = 2
    n_item: int = 2
    hidden: tuple[int, ...] = (128, 32)

    def __post_init__(self):
        if min(self.n_shared, self.n_user, self.n_item) < 0:
            raise ConfigError("expert counts must be non-negative")
        if self.n_shared + self.n_user < 1 or self.n_shared + self.n_item < 1:
            raise ConfigError("each side needs at least one reachable expert")
        if not 0 < self.output_dim < self.input_dim:
            raise ConfigError(
                f"output dim {self.output_dim} must be positive and below input dim {self.input_dim}")


class HeinParams:
    """Expert MLPs and the two gate layers; shared experts are the same
    objects on both sides (mutating one is visible to the other)."""

    def __init__(self, config: HeinConfig, shared: list[Mlp], user: list[Mlp],
                 item: list[Mlp], gate_u: Linear, gate_i: Linear):
        self.config = config
        self.shared = shared
        self.user = user
        self.item = item
        self.gate_u = gate_u
        self.gate_i = gate_i

    def experts_for(self, side: Side) -> list[Mlp]:
        dedicated = self.user if side == "user" else self.item
        return [*self.shared, *dedicated]

    def gate_for(self, side: Side) -> Linear:
        return self.gate_u if side == "user" else self.gate_i

    def named_parameters(self) -> Iterator[tuple[str, T.Tensor]]:
        for i, e in enumerate(self.shared):
            yield from e.named_parameters(f"hein.shared.expert{i}")
        for i, e in enumerate(self.user):
            yield from e.named_parameters(f"hein.user.expert{i}")
        for i, e in enumerate(self.item):
            yield from e.named_parameters(f"hein.item.expert{i}")
        yield from self.gate_u.named_parameters("hein.gate.u")
        yield from self.gate_i.named_parameters("hein.gate.i")

    def load(self, values: dict[str, np.ndarray]) -> None:
        for i, e in enumerate(self.shared):
            e.load(values, f"hein.shared.expert{i}")
        for i, e in enumerate(self.user):
            e.load(values, f"hein.user.expert{i}")
        for i, e in enumerate(self.item):
            e.load(values, f"hein.item.expert{i}")
        self.gate_u.load(values, "hein.gate.u")
        self.gate_i.load(values, "hein.gate.i")


def init_hein(config: HeinConfig, seed: int) -> HeinParams:
    """Seeded Xavier-uniform experts (zero biases) and linear gates.

    Experts are drawn before gates so reduced variants (fewer dedicated
    experts) share the same shared-expert weights at the same seed.
    """
    rng = np.random.default_rng(seed)
    make = lambda: Mlp.init(rng, config.input_dim, config.hidden, config.output_dim)
    shared = [make() for _ in range(config.n_shared)]
    user = [make() for _ in range(config.n_user)]
    item = [make() for _ in range(config.n_item)]
    gate_u = Linear.init(rng, config.input_dim, config.n_shared + config.n_user)
    gate_i = Linear.init(rng, config.input_dim, config.n_shared + config.n_item)
    return HeinParams(config, shared, user, item, gate_u, gate_i)


def forward_side(r: T.Tensor, side: Side, params: HeinParams) -> T.Tensor:
    """Gate-weighted expert sum for one side: softmax(g(r)) over that side's
    shared+dedicated experts, each applied to the same input."""
    if r.data.ndim != 2 or r.data.shape[1] != params.config.input_dim:
        raise ShapeError(
            f"adaptor input shape {r.data.shape} vs expected (*, {params.config.input_dim})")
    experts = params.experts_for(side)
    alpha = T.softmax_rowwise(params.gate_for(side)(r))
    out = None
    for k, expert in enumerate(experts):
        weighted = T.scale_rows(expert(r), T.slice_cols(alpha, k, k + 1))
        out = weighted if out is None else T.add(out, weighted)
    return out


def hein_forward(r_u: T.Tensor, r_i: T.Tensor, params: HeinParams) -> tuple[T.Tensor, T.Tensor]:
    """Map user/item knowledge vectors (n, m) to augmented vectors (n, q)."""
    return forward_side(r_u, "user", params), forward_side(r_i, "item", params)


def gate_weights(r: np.ndarray, side: Side, params: HeinParams) -> np.ndarray:
    """Softmax gate activations for inspection/testing, shape (n, n_shared + n_dedicated)."""
    return T.softmax_rowwise(params.gate_for(side)(T.const(r))).data


def adaptor_variant(kind: AdaptorKind, config: HeinConfig, seed: int) -> HeinParams:
    """Build the full adaptor or one of its ablation arms.

    mlp: one shared expert, no dedicated sets (the single-logit gate is the
    constant 1, so the expert output passes through untouched).
    moe: shared pool gated per side, no dedicated sets.
    hein: the full structure as configured.
    """
    if kind == "hein":
        return init_hein(config, seed)
    if kind == "moe":
        reduced = HeinConfig(config.input_dim, config.output_dim,
                             n_shared=max(config.n_shared, 1), n_user=0, n_item=0,
                             hidden=config.hidden)
        return init_hein(reduced, seed)
    if kind == "mlp":
        reduced = HeinConfig(config.input_dim, config.output_dim,
                             n_shared=1, n_user=0, n_item=0, hidden=config.hidden)
        return init_hein(reduced, seed)
    raise ConfigError(f"unknown adaptor kind: {kind!r}")
