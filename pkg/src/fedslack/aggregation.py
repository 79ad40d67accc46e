"""Server-side aggregation: sample-weighted averaging, ascending sort by
weighted client loss, slack re-weighting of the smallest-loss clients, the
relaxed loss value, and the control-variate server update.

The slack mechanism multiplies the unnormalized per-sample weight of the
top clients by r = (1+alpha)/(1-alpha) and renormalizes over samples, so
the final weights are a convex combination and the top-vs-rest per-sample
ratio is exactly r.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import AggregationError, ShapeError
from .local import ClientUpdate
from .nn import ParamVector


class AggregationMode(Enum):
    FAT = "fat"
    SFAT = "sfat"
    RE_SFAT = "re_sfat"


class AlphaSchedule(Enum):
    CONSTANT = "constant"
    LINEAR_ANNEAL = "linear_anneal"


@dataclass
class AggregationPolicy:
    """Mode, slack coefficient, top-set size, and the alpha schedule."""

    mode: AggregationMode = AggregationMode.FAT
    alpha: float = 0.0
    k_hat: int = 0
    schedule: AlphaSchedule = AlphaSchedule.CONSTANT
    alpha_end: float = 0.0
    anneal_rounds: int = 0

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = AggregationMode(self.mode.lower())
        if isinstance(self.schedule, str):
            self.schedule = AlphaSchedule(self.schedule.lower())
        if not 0.0 <= self.alpha < 1.0:
            raise AggregationError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.k_hat < 0:
            raise AggregationError("k_hat must be non-negative")

    def alpha_at(self, round_idx: int) -> float:
        """Alpha in effect at a (1-based) round under the schedule."""
        if self.schedule is AlphaSchedule.CONSTANT or self.anneal_rounds <= 1:
            return self.alpha
        frac = min(max(round_idx - 1, 0), self.anneal_rounds - 1) / (self.anneal_rounds - 1)
        return self.alpha + frac * (self.alpha_end - self.alpha)

    def effective_k_hat(self, participants: int) -> int:
        """Cap the top-set at half the participating clients, never below 1."""
        if self.k_hat == 0 or participants < 2:
            return 0
        return max(1, min(self.k_hat, participants // 2))


@dataclass
class SlackWeights:
    """Final simplex weights plus the selected top set and the slack ratio."""

    weights: np.ndarray
    top_ids: list[int]
    ratio: float


def _check_updates(updates: list[ClientUpdate]) -> None:
    if not updates:
        raise AggregationError("no client updates to aggregate")
    layout = updates[0].params.layout
    for u in updates[1:]:
        if u.params.layout != layout:
            raise ShapeError(f"client {u.client_id} layout differs")


def fedavg_aggregate(updates: list[ClientUpdate]) -> ParamVector:
    """Sample-weighted mean of the uploaded parameters."""
    _check_updates(updates)
    n = np.array([u.n_samples for u in updates], dtype=np.float64)
    w = n / n.sum()
    stacked = np.stack([u.params.values for u in updates])
    return ParamVector(w @ stacked, updates[0].params.layout)


def sort_by_weighted_loss(updates: list[ClientUpdate]) -> list[int]:
    """Indices into `updates` ascending by (N_k/N)*L_k; ties by client id."""
    for u in updates:
        if not np.isfinite(u.weighted_loss):
            raise AggregationError(f"client {u.client_id} reported a non-finite loss")
    return sorted(range(len(updates)),
                  key=lambda i: (updates[i].weighted_loss, updates[i].client_id))


def slack_weights(updates: list[ClientUpdate], policy: AggregationPolicy,
                  alpha: float | None = None) -> SlackWeights:
    """Per-client aggregation weights for the given policy.

    Top clients (smallest weighted loss for SFAT, largest for RE_SFAT) get
    unnormalized per-sample weight r = (1+alpha)/(1-alpha), everyone else 1;
    final weights are p*N_k normalized over clients.
    """
    _check_updates(updates)
    if alpha is None:
        alpha = policy.alpha
    if not 0.0 <= alpha < 1.0:
        raise AggregationError(f"alpha must lie in [0, 1), got {alpha}")
    m = len(updates)
    if policy.mode is not AggregationMode.FAT and policy.k_hat > m // 2:
        raise AggregationError(
            f"k_hat {policy.k_hat} exceeds half of {m} participating clients")

    n = np.array([u.n_samples for u in updates], dtype=np.float64)
    k_hat = policy.k_hat if policy.mode is not AggregationMode.FAT else 0
    if policy.mode is AggregationMode.FAT or alpha == 0.0 or k_hat == 0:
        return SlackWeights(n / n.sum(), [], 1.0)

    order = sort_by_weighted_loss(updates)
    if policy.mode is AggregationMode.RE_SFAT:
        top = order[-k_hat:]
    else:
        top = order[:k_hat]
    ratio = (1.0 + alpha) / (1.0 - alpha)
    p = np.ones(m)
    p[top] = ratio
    w = p * n
    return SlackWeights(w / w.sum(), [updates[i].client_id for i in top], ratio)


def slack_aggregate(updates: list[ClientUpdate], policy: AggregationPolicy,
                    alpha: float | None = None) -> ParamVector:
    """Convex combination of uploads under the slack weights."""
    sw = slack_weights(updates, policy, alpha)
    stacked = np.stack([u.params.values for u in updates])
    return ParamVector(sw.weights @ stacked, updates[0].params.layout)


def alpha_slack_loss(weighted_losses, alpha: float, k_hat: int) -> float:
    """Relaxed total loss: (1+a)*sum of the k_hat smallest + (1-a)*sum of the rest.

    Always a lower bound on the plain sum; equals it at alpha 0.
    """
    losses = np.asarray(weighted_losses, dtype=np.float64)
    if not 0.0 <= alpha < 1.0:
        raise AggregationError(f"alpha must lie in [0, 1), got {alpha}")
    if k_hat < 0 or k_hat > len(losses) // 2:
        raise AggregationError(
            f"k_hat {k_hat} must lie in [0, {len(losses) // 2}] for {len(losses)} clients")
    s = np.sort(losses)
    return float((1.0 + alpha) * s[:k_hat].sum() + (1.0 - alpha) * s[k_hat:].sum())


def scaffold_server_update(c_global: ParamVector, deltas: list[ParamVector],
                           participants: int, total_clients: int) -> ParamVector:
    """c_global + (M/K) * mean of the participating clients' variate changes."""
    if not deltas:
        return c_global
    for d in deltas:
        if d.layout != c_global.layout:
            raise ShapeError("variate layout differs from server variate")
    mean = np.mean([d.values for d in deltas], axis=0)
    scale = participants / total_clients
    return ParamVector(c_global.values + scale * mean, c_global.layout)
