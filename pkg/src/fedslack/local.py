"""Per-client local training for one communication round.

A client downloads the global parameters, runs E epochs of minibatch SGD on
adversarial examples (or TRADES / standard batches), and reports its updated
parameters together with the mean loss over the final local epoch.  Optional
proximal and control-variate corrections hook into the gradient before the
SGD step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import nn
from .attacks import AttackSpec, pgd, pgd_kl
from .data import ClientShard, Dataset
from .errors import DivergenceError, ShapeError
from .streams import stream


class Trainer(Enum):
    STANDARD = "standard"
    AT = "at"
    TRADES = "trades"


@dataclass
class LocalConfig:
    """One client's training recipe for a round."""

    epochs: int = 1
    batch_size: int = 32
    trainer: Trainer = Trainer.AT
    trades_beta: float = 6.0
    fedprox_mu: float = 0.0
    scaffold: bool = False
    attack: AttackSpec = field(default_factory=lambda: AttackSpec(8 / 255, 2 / 255, 10,
                                                                 random_start=True))
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if isinstance(self.trainer, str):
            self.trainer = Trainer(self.trainer.lower())
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")


@dataclass
class ClientUpdate:
    """What a client uploads: parameters, sample count, and its recorded loss."""

    client_id: int
    params: nn.ParamVector
    loss: float
    n_samples: int
    total_samples: int
    scaffold_delta: nn.ParamVector | None = None

    @property
    def weighted_loss(self) -> float:
        return self.n_samples / self.total_samples * self.loss


def apply_fedprox(grads: nn.ParamVector, theta_local: nn.ParamVector,
                  theta_global: nn.ParamVector, mu: float) -> nn.ParamVector:
    """Add the proximal pull mu*(theta_local - theta_global) to the gradient."""
    if grads.layout != theta_local.layout or grads.layout != theta_global.layout:
        raise ShapeError("fedprox layouts differ")
    if mu == 0.0:
        return grads
    return nn.ParamVector(grads.values + mu * (theta_local.values - theta_global.values),
                          grads.layout)


def apply_scaffold(grads: nn.ParamVector, c_global: nn.ParamVector,
                   c_local: nn.ParamVector) -> nn.ParamVector:
    """Control-variate corrected gradient: g - c_local + c_global."""
    if grads.layout != c_global.layout or grads.layout != c_local.layout:
        raise ShapeError("scaffold layouts differ")
    return nn.ParamVector(grads.values - c_local.values + c_global.values, grads.layout)


def update_scaffold_client(theta_global: nn.ParamVector, theta_local: nn.ParamVector,
                           n_steps: int, lr: float, c_local: nn.ParamVector,
                           c_global: nn.ParamVector) -> nn.ParamVector:
    """New local variate: c_local - c_global + (theta_global - theta_local)/(steps*lr)."""
    if theta_global.layout != theta_local.layout:
        raise ShapeError("scaffold layouts differ")
    drift = (theta_global.values - theta_local.values) / (n_steps * lr)
    return nn.ParamVector(c_local.values - c_global.values + drift, theta_global.layout)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _train_round(shard: ClientShard, dataset: Dataset, theta_global: nn.ParamVector,
                 config: LocalConfig, master_seed: int, round_idx: int,
                 c_global: nn.ParamVector | None = None,
                 c_local: nn.ParamVector | None = None) -> ClientUpdate:
    if shard.n_samples == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")
    dims = _dims_from_layout(theta_global.layout)
    model = nn.Model.init(dims, stream(0, "scratch"))
    model.load_vector(theta_global)
    state = nn.SgdState(config.lr, config.momentum, config.weight_decay)

    X = dataset.features[shard.indices]
    y = dataset.labels[shard.indices]
    n_steps = 0
    final_losses: list[tuple[float, int]] = []
    for epoch in range(config.epochs):
        batch_rng = stream(master_seed, "batch-order", round_idx, shard.client_id, epoch)
        losses: list[tuple[float, int]] = []
        for b, idx in enumerate(_batches(len(y), config.batch_size, batch_rng)):
            xb, yb = X[idx], y[idx]
            attack_rng = stream(master_seed, "attack", round_idx, shard.client_id,
                                epoch * 100000 + b)
            loss, grads = _batch_objective(model, xb, yb, config, attack_rng)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"client {shard.client_id} diverged at round {round_idx}")
            if config.fedprox_mu > 0.0:
                grads = apply_fedprox(grads, model.to_vector(), theta_global,
                                      config.fedprox_mu)
            if config.scaffold and c_global is not None and c_local is not None:
                grads = apply_scaffold(grads, c_global, c_local)
            nn.sgd_step(model, grads, state)
            n_steps += 1
            losses.append((loss, len(idx)))
        final_losses = losses

    total = sum(n for _, n in final_losses)
    mean_loss = sum(l * n for l, n in final_losses) / total
    theta_local = model.to_vector()
    if not np.all(np.isfinite(theta_local.values)):
        raise DivergenceError(f"client {shard.client_id} produced non-finite parameters")

    delta = None
    if config.scaffold and c_global is not None and c_local is not None:
        c_new = update_scaffold_client(theta_global, theta_local, n_steps, config.lr,
                                       c_local, c_global)
        delta = nn.ParamVector(c_new.values - c_local.values, c_new.layout)
    return ClientUpdate(shard.client_id, theta_local, float(mean_loss),
                        shard.n_samples, len(dataset), scaffold_delta=delta)


def _batch_objective(model: nn.Model, xb: np.ndarray, yb: np.ndarray,
                     config: LocalConfig,
                     rng: np.random.Generator) -> tuple[float, nn.ParamVector]:
    if config.trainer is Trainer.AT and config.attack.epsilon > 0.0:
        x_adv = pgd(model, xb, yb, config.attack, rng)
        loss, grads, _ = nn.batch_loss_and_grads(model, x_adv, yb)
        return loss, grads
    if config.trainer is Trainer.TRADES and config.trades_beta > 0.0:
        return _trades_objective(model, xb, yb, config, rng)
    loss, grads, _ = nn.batch_loss_and_grads(model, xb, yb)
    return loss, grads


def _trades_objective(model: nn.Model, xb: np.ndarray, yb: np.ndarray,
                      config: LocalConfig,
                      rng: np.random.Generator) -> tuple[float, nn.ParamVector]:
    """CE on clean data plus beta * KL(softmax f(x_adv) || softmax f(x))."""
    beta = config.trades_beta
    x_adv = pgd_kl(model, xb, config.attack, rng) if config.attack.epsilon > 0 else xb
    n = len(yb)
    logits_nat, acts_nat = nn._forward_cache(model, xb)
    logits_adv, acts_adv = nn._forward_cache(model, x_adv)
    p = nn.softmax(logits_nat)
    q = nn.softmax(logits_adv)
    s = np.log(np.clip(q, 1e-300, None)) - np.log(np.clip(p, 1e-300, None))
    kl = (q * s).sum(axis=1)
    ce = nn.cross_entropy(logits_nat, yb)
    loss = float(ce.mean() + beta * kl.mean())

    dl_nat = p.copy()
    dl_nat[np.arange(n), yb] -= 1.0
    dl_nat += beta * (p - q)          # KL gradient w.r.t. the natural logits
    dl_nat /= n
    dl_adv = beta * q * (s - kl[:, None]) / n
    g_nat, _ = nn.backprop(model, acts_nat, dl_nat)
    g_adv, _ = nn.backprop(model, acts_adv, dl_adv)
    return loss, g_nat + g_adv


def _dims_from_layout(layout: nn.Layout) -> list[int]:
    dims = [layout[0][1][0]]
    for name, shape in layout:
        if name.endswith(".W"):
            dims.append(shape[1])
    return dims


def train_at(shard: ClientShard, dataset: Dataset, theta_global: nn.ParamVector,
             config: LocalConfig, master_seed: int, round_idx: int = 0,
             c_global: nn.ParamVector | None = None,
             c_local: nn.ParamVector | None = None) -> ClientUpdate:
    """Adversarial training round (PGD examples against the evolving local model)."""
    cfg = config if config.trainer is Trainer.AT else _with_trainer(config, Trainer.AT)
    return _train_round(shard, dataset, theta_global, cfg, master_seed, round_idx,
                        c_global, c_local)


def train_trades(shard: ClientShard, dataset: Dataset, theta_global: nn.ParamVector,
                 config: LocalConfig, master_seed: int, round_idx: int = 0,
                 c_global: nn.ParamVector | None = None,
                 c_local: nn.ParamVector | None = None) -> ClientUpdate:
    """TRADES round: clean CE plus weighted KL to the adversarial distribution."""
    cfg = config if config.trainer is Trainer.TRADES else _with_trainer(config, Trainer.TRADES)
    return _train_round(shard, dataset, theta_global, cfg, master_seed, round_idx,
                        c_global, c_local)


def train_standard(shard: ClientShard, dataset: Dataset, theta_global: nn.ParamVector,
                   config: LocalConfig, master_seed: int, round_idx: int = 0,
                   c_global: nn.ParamVector | None = None,
                   c_local: nn.ParamVector | None = None) -> ClientUpdate:
    """Natural-data round; identical trajectory to train_at with epsilon 0."""
    cfg = config if config.trainer is Trainer.STANDARD else _with_trainer(config, Trainer.STANDARD)
    return _train_round(shard, dataset, theta_global, cfg, master_seed, round_idx,
                        c_global, c_local)


def train_client(shard: ClientShard, dataset: Dataset, theta_global: nn.ParamVector,
                 config: LocalConfig, master_seed: int, round_idx: int = 0,
                 c_global: nn.ParamVector | None = None,
                 c_local: nn.ParamVector | None = None) -> ClientUpdate:
    """Dispatch on the configured trainer mode."""
    return _train_round(shard, dataset, theta_global, config, master_seed, round_idx,
                        c_global, c_local)


def _with_trainer(config: LocalConfig, trainer: Trainer) -> LocalConfig:
    from dataclasses import replace
    return replace(config, trainer=trainer)
