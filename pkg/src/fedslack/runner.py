"""End-to-end federated simulation loop: configuration, participation
sampling, per-round training and aggregation, diagnostics, and persistence.

Everything is deterministic given (config, master seed): client streams are
keyed by (seed, purpose, round, client), and aggregation always consumes
updates ordered by client id.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import nn
from .aggregation import (AggregationPolicy,
                          scaffold_server_update, slack_weights, slack_aggregate,
                          sort_by_weighted_loss)
from .attacks import AttackSpec
from .data import (Dataset, PartitionSpec, load_csv,
                   load_idx, make_synthetic, partition, partition_unequal)
from .errors import ConfigError, DivergenceError
from .local import LocalConfig, train_client
from .metrics import (ClientRecord, EvalAttack, RoundReport, client_drift, evaluate,
                      gradient_variance, xi_count)
from .streams import stream

METRICS_COLUMNS = ["round", "client_id", "n_k", "loss_k", "weighted_loss", "drift",
                   "is_top", "alpha", "xi", "grad_var", "nat_acc", "fgsm_acc",
                   "pgd20_acc"]


class FedOptimizer(Enum):
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    SCAFFOLD = "scaffold"


@dataclass
class DatasetSpec:
    """Where the training/test data comes from."""

    kind: str = "synthetic"            # synthetic | csv | idx
    n_per_class: int = 200
    num_classes: int = 5
    dim: int = 4
    separation: float = 0.8
    placement: str = "random"
    test_fraction: float = 0.25
    train_path: str | None = None      # csv path, or idx images path
    train_labels_path: str | None = None
    test_path: str | None = None
    test_labels_path: str | None = None


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionSpec = field(default_factory=lambda: PartitionSpec(5, skew=5.0))
    hidden_dims: list[int] = field(default_factory=lambda: [16])
    local: LocalConfig = field(default_factory=LocalConfig)
    policy: AggregationPolicy = field(default_factory=AggregationPolicy)
    optimizer: FedOptimizer = FedOptimizer.FEDAVG
    rounds: int = 30
    participation: float = 1.0
    eval_every: int = 5
    seed: int = 0
    out_dir: str | None = None
    k_hat_absolute: bool = False       # if set, never shrink k_hat under partial participation

    def __post_init__(self):
        if isinstance(self.optimizer, str):
            self.optimizer = FedOptimizer(self.optimizer.lower())
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError("participation must lie in (0, 1]")
        if max(1, round(self.participation * self.partition.num_clients)) < 1:
            raise ConfigError("participation leaves no clients per round")


@dataclass
class RunArtifact:
    config: ExperimentConfig
    reports: list[RoundReport]
    final_model: nn.Model


def load_config(path) -> ExperimentConfig:
    """Parse a JSON config file into an ExperimentConfig."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    try:
        ds = DatasetSpec(**raw.get("dataset", {}))
        part = PartitionSpec(**raw.get("partition", {"num_clients": 5}))
        attack = AttackSpec(**raw["local"].pop("attack")) if "attack" in raw.get("local", {}) \
            else AttackSpec(8 / 255, 2 / 255, 10, random_start=True)
        local = LocalConfig(attack=attack, **raw.get("local", {}))
        policy = AggregationPolicy(**raw.get("policy", {}))
        top = {k: v for k, v in raw.items()
               if k in ("optimizer", "rounds", "participation", "eval_every", "seed",
                        "out_dir", "k_hat_absolute")}
        return ExperimentConfig(dataset=ds, partition=part,
                                hidden_dims=list(raw.get("hidden_dims", [16])),
                                local=local, policy=policy, **top)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def config_to_dict(config: ExperimentConfig) -> dict:
    d = asdict(config)
    d["partition"]["mode"] = config.partition.mode.value
    d["local"]["trainer"] = config.local.trainer.value
    d["policy"]["mode"] = config.policy.mode.value
    d["policy"]["schedule"] = config.policy.schedule.value
    d["optimizer"] = config.optimizer.value
    return d


def build_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Training set plus a held-out test set the partitioner never touches."""
    ds = config.dataset
    if ds.kind == "synthetic":
        train = make_synthetic(ds.n_per_class, ds.num_classes, ds.dim, ds.separation,
                               seed=config.seed, placement=ds.placement)
        n_test = max(ds.num_classes, int(ds.n_per_class * ds.test_fraction))
        test = make_synthetic(n_test, ds.num_classes, ds.dim, ds.separation,
                              seed=config.seed, noise_seed=config.seed + 1_000_003,
                              placement=ds.placement)
        return train, test
    if ds.kind == "csv":
        if not ds.train_path or not ds.test_path:
            raise ConfigError("csv datasets need train_path and test_path")
        return load_csv(ds.train_path), load_csv(ds.test_path)
    if ds.kind == "idx":
        if not all([ds.train_path, ds.train_labels_path, ds.test_path,
                    ds.test_labels_path]):
            raise ConfigError("idx datasets need train/test image and label paths")
        return (load_idx(ds.train_path, ds.train_labels_path),
                load_idx(ds.test_path, ds.test_labels_path))
    raise ConfigError(f"unknown dataset kind {ds.kind!r}")


def sample_participants(num_clients: int, ratio: float, round_idx: int,
                        seed: int) -> list[int]:
    """Uniform without-replacement draw of max(1, round(ratio*K)) client ids."""
    size = max(1, round(ratio * num_clients))
    if size >= num_clients:
        return list(range(num_clients))
    rng = stream(seed, "participation", round_idx)
    return sorted(rng.choice(num_clients, size=size, replace=False).tolist())


class _MetricsWriter:
    """Appends rows round by round so a killed run leaves a valid CSV prefix."""

    def __init__(self, path: Path):
        self.path = path
        self._file = open(path, "w", newline="")
        self._writer = csv.writer(self._file)
        self._writer.writerow(METRICS_COLUMNS)
        self._file.flush()

    def write_round(self, rep: RoundReport) -> None:
        for row in report_rows(rep):
            self._writer.writerow(row)
        self._file.flush()

    def close(self) -> None:
        self._file.close()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def report_rows(rep: RoundReport) -> list[list[str]]:
    rows = []
    for c in rep.clients:
        rows.append([_fmt(v) for v in
                     [rep.round_idx, c.client_id, c.n_samples, c.loss, c.weighted_loss,
                      c.drift, c.is_top, rep.alpha, None, None, None, None, None]])
    total = sum(c.n_samples for c in rep.clients)
    rows.append([_fmt(v) for v in
                 [rep.round_idx, -1, total, None, None, rep.mean_drift, None, rep.alpha,
                  rep.xi, rep.grad_variance, rep.nat_acc, rep.fgsm_acc, rep.pgd20_acc]])
    return rows


def run(config: ExperimentConfig) -> RunArtifact:
    """Execute the full communication loop and return the artifact."""
    train_set, test_set = build_datasets(config)
    if config.partition.sample_counts is not None:
        shards = partition_unequal(train_set, config.partition)
    else:
        shards = partition(train_set, config.partition)
    shard_by_id = {s.client_id: s for s in shards}

    dims = [train_set.dim] + list(config.hidden_dims) + [train_set.num_classes]
    model = nn.Model.init(dims, stream(config.seed, "init"))
    theta = model.to_vector()

    local_cfg = config.local
    if config.optimizer is FedOptimizer.FEDPROX and local_cfg.fedprox_mu == 0.0:
        local_cfg = replace(local_cfg, fedprox_mu=0.01)
    use_scaffold = config.optimizer is FedOptimizer.SCAFFOLD
    if use_scaffold:
        local_cfg = replace(local_cfg, scaffold=True)
        c_global = theta.zeros_like()
        c_locals = {s.client_id: theta.zeros_like() for s in shards}

    out_dir = Path(config.out_dir) if config.out_dir else None
    writer = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(
            json.dumps(config_to_dict(config), indent=2) + "\n")
        writer = _MetricsWriter(out_dir / "metrics.csv")

    K = config.partition.num_clients
    reports: list[RoundReport] = []
    try:
        for t in range(1, config.rounds + 1):
            t0 = time.perf_counter()
            alpha = config.policy.alpha_at(t)
            participants = sample_participants(K, config.participation, t, config.seed)
            updates = []
            for cid in participants:
                kwargs = {}
                if use_scaffold:
                    kwargs = {"c_global": c_global, "c_local": c_locals[cid]}
                try:
                    updates.append(train_client(shard_by_id[cid], train_set, theta,
                                                local_cfg, config.seed, t, **kwargs))
                except DivergenceError as exc:
                    raise DivergenceError(f"round {t}: {exc}") from exc

            m = len(updates)
            if config.k_hat_absolute:
                k_hat_eff = config.policy.k_hat
            else:
                k_hat_eff = config.policy.effective_k_hat(m)
            policy_eff = replace(config.policy, k_hat=k_hat_eff)

            order = sort_by_weighted_loss(updates)
            sorted_updates = [updates[i] for i in order]
            xi = xi_count(sorted_updates, k_hat_eff) if k_hat_eff else 0
            sw = slack_weights(updates, policy_eff, alpha)
            theta_new = slack_aggregate(updates, policy_eff, alpha)
            if not np.all(np.isfinite(theta_new.values)):
                raise DivergenceError(f"round {t}: non-finite aggregate")

            if use_scaffold:
                deltas = [u.scaffold_delta for u in updates if u.scaffold_delta is not None]
                for u in updates:
                    if u.scaffold_delta is not None:
                        c_locals[u.client_id] = nn.ParamVector(
                            c_locals[u.client_id].values + u.scaffold_delta.values,
                            theta.layout)
                c_global = scaffold_server_update(c_global, deltas, m, K)

            drifts, mean_drift = client_drift([u.params for u in updates], theta_new)
            gvar = gradient_variance([u.params for u in updates], theta) if m >= 2 else 0.0
            theta = theta_new
            model.load_vector(theta)

            top_set = set(sw.top_ids)
            recs = [ClientRecord(u.client_id, u.n_samples, u.loss, u.weighted_loss,
                                 d, u.client_id in top_set)
                    for u, d in zip(updates, drifts)]
            nat = fg = pg = None
            if config.eval_every and (t % config.eval_every == 0 or t == config.rounds):
                spec = local_cfg.attack
                nat = evaluate(model, test_set, EvalAttack.NONE)
                if spec.epsilon > 0:
                    fg = evaluate(model, test_set, EvalAttack.FGSM, spec.evaluation(1))
                    pg = evaluate(model, test_set, EvalAttack.PGD, spec.evaluation(20),
                                  stream(config.seed, "eval-attack", t))
                else:
                    fg = pg = nat
            rep = RoundReport(t, recs, mean_drift, gvar, xi, sw.top_ids, alpha,
                              nat, fg, pg, wall_clock=time.perf_counter() - t0)
            reports.append(rep)
            if writer:
                writer.write_round(rep)
    except DivergenceError:
        if out_dir:
            nn.save_checkpoint(model, out_dir / "checkpoint.bin")
        raise
    finally:
        if writer:
            writer.close()

    if out_dir:
        nn.save_checkpoint(model, out_dir / "checkpoint.bin")
    return RunArtifact(config, reports, model)


def emit_metrics(artifact: RunArtifact, out_dir) -> None:
    """Write metrics.csv, a config snapshot, and the final checkpoint."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(METRICS_COLUMNS)
            for rep in artifact.reports:
                for row in report_rows(rep):
                    w.writerow(row)
        (out / "config.json").write_text(
            json.dumps(config_to_dict(artifact.config), indent=2) + "\n")
        nn.save_checkpoint(artifact.final_model, out / "checkpoint.bin")
    except OSError as exc:
        raise OSError(f"cannot write artifact to {out}: {exc}") from exc


def load_metrics(path) -> list[dict]:
    """Parse metrics.csv back into typed row dicts (round-trip of report_rows)."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRICS_COLUMNS:
            raise ConfigError(f"unexpected metrics header in {path}")
        for raw in reader:
            row = {}
            for key, val in raw.items():
                if val == "":
                    row[key] = None
                elif key in ("round", "client_id", "n_k", "xi"):
                    row[key] = int(val)
                elif key == "is_top":
                    row[key] = val == "1"
                else:
                    row[key] = float(val)
            rows.append(row)
    return rows
