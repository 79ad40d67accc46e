from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest

from fedslack import cli, runner
from fedslack.aggregation import AggregationMode, AggregationPolicy
from fedslack.attacks import AttackSpec
from fedslack.data import PartitionSpec
from fedslack.errors import ConfigError
from fedslack.local import LocalConfig
from fedslack.runner import (DatasetSpec, ExperimentConfig, config_from_dict,
                             config_to_dict, emit_metrics, load_config, load_metrics,
                             run, sample_participants)


def tiny_config(**kw):
    defaults = dict(
        dataset=DatasetSpec(n_per_class=40, num_classes=5, dim=3, separation=0.8),
        partition=PartitionSpec(5, skew=5.0, seed=0),
        hidden_dims=[8],
        local=LocalConfig(epochs=1, batch_size=16,
                          attack=AttackSpec(0.05, 0.0125, steps=4, random_start=True),
                          lr=0.1),
        policy=AggregationPolicy(AggregationMode.FAT),
        rounds=3,
        eval_every=3,
        seed=0,
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


def test_single_client_identity():
    cfg = tiny_config(partition=PartitionSpec(2, skew=5.0, seed=0),
                      dataset=DatasetSpec(n_per_class=20, num_classes=2, dim=3),
                      rounds=1, participation=0.5)
    art = run(cfg)
    assert len(art.reports) == 1
    # only one participant: aggregate equals its upload, so drift is zero
    assert art.reports[0].mean_drift == 0.0


def test_sfat_alpha_zero_equals_fat_bitwise():
    fat = run(tiny_config())
    sfat = run(tiny_config(policy=AggregationPolicy(AggregationMode.SFAT,
                                                    alpha=0.0, k_hat=1)))
    a = fat.final_model.to_vector().values
    b = sfat.final_model.to_vector().values
    assert np.array_equal(a, b)
    for ra, rb in zip(fat.reports, sfat.reports):
        assert ra.mean_drift == rb.mean_drift


def test_rerun_bit_identical_metrics(tmp_path):
    cfg = tiny_config(policy=AggregationPolicy(AggregationMode.SFAT,
                                               alpha=1 / 6, k_hat=1))
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    run(replace(cfg, out_dir=str(out_a)))
    run(replace(cfg, out_dir=str(out_b)))
    assert (out_a / "metrics.csv").read_text() == (out_b / "metrics.csv").read_text()
    assert (out_a / "checkpoint.bin").read_bytes() == (out_b / "checkpoint.bin").read_bytes()


def test_sample_participants_full():
    assert sample_participants(7, 1.0, 1, 0) == list(range(7))


def test_sample_participants_ratio():
    ids = sample_participants(20, 0.2, 3, 0)
    assert len(ids) == 4
    assert len(set(ids)) == 4
    assert all(0 <= i < 20 for i in ids)


def test_sample_participants_frequency():
    counts = np.zeros(10)
    rounds = 4000
    for t in range(rounds):
        for i in sample_participants(10, 0.3, t, 1):
            counts[i] += 1
    freq = counts / rounds
    assert np.all(np.abs(freq - 0.3) < 0.02)


def test_metrics_roundtrip(tmp_path):
    cfg = tiny_config(policy=AggregationPolicy(AggregationMode.SFAT,
                                               alpha=1 / 6, k_hat=1))
    art = run(cfg)
    emit_metrics(art, tmp_path)
    rows = load_metrics(tmp_path / "metrics.csv")
    agg_rows = [r for r in rows if r["client_id"] == -1]
    assert [r["round"] for r in agg_rows] == [1, 2, 3]
    for rep, row in zip(art.reports, agg_rows):
        assert row["drift"] == rep.mean_drift
        assert row["grad_var"] == rep.grad_variance
        assert row["xi"] == rep.xi
        assert row["alpha"] == rep.alpha
        assert row["nat_acc"] == rep.nat_acc
    client_rows = [r for r in rows if r["round"] == 1 and r["client_id"] >= 0]
    assert len(client_rows) == 5
    for row in client_rows:
        rec = art.reports[0].clients[row["client_id"]]
        assert row["loss_k"] == rec.loss
        assert row["weighted_loss"] == rec.weighted_loss
        assert row["is_top"] == rec.is_top


def test_alpha_schedule_in_reports():
    from fedslack.aggregation import AlphaSchedule
    policy = AggregationPolicy(AggregationMode.SFAT, alpha=1 / 6, k_hat=1,
                               schedule=AlphaSchedule.LINEAR_ANNEAL,
                               alpha_end=0.0, anneal_rounds=3)
    art = run(tiny_config(policy=policy))
    alphas = [r.alpha for r in art.reports]
    assert alphas[0] == pytest.approx(1 / 6)
    assert alphas[-1] == pytest.approx(0.0)
    assert alphas[0] > alphas[1] > alphas[2]


def test_partial_participation_caps_khat():
    cfg = tiny_config(policy=AggregationPolicy(AggregationMode.SFAT,
                                               alpha=1 / 6, k_hat=2),
                      participation=0.6, rounds=2)  # 3 participants -> k_hat 1
    art = run(cfg)
    for rep in art.reports:
        assert len(rep.top_ids) == 1


def test_config_json_roundtrip(tmp_path):
    cfg = tiny_config(policy=AggregationPolicy(AggregationMode.SFAT,
                                               alpha=1 / 6, k_hat=1))
    d = config_to_dict(cfg)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(d))
    loaded = load_config(path)
    assert loaded == cfg


def test_invalid_config_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig(rounds=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(participation=0.0)
    with pytest.raises(ConfigError):
        config_from_dict({"rounds": "not a number"})


def test_fedprox_and_scaffold_optimizers_run():
    for opt in ("fedprox", "scaffold"):
        art = run(tiny_config(optimizer=opt, rounds=2, eval_every=0))
        assert len(art.reports) == 2
        assert np.all(np.isfinite(art.final_model.to_vector().values))


def write_config(tmp_path, **kw):
    cfg = tiny_config(**kw)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config_to_dict(cfg)))
    return path


def test_cli_run_and_trace(tmp_path, capsys):
    path = write_config(tmp_path,
                        policy=AggregationPolicy(AggregationMode.SFAT,
                                                 alpha=1 / 6, k_hat=1))
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(path), "--out", str(out)]) == 0
    assert (out / "metrics.csv").exists()
    assert cli.main(["trace-topk", "--run", str(out)]) == 0
    text = capsys.readouterr().out
    assert "top-set selections" in text


def test_cli_partition_inspect(tmp_path, capsys):
    path = write_config(tmp_path)
    assert cli.main(["partition", "inspect", "--config", str(path)]) == 0
    text = capsys.readouterr().out
    assert "client" in text


def test_cli_eval(tmp_path, capsys):
    path = write_config(tmp_path)
    out = tmp_path / "out"
    cli.main(["run", "--config", str(path), "--out", str(out)])
    # build a small csv test set
    from fedslack.data import make_synthetic
    ds = make_synthetic(10, 5, 3, 0.8, seed=0)
    csv_path = tmp_path / "test.csv"
    lines = ["label," + ",".join(f"f{i}" for i in range(3))]
    for x, y in zip(ds.features, ds.labels):
        lines.append(f"{y}," + ",".join(repr(float(v)) for v in x))
    csv_path.write_text("\n".join(lines) + "\n")
    for attack in ("none", "fgsm", "pgd20"):
        assert cli.main(["eval", "--checkpoint", str(out / "checkpoint.bin"),
                         "--test", str(csv_path), "--attack", attack]) == 0
    assert "accuracy" in capsys.readouterr().out


def test_cli_sweep(tmp_path, capsys):
    path = write_config(tmp_path, rounds=2, eval_every=2,
                        policy=AggregationPolicy(AggregationMode.SFAT,
                                                 alpha=1 / 6, k_hat=1))
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", str(path), "--param", "alpha",
                     "--values", "0.0", "0.2", "--out", str(out)]) == 0
    results = json.loads((out / "sweep.json").read_text())
    assert [r["value"] for r in results] == [0.0, 0.2]


def test_cli_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_CONFIG


def test_cli_unknown_flag_exit_code():
    assert cli.main(["run", "--nope"]) == cli.EXIT_CONFIG


def test_crash_leaves_valid_prefix(tmp_path, monkeypatch):
    # kill the run mid-way: the csv must still parse and contain whole rounds
    cfg = tiny_config(rounds=5, eval_every=0, out_dir=str(tmp_path / "out"))
    calls = {"n": 0}
    orig = runner.slack_aggregate

    def boom(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 3:
            raise KeyboardInterrupt
        return orig(*args, **kwargs)

    monkeypatch.setattr(runner, "slack_aggregate", boom)
    with pytest.raises(KeyboardInterrupt):
        run(cfg)
    rows = load_metrics(tmp_path / "out" / "metrics.csv")
    rounds = {r["round"] for r in rows}
    assert rounds == {1, 2}
    assert all(len([r for r in rows if r["round"] == t]) == 6 for t in rounds)
