import csv
import json
import os

import numpy as np
import pytest

from hflsim import cli, config, experiments
from hflsim.config import ConfigError, ExperimentConfig, parse_config, serialize_config, validate


MINI = """
[dataset]
kind = synthetic
classes = 4
dim = 8
samples_per_class = 50
separation = 3.0
seed = 1
test_fraction = 0.2

[partition]
regime = iid
vehicles = 1
seed = 2

[mobility]
edges = 1
speed = 0.0

[hfl]
eta = 0.1
tau_l = 5
tau_e = 10
cloud_epochs = 2
batch_size = 20
seed = 4

[model]
family = multinomial_logistic
l2_reg = 0.01

[output]
directory = {out}
"""

BOUNDS = """
[dataset]
classes = 4
dim = 8

[partition]
regime = edge_noniid
classes_per_unit = 1
vehicles = 32
seed = 2
shared_input = true
shared_samples_per_shard = 40

[mobility]
edges = 4
speed = 0.0

[hfl]
eta = 0.05
tau_l = 6
tau_e = 10
cloud_epochs = 3
seed = 4

[model]
family = quadratic
l2_reg = 0.05

[output]
directory = {out}
"""


def write_cfg(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text.format(out=tmp_path / "out"))
    return str(p)


class TestConfigFormat:
    def test_round_trip_identity(self):
        cfg = parse_config(MINI.format(out="/tmp/x"))
        text = serialize_config(cfg)
        again = parse_config(text)
        assert again == cfg
        assert serialize_config(again) == text

    def test_defaults_round_trip(self):
        cfg = ExperimentConfig()
        assert parse_config(serialize_config(cfg)) == cfg

    def test_all_violations_reported_at_once(self):
        bad = """
[dataset]
classes = 1
separation = -1

[hfl]
eta = 0
tau_l = 0
"""
        cfg = parse_config(bad)
        with pytest.raises(ConfigError) as e:
            validate(cfg)
        msg = str(e.value)
        assert "classes" in msg and "separation" in msg
        assert "eta" in msg and "tau_l" in msg
        assert len(e.value.problems) >= 4

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("[hfl]\nknob = 3\n")
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[wheels]\nn = 4\n")

    def test_type_errors_named(self):
        with pytest.raises(ConfigError, match="eta"):
            parse_config("[hfl]\neta = fast\n")

    def test_cross_section_rules(self):
        cfg = parse_config(MINI.format(out="/tmp/x"))
        cfg.partition.regime = "edge_noniid"
        cfg.partition.vehicles = 6
        cfg.mobility.edges = 4
        with pytest.raises(ConfigError, match="divisible"):
            validate(cfg)


class TestCmdRun:
    def test_smoke_and_outputs(self, tmp_path, capsys):
        path = write_cfg(tmp_path, MINI)
        rc = cli.main(["run", "--config", path])
        assert rc == 0
        out = tmp_path / "out"
        with open(out / "metrics.csv") as f:
            rows = list(csv.reader(f))
        assert len(rows) == 1 + 2 * 10  # header + K*tau_e
        assert rows[0][0] == "cloud_epoch"
        assert (out / "checkpoint.bin").exists()
        printed = capsys.readouterr().out
        assert "cloud epoch 1" in printed and "cloud epoch 2" in printed

    def test_rerun_byte_identical(self, tmp_path):
        path = write_cfg(tmp_path, MINI)
        assert cli.main(["run", "--config", path]) == 0
        first = (tmp_path / "out" / "metrics.csv").read_bytes()
        assert cli.main(["run", "--config", path]) == 0
        assert (tmp_path / "out" / "metrics.csv").read_bytes() == first

    def test_no_temp_files_left(self, tmp_path):
        path = write_cfg(tmp_path, MINI)
        cli.main(["run", "--config", path])
        leftovers = [p for p in (tmp_path / "out").iterdir() if p.suffix == ".tmp"]
        assert leftovers == []

    def test_invalid_config_exit_2(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("[hfl]\neta = -1\n[output]\ndirectory = x\n")
        assert cli.main(["run", "--config", str(p)]) == 2

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_divergence_exit_3(self, tmp_path):
        text = MINI.replace("eta = 0.1", "eta = 1e160")
        text = text.replace("family = multinomial_logistic", "family = quadratic")
        path = write_cfg(tmp_path, text)
        assert cli.main(["run", "--config", path]) == 3

    def test_missing_config_exit_4(self, tmp_path):
        assert cli.main(["run", "--config", str(tmp_path / "nope.cfg")]) == 4


class TestCmdVerifyBounds:
    def test_clean_exit_0(self, tmp_path):
        path = write_cfg(tmp_path, BOUNDS)
        assert cli.main(["verify-bounds", "--config", path]) == 0
        out = tmp_path / "out"
        with open(out / "bound_report.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["k", "U_k", "r_term", "mobility_term",
                           "measured_gap_u_vtilde", "satisfied"]
        assert len(rows) == 1 + 3
        summary = json.loads((out / "bound_summary.json").read_text())
        assert {"beta", "rho", "delta", "epsilon", "phi", "bound",
                "measured_final_gap", "conditions"} <= set(summary)

    def test_corrupted_delta_exit_5(self, tmp_path):
        path = write_cfg(tmp_path, BOUNDS)
        rc = cli.main(["verify-bounds", "--config", path,
                       "--debug-scale-delta", "0.5"])
        assert rc == 5

    def test_nonconvex_exit_2(self, tmp_path):
        text = BOUNDS.replace("family = quadratic", "family = mlp1")
        text = text.replace("l2_reg = 0.05", "l2_reg = 0.0\nhidden_width = 4")
        text = text.replace("shared_input = true", "shared_input = false")
        path = write_cfg(tmp_path, text)
        assert cli.main(["verify-bounds", "--config", path]) == 2

    def test_homogeneous_holds(self, tmp_path):
        # iid split of one dataset: near-zero heterogeneity, all bounds hold
        text = BOUNDS.replace("shared_input = true", "shared_input = false")
        text = text.replace("regime = edge_noniid", "regime = iid")
        text = text.replace("eta = 0.05", "eta = 0.1")
        path = write_cfg(tmp_path, text)
        assert cli.main(["verify-bounds", "--config", path]) == 0


class TestCmdPartitionReport:
    def test_edge_noniid_two_labels_per_edge(self, tmp_path):
        text = BOUNDS.replace("classes_per_unit = 1", "classes_per_unit = 2")
        text = text.replace("classes = 4", "classes = 8")
        text = text.replace("shared_input = true", "shared_input = false")
        path = write_cfg(tmp_path, text)
        assert cli.main(["partition-report", "--config", path, "--rounds", "5"]) == 0
        with open(tmp_path / "out" / "partition.csv") as f:
            rows = list(csv.reader(f))[1:]
        per_edge = {}
        for vid, eid, size, hist in rows:
            labels = {i for i, c in enumerate(hist.split(";")) if int(c) > 0}
            per_edge.setdefault(eid, set()).update(labels)
        assert all(len(v) == 2 for v in per_edge.values())

    def test_static_trace_constant_edges(self, tmp_path):
        path = write_cfg(tmp_path, BOUNDS)
        assert cli.main(["partition-report", "--config", path, "--rounds", "6"]) == 0
        with open(tmp_path / "out" / "mobility_trace.csv") as f:
            rows = list(csv.reader(f))[1:]
        per_vehicle = {}
        for t, vid, pos, eid in rows:
            per_vehicle.setdefault(vid, set()).add(eid)
        assert all(len(v) == 1 for v in per_vehicle.values())

    def test_moving_trace_kinematics(self, tmp_path):
        text = BOUNDS.replace("speed = 0.0", "speed = 30.0")
        path = write_cfg(tmp_path, text)
        assert cli.main(["partition-report", "--config", path, "--rounds", "10"]) == 0
        with open(tmp_path / "out" / "mobility_trace.csv") as f:
            rows = list(csv.reader(f))[1:]
        per_vehicle = {}
        for t, vid, pos, eid in rows:
            per_vehicle.setdefault(vid, []).append((float(t), float(pos)))
        perimeter = 4000.0
        for track in per_vehicle.values():
            track.sort()
            for (t0, p0), (t1, p1) in zip(track, track[1:]):
                moved = min(abs(p1 - p0), perimeter - abs(p1 - p0))
                assert moved <= 30.0 * (t1 - t0) + 1e-9


class TestCmdSweep:
    def test_degenerate_single_cell_matches_run(self, tmp_path):
        text = MINI.replace("vehicles = 1", "vehicles = 8")
        path = write_cfg(tmp_path, text)
        rc = cli.main(["sweep-speed", "--config", path, "--speeds", "0",
                       "--seeds", "3"])
        assert rc == 0
        with open(tmp_path / "out" / "sweep.csv") as f:
            rows = list(csv.reader(f))
        assert len(rows) == 2
        cfg = config.load_config(path)
        inst = experiments.build_instance(cfg, speed=0.0, mobility_seed=3)
        res = experiments.run_instance(inst)
        best = max(r.test_accuracy for r in res.metrics)
        assert float(rows[1][2]) == pytest.approx(best, abs=1e-12)

    def test_manifest_written(self, tmp_path):
        text = MINI.replace("vehicles = 1", "vehicles = 8")
        path = write_cfg(tmp_path, text)
        assert cli.main(["sweep-speed", "--config", path, "--speeds", "0,30",
                         "--seeds", "1"]) == 0
        manifest = json.loads((tmp_path / "out" / "sweep_manifest.json").read_text())
        assert len(manifest["completed"]) == 2
        assert "ceiling" in manifest
        with open(tmp_path / "out" / "sweep_summary.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["speed", "mean_max_accuracy", "std_max_accuracy"]
        assert len(rows) == 3

    def test_seed_override_flag(self, tmp_path):
        path = write_cfg(tmp_path, MINI)
        assert cli.main(["run", "--config", path, "--seed", "99"]) == 0
        first = (tmp_path / "out" / "metrics.csv").read_bytes()
        assert cli.main(["run", "--config", path]) == 0
        assert (tmp_path / "out" / "metrics.csv").read_bytes() != first
