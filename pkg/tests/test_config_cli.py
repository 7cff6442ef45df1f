import json

import numpy as np
import pytest

from fedcorr import cli
from fedcorr.config import ExperimentConfig, apply_overrides, config_from_dict, load_config
from fedcorr.datagen import generate_blobs
from fedcorr.errors import ConfigError, ParameterError
from fedcorr.io import export_csv, ingest_csv

QUICK = ["--n-clients", "10", "--samples-per-client", "30", "--n-test", "50", "--t1", "2",
         "--t2", "3", "--t3", "3", "--fraction", "0.2", "--hidden", "8", "--local-epochs", "1"]


class TestConfig:
    def test_empty_file_defaults(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("  \n")
        cfg = load_config(p)
        assert cfg == ExperimentConfig()
        assert (cfg.theta, cfg.pi, cfg.kappa, cfg.prox_beta, cfg.mixup_alpha, cfg.lid_k, cfg.t1) == (
            0.5, 0.5, 0.1, 5.0, 1.0, 20, 5)
        assert (cfg.learning_rate, cfg.momentum, cfg.batch_size, cfg.local_epochs) == (0.03, 0.5, 10, 5)

    def test_range_error_names_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"rho": 1.5}')
        with pytest.raises(ConfigError, match="rho") as exc:
            load_config(p)
        assert exc.value.key == "rho"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="foo"):
            config_from_dict({"foo": 1})

    def test_missing_and_unparsable(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.json")
        p = tmp_path / "bad.json"
        p.write_text("{rho: 1")
        with pytest.raises(ConfigError, match="cannot parse"):
            load_config(p)

    @pytest.mark.parametrize("data,key", [
        ({"n_clients": 0}, "n_clients"), ({"fraction": 0.01}, "fraction"), ({"mode": "x"}, "mode"),
        ({"tau": 1.0}, "tau"), ({"seed": 1.5}, "seed"), ({"no_mixup": 1}, "no_mixup"),
        ({"dataset": "csv"}, "csv_path"), ({"model": None}, "model"),
    ])
    def test_validation(self, data, key):
        with pytest.raises(ConfigError) as exc:
            config_from_dict(data)
        assert exc.value.key == key

    def test_meta_ignored_and_hash_stable(self):
        cfg = config_from_dict({"seed": 4, "_meta": {"anything": 1}})
        assert cfg.seed == 4
        assert cfg.config_hash() == ExperimentConfig(seed=4).config_hash()
        assert cfg.config_hash() != ExperimentConfig(seed=5).config_hash()
        assert cfg.config_hash() == apply_overrides(cfg, {"output_dir": "elsewhere"}).config_hash()


class TestCsv:
    def test_three_rows(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("label,a,b\n0,1.5,2\n1,3,4\n0,-1,0.25\n")
        ds = ingest_csv(p, 2)
        assert len(ds) == 3 and ds.dim == 2
        assert ds.features.tolist() == [[1.5, 2.0], [3.0, 4.0], [-1.0, 0.25]]
        assert ds.true_labels.tolist() == [0, 1, 0] and np.array_equal(ds.given_labels, ds.true_labels)

    @pytest.mark.parametrize("text,msg", [
        ("0,1\n2,1\n", "outside"), ("0,1,2\n1,3\n", "cells"), ("0,1\n1,x\n", "non-numeric"), ("", "no data"),
    ])
    def test_errors(self, tmp_path, text, msg):
        p = tmp_path / "d.csv"
        p.write_text(text)
        with pytest.raises(ParameterError, match=msg):
            ingest_csv(p, 2)

    @pytest.mark.parametrize("header", [True, False])
    def test_round_trip(self, tmp_path, header):
        ds = generate_blobs(40, 3, 4, seed=1)
        p = tmp_path / "d.csv"
        export_csv(ds, p, header=header)
        back = ingest_csv(p, 3)
        assert np.array_equal(back.features, ds.features)
        assert np.array_equal(back.true_labels, ds.true_labels)
        assert np.array_equal(back.given_labels, ds.given_labels)

    def test_csv_dataset_runs(self, tmp_path):
        ds = generate_blobs(400, 3, 4, seed=1)
        p = tmp_path / "d.csv"
        export_csv(ds, p)
        out = tmp_path / "out"
        code = cli.main(["run", "--dataset", "csv", "--csv-path", str(p), "--n-classes", "3",
                         "--n-clients", "5", "--fraction", "0.2", "--t1", "1", "--t2", "1", "--t3", "1",
                         "--local-epochs", "1", "--output-dir", str(out)])
        assert code == 0
        assert json.loads((out / "summary.json").read_text())["final_accuracy"] > 0.5


class TestCli:
    def test_run_outputs(self, tmp_path):
        out = tmp_path / "o"
        assert cli.main(["run", *QUICK, "--rho", "0.5", "--output-dir", str(out)]) == 0
        names = sorted(p.name for p in out.iterdir())
        assert names == ["accuracy.csv", "client_states.csv", "confusion.json", "relabel_log.csv",
                         "relabel_report.csv", "resolved_config.json", "summary.json"]
        cfg = load_config(out / "resolved_config.json")
        tag = f"config_hash={cfg.config_hash()}"
        for p in out.iterdir():
            text = p.read_text()
            if p.suffix == ".csv":
                assert text.startswith(f"# seed={cfg.seed} {tag}\n")
            else:
                meta = json.loads(text)
                meta = meta.get("_meta", meta)
                assert meta["seed"] == cfg.seed and meta["config_hash"] == cfg.config_hash()
        states = (out / "client_states.csv").read_text().splitlines()
        assert states[1] == "iteration,client,lid,cumulative_lid,estimated_noise,is_noisy,true_noise"
        assert len(states) == 2 + 2 * 10

    def test_fedavg_no_relabel_files(self, tmp_path):
        out = tmp_path / "o"
        assert cli.main(["run", *QUICK, "--mode", "fedavg", "--output-dir", str(out)]) == 0
        assert sorted(p.name for p in out.iterdir()) == ["accuracy.csv", "resolved_config.json", "summary.json"]

    def test_comm_cost_300(self, tmp_path):
        out = tmp_path / "o"
        argv = ["run", "--dry-run", "--n-clients", "20", "--fraction", "0.1", "--t1", "5", "--t2", "50",
                "--t3", "50", "--rho", "0", "--output-dir", str(out)]
        assert cli.main(argv) == 0
        assert json.loads((out / "summary.json").read_text())["comm_cost"] == 300

    def test_config_file_and_flag_precedence(self, tmp_path, monkeypatch, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"seed": 9, "output_dir": "from_file", "t1": 3}))
        monkeypatch.setenv("FEDCORR_OUTPUT_DIR", "from_env")
        assert cli.main(["validate-config", str(p), "--t1", "4"]) == 0
        shown = json.loads(capsys.readouterr().out)
        assert shown["seed"] == 9 and shown["t1"] == 4 and shown["output_dir"] == "from_env"
        assert cli.main(["validate-config", str(p), "--output-dir", "from_flag"]) == 0
        assert json.loads(capsys.readouterr().out)["output_dir"] == "from_flag"

    def test_bool_and_optional_flags(self, capsys):
        assert cli.main(["validate-config", "--no-mixup", "true", "--fedavg-rounds", "none"]) == 0
        shown = json.loads(capsys.readouterr().out)
        assert shown["no_mixup"] is True and shown["fedavg_rounds"] is None

    def test_config_error_exit_code(self, capsys):
        assert cli.main(["validate-config", "--rho", "1.5"]) == 2
        assert "rho" in capsys.readouterr().err

    def test_failure_leaves_no_partial_output(self, tmp_path, capsys):
        out = tmp_path / "o"
        code = cli.main(["run", "--dry-run", "--kappa", "0", "--output-dir", str(out)])
        assert code == 2 and "kappa" in capsys.readouterr().err
        assert not out.exists()
        assert list(tmp_path.iterdir()) == []

    def test_export_dataset(self, tmp_path):
        p = tmp_path / "train.csv"
        assert cli.main(["export-dataset", *QUICK, "--rho", "1", "--labels", "given", "--out", str(p)]) == 0
        ds = ingest_csv(p, 5)
        assert len(ds) == 300 and ds.dim == 20
        q = tmp_path / "test.csv"
        assert cli.main(["export-dataset", *QUICK, "--split", "test", "--no-header", "--out", str(q)]) == 0
        assert len(ingest_csv(q, 5)) == 50
