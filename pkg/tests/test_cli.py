import json

import numpy as np

from dflsim import cli, data as D, model as M, topology as tp


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


FAST = {"sample_count": 120, "rounds": 3, "eval_interval": 1, "batch_size": 4,
        "input_height": 8, "input_width": 8, "widths": [2, 3, 4], "feature_dim": 5}


class TestRun:
    def test_minimal_config_produces_three_files(self, tmp_path):
        cfg_path = write_config(tmp_path, {"strategy": "cll", "rounds": 10})
        assert cli.main(["run", str(cfg_path), "--out", str(tmp_path / "out"),
                         "--quiet"]) == 0
        produced = sorted(p.name for p in (tmp_path / "out").iterdir())
        assert produced == ["final_model.ckpt", "metrics.csv", "resolved_config.json"]

    def test_unknown_strategy_names_field(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, {"strategy": "xfl"})
        assert cli.main(["run", str(cfg_path)]) == 1
        assert "'strategy'" in capsys.readouterr().err

    def test_unknown_field_rejected(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, {"strategy": "cll", "epochs": 5})
        assert cli.main(["run", str(cfg_path)]) == 1
        assert "epochs" in capsys.readouterr().err

    def test_missing_topology_file_rejected(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, {"strategy": "dfl", "topology": "nope.json"})
        assert cli.main(["run", str(cfg_path)]) == 1
        assert "topology" in capsys.readouterr().err

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg_path = write_config(tmp_path, {"strategy": "dfl", "seed": 3, **FAST})
        for sub in ("a", "b"):
            assert cli.main(["run", str(cfg_path), "--out", str(tmp_path / sub),
                             "--quiet"]) == 0
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b

    def test_resolved_config_reproduces_run(self, tmp_path):
        cfg_path = write_config(tmp_path, {"strategy": "sfl", "seed": 7, **FAST})
        assert cli.main(["run", str(cfg_path), "--out", str(tmp_path / "first"),
                         "--quiet"]) == 0
        resolved = tmp_path / "first" / "resolved_config.json"
        assert cli.main(["run", str(resolved), "--out", str(tmp_path / "second"),
                         "--quiet"]) == 0
        assert (tmp_path / "first" / "metrics.csv").read_bytes() == \
               (tmp_path / "second" / "metrics.csv").read_bytes()

    def test_seed_override_lands_in_resolved_config(self, tmp_path):
        cfg_path = write_config(tmp_path, {"strategy": "cll", "seed": 1, **FAST})
        assert cli.main(["run", str(cfg_path), "--out", str(tmp_path / "out"),
                         "--seed", "99", "--quiet"]) == 0
        resolved = json.loads((tmp_path / "out" / "resolved_config.json").read_text())
        assert resolved["seed"] == 99

    def test_quiet_suppresses_summary(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, {"strategy": "cll", **FAST})
        assert cli.main(["run", str(cfg_path), "--out", str(tmp_path / "out"),
                         "--quiet"]) == 0
        assert capsys.readouterr().out == ""

    def test_summary_line_printed(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, {"strategy": "cll", **FAST})
        assert cli.main(["run", str(cfg_path), "--out", str(tmp_path / "out")]) == 0
        out = capsys.readouterr().out
        assert "final_rmse=" in out and "sim_time_s=" in out

    def test_checkpoint_matches_final_model(self, tmp_path):
        cfg_path = write_config(tmp_path, {"strategy": "cll", "seed": 5, **FAST})
        assert cli.main(["run", str(cfg_path), "--out", str(tmp_path / "out"),
                         "--quiet"]) == 0
        kind, cfg, theta = M.load_checkpoint(tmp_path / "out" / "final_model.ckpt")
        assert kind == "fadnet"
        assert theta.shape == (M.param_count(kind, cfg),)
        assert np.all(np.isfinite(theta))

    def test_divergent_run_exits_2(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, {
            "strategy": "cll", "optimizer": "sgd", "learning_rate": 1e30, **FAST})
        with np.errstate(all="ignore"):
            assert cli.main(["run", str(cfg_path), "--out", str(tmp_path / "out"),
                             "--quiet"]) == 2
        assert "abort" in capsys.readouterr().err

    def test_external_data_source(self, tmp_path):
        ds = D.generate_linesteer(40, 8, 8, seed=0)
        D.save_external(tmp_path / "ext", ds)
        cfg = dict(FAST)
        del cfg["sample_count"]
        cfg_path = write_config(tmp_path, {
            "strategy": "cll", "data_source": "external",
            "external_path": str(tmp_path / "ext"), **cfg})
        assert cli.main(["run", str(cfg_path), "--out", str(tmp_path / "out"),
                         "--quiet"]) == 0

    def test_external_shape_mismatch_names_field(self, tmp_path, capsys):
        ds = D.generate_linesteer(10, 16, 16, seed=0)
        D.save_external(tmp_path / "ext", ds)
        cfg_path = write_config(tmp_path, {
            "strategy": "cll", "data_source": "external",
            "external_path": str(tmp_path / "ext"), **FAST})
        assert cli.main(["run", str(cfg_path), "--quiet"]) == 1
        assert "external_path" in capsys.readouterr().err


class TestCompare:
    def make_trio(self, tmp_path, seed=0):
        paths = []
        for strategy in ("cll", "sfl", "dfl"):
            paths.append(write_config(
                tmp_path, {"strategy": strategy, "seed": seed, **FAST},
                name=f"{strategy}.json"))
        return paths

    def test_three_strategy_table(self, tmp_path, capsys):
        paths = self.make_trio(tmp_path)
        out = tmp_path / "cmp"
        assert cli.main(["compare", *map(str, paths), "--out", str(out)]) == 0
        table = (out / "compare.csv").read_text().splitlines()
        assert table[0] == "strategy,model_kind,final_test_rmse,total_sim_time_s"
        assert len(table) == 4
        assert [line.split(",")[0] for line in table[1:]] == ["cll", "sfl", "dfl"]
        for strategy in ("cll", "sfl", "dfl"):
            assert (out / strategy / "metrics.csv").exists()

    def test_single_config_rejected(self, tmp_path, capsys):
        paths = self.make_trio(tmp_path)
        assert cli.main(["compare", str(paths[0])]) == 1
        assert ">= 2" in capsys.readouterr().err

    def test_incompatible_data_rejected(self, tmp_path, capsys):
        a = write_config(tmp_path, {"strategy": "cll", **FAST}, name="a.json")
        mismatched = dict(FAST, sample_count=64)
        b = write_config(tmp_path, {"strategy": "dfl", **mismatched}, name="b.json")
        assert cli.main(["compare", str(a), str(b)]) == 1
        assert "incompatible" in capsys.readouterr().err

    def test_dfl_row_time_is_rounds_times_cycle_time(self, tmp_path):
        paths = self.make_trio(tmp_path, seed=4)
        out = tmp_path / "cmp"
        assert cli.main(["compare", *map(str, paths), "--out", str(out),
                         "--quiet"]) == 0
        rows = (out / "compare.csv").read_text().splitlines()[1:]
        dfl_time = float(rows[2].split(",")[3])
        model_cfg = M.FADNetConfig(input_height=8, input_width=8, input_channels=1,
                                   widths=(2, 3, 4), feature_dim=5)
        delay = tp.DelayParams(8.0 * M.param_count("fadnet", model_cfg), 1)
        g = tp.load_topology(tp.fixture_path("gaia11"))
        overlay = tp.build_overlay_christofides(g, delay)
        assert dfl_time == FAST["rounds"] * tp.cycle_time(overlay, delay)
