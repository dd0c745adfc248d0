import csv
import json

import numpy as np
import pytest

from concave_lottery import cli, experiments
from concave_lottery.data import load_idx_arrays, resize_images
from concave_lottery.experiments import find_mnist, load_mnist, parse_grid
from concave_lottery.theory import error_bound


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def body(path):
    return path.read_text()


@pytest.fixture
def ini(tmp_path):
    def write(text):
        p = tmp_path / "run.ini"
        p.write_text(text)
        return str(p)

    return write


class TestParsing:
    def test_seed_forms(self):
        assert cli.parse_seeds("3") == (3,)
        assert cli.parse_seeds("0,2,5") == (0, 2, 5)
        assert cli.parse_seeds("0-3,7") == (0, 1, 2, 3, 7)

    def test_grid_forms(self):
        assert parse_grid("0,1e-3,0.5") == [0.0, 1e-3, 0.5]
        g = parse_grid("geom:1e-3:1e-1:3")
        assert g == pytest.approx([1e-3, 1e-2, 1e-1])

    def test_unknown_command(self):
        assert cli.main(["frobnicate"]) == 1

    def test_bad_flag(self):
        assert cli.main(["sweep", "--no-such-flag"]) == 1

    def test_bad_regularizer(self):
        assert cli.main(["verify-bounds", "--regularizer", "lq"]) == 1

    def test_unknown_config_key(self, ini, tmp_path):
        assert cli.main(["verify-bounds", "--config", ini("[bounds]\ntrails = 3\n"), "--out-dir", str(tmp_path)]) == 1

    def test_unknown_config_section(self, ini, tmp_path):
        assert cli.main(["verify-bounds", "--config", ini("[extra]\nx = 1\n"), "--out-dir", str(tmp_path)]) == 1

    def test_bad_config_value(self, ini, tmp_path):
        assert cli.main(["verify-bounds", "--config", ini("[bounds]\ntrials = many\n")]) == 1

    def test_infeasible_ranges(self, ini, tmp_path):
        assert cli.main(["verify-bounds", "--config", ini("[bounds]\nd_min = 5\nd_max = 3\n")]) == 1

    def test_flags_override_file(self, ini, tmp_path):
        args = cli.build_parser().parse_args(
            ["verify-bounds", "--config", ini("[bounds]\ntrials = 7\n[run]\nseeds = 4\n"), "--trials", "9"])
        cfg = cli.resolve_config("verify-bounds", args)
        assert cfg.settings.trials == 9 and cfg.seeds == (4,)

    def test_lottery_plan(self, ini):
        text = "[optim]\nepochs = 4\nmilestones = 2,3\n[lottery]\nablation = yes\n[model]\nhidden = 16\n"
        args = cli.build_parser().parse_args(["lottery", "--config", ini(text), "--regularizer", "l1",
                                              "--rounds", "2", "--rewind-epoch", "1"])
        cfg = cli.resolve_config("lottery", args)
        s = cfg.settings
        assert s.optim.epochs == 4 and s.optim.milestones == (2, 3)
        assert s.ablation and s.rounds == 2 and s.rewind_epoch == 1
        assert s.arch().sizes == (400, 16, 10)
        assert s.reg.kind == "l1"


class TestVerifyBounds:
    def test_l1_all_pass(self, tmp_path, capsys):
        assert cli.main(["verify-bounds", "--seed", "0", "--trials", "1000", "--out-dir", str(tmp_path)]) == 0
        table = rows(tmp_path / "bounds.csv")
        assert len(table) == 1000
        assert all(r["bound_holds"] == "1" for r in table)
        for r in table:
            assert float(r["bound"]) == pytest.approx(error_bound(float(r["lambda"]), int(r["k"]), float(r["gamma"])),
                                                      rel=1e-9)
        assert "PASS" in capsys.readouterr().out
        assert (tmp_path / "bounds.meta.json").exists()

    def test_log_gap_column(self, tmp_path, ini):
        cfg = ini("[bounds]\ntrials = 100\nd_max = 6\n")
        assert cli.main(["verify-bounds", "--config", cfg, "--regularizer", "log", "--out-dir", str(tmp_path)]) == 0
        for r in rows(tmp_path / "bounds.csv"):
            err, binary = float(r["error_l2"]), r["recovery_applicable"]
            if float(r["phi"]) == 0.0:
                # zero gap only at binary solutions
                assert r["reduced_holds"] != ""
            assert err >= 0 and binary in ("0", "1")

    def test_lambda_grid(self, tmp_path):
        assert cli.main(["verify-bounds", "--trials", "10", "--lambda-grid", "0.1,0.2",
                         "--out-dir", str(tmp_path)]) == 0
        lams = [float(r["lambda"]) for r in rows(tmp_path / "bounds.csv")]
        assert len(lams) == 10 and set(lams) == {0.1, 0.2}

    def test_violation_exit_code(self, tmp_path, monkeypatch):
        monkeypatch.setattr(experiments, "solve_relaxed", lambda inst, reg, q=0.01: 1.0 - inst.m_bar)
        assert cli.main(["verify-bounds", "--trials", "5", "--out-dir", str(tmp_path)]) == 3

    def test_golden_recording(self, tmp_path):
        gold = tmp_path / "g.json"
        cli.main(["verify-bounds", "--trials", "20", "--out-dir", str(tmp_path), "--record-golden", str(gold)])
        data = json.loads(gold.read_text())
        assert data["verify-bounds"]["instances"] == 20 and data["verify-bounds"]["failures"] == 0


class TestMaskView:
    def test_all_ones(self, tmp_path):
        (tmp_path / "m.txt").write_text("1\n1\n1\n1\n")
        assert cli.main(["mask-view", str(tmp_path / "m.txt"), "--side", "2", "-o", str(tmp_path / "m.pgm")]) == 0
        assert (tmp_path / "m.pgm").read_text() == "P2\n2 2\n255\n255 255\n255 255\n"

    def test_eight_white_pixels(self, tmp_path, rng):
        vals = np.zeros(400)
        vals[rng.choice(400, 8, replace=False)] = rng.uniform(0.05, 1, 8)
        (tmp_path / "m.txt").write_text(",".join(str(v) for v in vals))
        assert cli.main(["mask-view", str(tmp_path / "m.txt"), "-o", str(tmp_path / "m.pgm")]) == 0
        px = np.array((tmp_path / "m.pgm").read_text().split()[4:], int)
        assert px.size == 400 and np.count_nonzero(px == 255) == 8 and np.count_nonzero(px) == 8

    def test_overlay_is_product(self, tmp_path, rng):
        vals = rng.uniform(size=400)
        (tmp_path / "m.txt").write_text("\n".join(repr(float(v)) for v in vals))
        assert cli.main(["mask-view", str(tmp_path / "m.txt"), "--overlay", "3", "-o", str(tmp_path / "o.pgm")]) == 0
        images, _ = load_idx_arrays(*find_mnist(experiments.BUNDLED_MNIST))
        img = resize_images(images[3][None] / 255.0, 20)[0].ravel()
        expected = np.rint(vals * img * 255).astype(int)
        px = np.array((tmp_path / "o.pgm").read_text().split()[4:], int)
        assert np.array_equal(px, expected)

    def test_length_mismatch(self, tmp_path):
        (tmp_path / "m.txt").write_text("1 0 1")
        assert cli.main(["mask-view", str(tmp_path / "m.txt"), "--side", "2"]) == 1

    def test_out_of_range(self, tmp_path):
        (tmp_path / "m.txt").write_text("1 0 2 1")
        assert cli.main(["mask-view", str(tmp_path / "m.txt")]) == 1


class TestFetch:
    def test_size_verified(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        (src / "a.gz").write_bytes(b"12345")
        got = cli.fetch_mnist(src.as_uri(), tmp_path / "dst", {"a.gz": 5})
        assert got[0].read_bytes() == b"12345"
        with pytest.raises(OSError, match="published size"):
            cli.fetch_mnist(src.as_uri(), tmp_path / "dst2", {"a.gz": 6})

    def test_mismatch_exit_code(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        for name in cli.MNIST_FILES:
            (src / name).write_bytes(b"x")
        assert cli.main(["fetch-mnist", "--base-url", src.as_uri(), "--dest", str(tmp_path / "d")]) == 2


class TestSweep:
    def test_missing_data_is_run_failure(self, tmp_path):
        assert cli.main(["sweep", "--mnist-dir", str(tmp_path), "--out-dir", str(tmp_path), "--workers", "1"]) == 2

    def test_zero_lambda_keeps_everything(self, tmp_path, ini):
        cfg = ini("[sweep]\nfit_epochs = 100\npgd_epochs = 200\n")
        assert cli.main(["sweep", "--config", cfg, "--seed", "0", "--lambda-grid", "0", "--workers", "1",
                         "--out-dir", str(tmp_path)]) == 0
        table = rows(tmp_path / "sweep.csv")
        assert {r["method"] for r in table} == {"plain", "weight-subgradient-l1", "mask-l1", "mask-log"}
        assert all(int(r["nonzeros"]) == 400 for r in table)
        assert rows(tmp_path / "sweep_summary.csv")[0]["runs"] == "1"

    def test_regularizer_flag_selects_mask_method(self, tmp_path, ini):
        cfg = ini("[sweep]\nfit_epochs = 20\npgd_epochs = 20\n")
        cli.main(["sweep", "--config", cfg, "--lambda-grid", "0.01", "--regularizer", "log", "--workers", "1",
                  "--out-dir", str(tmp_path)])
        assert [r["method"] for r in rows(tmp_path / "sweep.csv")] == ["plain", "weight-subgradient-l1", "mask-log"]


class TestLottery:
    def test_single_round_no_penalty(self, tmp_path, ini):
        cfg = ini("[optim]\nepochs = 3\nmask_lr_scale = 1\n")
        assert cli.main(["lottery", "--config", cfg, "--rounds", "1", "--lambda-grid", "0", "--alpha", "1e-9",
                         "--workers", "1", "--out-dir", str(tmp_path)]) == 0
        (row,) = rows(tmp_path / "lottery_summary.csv")
        assert float(row["sparsity"]) == 0.0
        assert row["ticket_accuracy"] == row["dense_accuracy"]
        assert len(rows(tmp_path / "rounds_soft_seed0.csv")) == 1
        assert len((tmp_path / "mask_soft_seed0.txt").read_text().split()) == 400 * 32 + 32 * 10

    def test_hard_variant(self, tmp_path, ini):
        cfg = ini("[optim]\nepochs = 2\n")
        assert cli.main(["lottery", "--config", cfg, "--rounds", "2", "--hard-prune-p", "0.5", "--workers", "1",
                         "--out-dir", str(tmp_path)]) == 0
        (row,) = rows(tmp_path / "lottery_summary.csv")
        assert row["variant"] == "hard" and float(row["sparsity"]) == pytest.approx(0.75, abs=1e-3)

    def test_bad_rewind(self, tmp_path, ini):
        cfg = ini("[optim]\nepochs = 2\n")
        assert cli.main(["lottery", "--config", cfg, "--rewind-epoch", "5", "--out-dir", str(tmp_path)]) == 1


class TestDeterminism:
    def test_sweep_bytes(self, tmp_path, ini):
        cfg = ini("[sweep]\nfit_epochs = 50\npgd_epochs = 100\n")
        args = ["sweep", "--config", cfg, "--seed", "0,1", "--lambda-grid", "0.003,0.03"]
        assert cli.main(args + ["--workers", "1", "--out-dir", str(tmp_path / "a")]) == 0
        assert cli.main(args + ["--workers", "2", "--out-dir", str(tmp_path / "b")]) == 0
        for name in ("sweep.csv", "sweep_summary.csv", "sweep_log_vs_l1.csv"):
            assert body(tmp_path / "a" / name) == body(tmp_path / "b" / name)

    def test_lottery_bytes(self, tmp_path, ini):
        cfg = ini("[optim]\nepochs = 2\n")
        args = ["lottery", "--config", cfg, "--rounds", "2", "--ablation", "--workers", "1"]
        cli.main(args + ["--out-dir", str(tmp_path / "a")])
        cli.main(args + ["--out-dir", str(tmp_path / "b")])
        names = sorted(p.name for p in (tmp_path / "a").iterdir() if not p.name.endswith(".json"))
        assert len(names) == 1 + 2 * 4
        for name in names:
            assert body(tmp_path / "a" / name) == body(tmp_path / "b" / name)


def test_bundled_data_loads():
    assert load_mnist().n == 5000
