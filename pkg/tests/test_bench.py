import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import rankdata

from losslearn.bench import (
    BenchmarkGrid,
    ConfigError,
    compute_ranks,
    inspect_loss_csv,
    loss_from_selector,
    mid_ranks,
    noise_matrix_csv,
    run_benchmark,
)
from losslearn.cli import main_entry
from losslearn.reference import (
    Bootstrap,
    CrossEntropy,
    GeneralizedCrossEntropy,
    MeanAbsoluteError,
    SymmetricCrossEntropy,
)
from losslearn.taylor import mse_embedding, save_loss


# ---------------------------------------------------------------------------
# mid-rank computation against an independent oracle
# ---------------------------------------------------------------------------


@given(
    st.lists(
        st.integers(min_value=0, max_value=5).map(lambda k: k / 4.0),
        min_size=1,
        max_size=12,
    )
)
@settings(max_examples=200, deadline=None)
def test_mid_ranks_match_scipy(values):
    # small value pool forces frequent ties
    ours = mid_ranks(values)
    theirs = rankdata([-v for v in values], method="average")
    np.testing.assert_allclose(ours, theirs)


def test_mid_rank_two_way_tie():
    ranks = mid_ranks([0.8, 0.8, 0.6])
    np.testing.assert_allclose(ranks, [1.5, 1.5, 3.0])


def test_mid_ranks_descending_means_best_is_one():
    np.testing.assert_allclose(mid_ranks([0.1, 0.9, 0.5]), [3.0, 1.0, 2.0])


# ---------------------------------------------------------------------------
# rank table assembly
# ---------------------------------------------------------------------------


def toy_grid(**overrides):
    base = dict(
        cells=[("a1", "d1", "none"), ("a1", "d2", "none")],
        losses=("lossA", "lossB"),
        seeds=1,
    )
    base.update(overrides)
    return BenchmarkGrid(**base)


def rows_from(grid, accs):
    # accs[cell_index][loss_index][seed_index]
    rows = []
    for ci, cell in enumerate(grid.cells):
        for li, loss in enumerate(grid.losses):
            for s in range(grid.seeds):
                rows.append((*cell, loss, s, accs[ci][li][s], False))
    return rows


def test_consistent_winner_gets_average_rank_one():
    grid = toy_grid()
    table = compute_ranks(grid, rows_from(grid, [[[0.9], [0.5]], [[0.8], [0.6]]]))
    assert table.averages == {"lossA": 1.0, "lossB": 2.0}


def test_split_wins_average_to_one_point_five():
    grid = toy_grid()
    table = compute_ranks(grid, rows_from(grid, [[[0.9], [0.5]], [[0.6], [0.8]]]))
    assert table.averages == {"lossA": 1.5, "lossB": 1.5}


def test_rank_rows_carry_mean_and_population_std():
    grid = toy_grid(cells=[("a1", "d1", "none")], seeds=2)
    table = compute_ranks(
        grid, rows_from(grid, [[[0.6, 0.8], [0.5, 0.5]]])
    )
    arch, dsel, nsel, loss, mean, std, rank = table.rows[0]
    assert (loss, mean, rank) == ("lossA", 0.7, 1.0)
    assert std == pytest.approx(0.1)  # ddof=0
    assert table.rows[1][4:] == (0.5, 0.0, 2.0)


def test_ranks_invariant_under_monotone_rescaling():
    grid = toy_grid(seeds=2)
    accs = [[[0.62, 0.58], [0.41, 0.45]], [[0.33, 0.35], [0.52, 0.50]]]
    plain = compute_ranks(grid, rows_from(grid, accs))
    squashed = [
        [[math.tanh(3 * a) for a in per_loss] for per_loss in per_cell]
        for per_cell in accs
    ]
    bent = compute_ranks(grid, rows_from(grid, squashed))
    assert [r[6] for r in plain.rows] == [r[6] for r in bent.rows]
    assert plain.averages == bent.averages


def test_missing_rows_detected():
    grid = toy_grid(seeds=2)
    rows = rows_from(grid, [[[0.9, 0.8], [0.5, 0.4]], [[0.8, 0.7], [0.6, 0.5]]])
    with pytest.raises(RuntimeError, match="rows"):
        compute_ranks(grid, rows[:-1])


# ---------------------------------------------------------------------------
# loss selectors
# ---------------------------------------------------------------------------


def test_selector_builds_each_reference_kind():
    assert isinstance(loss_from_selector("ce"), CrossEntropy)
    assert isinstance(loss_from_selector("mae"), MeanAbsoluteError)
    gce = loss_from_selector("gce:q=0.5")
    assert isinstance(gce, GeneralizedCrossEntropy) and gce.q == 0.5
    sce = loss_from_selector("sce:alpha=0.2:A=-6")
    assert isinstance(sce, SymmetricCrossEntropy)
    assert sce.alpha == 0.2 and sce.log_zero == -6
    boot = loss_from_selector("bootstrap:weight=0.8:mode=hard")
    assert isinstance(boot, Bootstrap) and boot.hard and boot.weight == 0.8


def test_selector_loads_loss_file(tmp_path):
    path = tmp_path / "poly.json"
    save_loss(mse_embedding(), path)
    loaded = loss_from_selector(str(path))
    assert loaded.coefficients[(2, 0)] == 2.0


def test_selector_rejects_unknown_name():
    with pytest.raises(ConfigError, match="neither a known name"):
        loss_from_selector("nosuch")


def test_selector_rejects_malformed_option():
    with pytest.raises(ConfigError, match="bad loss option"):
        loss_from_selector("gce:q")
    with pytest.raises(ConfigError, match="bad value"):
        loss_from_selector("gce:q=fast")
    with pytest.raises(ConfigError, match="mode must be soft or hard"):
        loss_from_selector("bootstrap:mode=sideways")
    with pytest.raises(ConfigError, match="cannot build loss"):
        loss_from_selector("gce:quux=0.5")


# ---------------------------------------------------------------------------
# inspection dumps
# ---------------------------------------------------------------------------


def surface_value(text, yhat, y):
    for row in csv.DictReader(io.StringIO(text)):
        if float(row["yhat"]) == yhat and int(row["y"]) == y:
            return float(row["loss"])
    raise AssertionError(f"no row for yhat={yhat} y={y}")


def test_inspect_cross_entropy_midpoint_is_log_two():
    text = inspect_loss_csv(CrossEntropy(), resolution=4)
    assert surface_value(text, 0.5, 1) == pytest.approx(math.log(2.0), abs=1e-6)


def test_inspect_mae_vanishes_at_the_label():
    text = inspect_loss_csv(MeanAbsoluteError(), resolution=4)
    assert surface_value(text, 1.0, 1) == 0.0
    assert surface_value(text, 0.0, 0) == 0.0


def test_inspect_polynomial_matches_closed_form():
    text = inspect_loss_csv(mse_embedding(), resolution=10)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == 22  # 11 grid points x 2 labels
    for row in rows:
        p, y = float(row["yhat"]), int(row["y"])
        pred = np.array([p, 1.0 - p])
        label = np.array([1.0, 0.0]) if y == 1 else np.array([0.0, 1.0])
        expected = np.mean((pred - label) ** 2 - label**2)
        assert float(row["loss"]) == pytest.approx(expected, abs=1e-6)


def test_inspect_rejects_zero_resolution():
    with pytest.raises(ConfigError, match="resolution"):
        inspect_loss_csv(CrossEntropy(), resolution=0)


def test_noise_matrix_dump():
    text = noise_matrix_csv("sym:0.4", 3)
    rows = [[float(v) for v in line.split(",")] for line in text.strip().split("\n")]
    np.testing.assert_allclose(
        rows, [[0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.2, 0.2, 0.6]]
    )


def test_noise_matrix_none_is_identity():
    text = noise_matrix_csv("none", 4)
    rows = [[float(v) for v in line.split(",")] for line in text.strip().split("\n")]
    np.testing.assert_allclose(rows, np.eye(4))


def test_noise_matrix_with_custom_pairing():
    text = noise_matrix_csv("asym:0.3", 3, pairing=[2, 0, 1])
    rows = [[float(v) for v in line.split(",")] for line in text.strip().split("\n")]
    np.testing.assert_allclose(
        rows, [[0.7, 0.0, 0.3], [0.3, 0.7, 0.0], [0.0, 0.3, 0.7]]
    )


# ---------------------------------------------------------------------------
# grid configs
# ---------------------------------------------------------------------------


def test_grid_from_dict_accepts_cell_objects():
    grid = BenchmarkGrid.from_dict(
        {
            "cells": [{"arch": "mlp:8", "dataset": "blobs:3:20:0.3", "noise": "none"}],
            "losses": ["ce"],
        }
    )
    assert grid.cells == (("mlp:8", "blobs:3:20:0.3", "none"),)


@pytest.mark.parametrize("missing", ["cells", "losses"])
def test_grid_missing_field_is_named(missing):
    doc = {"cells": [["a", "d", "none"]], "losses": ["ce"]}
    del doc[missing]
    with pytest.raises(ConfigError, match=missing):
        BenchmarkGrid.from_dict(doc)


def test_grid_unknown_field_rejected():
    with pytest.raises(ConfigError, match="unknown field 'epcohs'"):
        BenchmarkGrid.from_dict(
            {"cells": [["a", "d", "none"]], "losses": ["ce"], "epcohs": 3}
        )


def test_grid_rejects_short_cell():
    with pytest.raises(ConfigError, match="arch, dataset, noise"):
        BenchmarkGrid(cells=[("a", "d")], losses=("ce",))


# ---------------------------------------------------------------------------
# full benchmark runs
# ---------------------------------------------------------------------------


def small_grid(**overrides):
    base = dict(
        cells=[
            ("mlp:8", "blobs:3:30:0.3", "none"),
            ("mlp:8", "blobs:3:30:0.3", "sym:0.3"),
        ],
        losses=("ce", "mae"),
        seeds=2,
        epochs=2,
        batch_size=16,
        master_seed=5,
    )
    base.update(overrides)
    return BenchmarkGrid(**base)


def read_csv(path):
    with open(path) as handle:
        return list(csv.DictReader(handle))


def test_benchmark_writes_exactly_one_row_per_job(tmp_path):
    grid = small_grid()
    run_benchmark(grid, tmp_path)
    rows = read_csv(tmp_path / "results.csv")
    assert len(rows) == len(grid.cells) * len(grid.losses) * grid.seeds
    for row in rows:
        assert 0.0 <= float(row["accuracy"]) <= 1.0
        assert row["diverged"] in ("0", "1")


def test_benchmark_reruns_are_byte_identical(tmp_path):
    grid = small_grid()
    run_benchmark(grid, tmp_path / "one")
    run_benchmark(grid, tmp_path / "two")
    for name in ("results.csv", "rank_table.csv", "avg_ranks.csv"):
        assert (tmp_path / "one" / name).read_bytes() == (
            tmp_path / "two" / name
        ).read_bytes()


def test_benchmark_workers_do_not_change_results(tmp_path):
    run_benchmark(small_grid(workers=1), tmp_path / "serial")
    run_benchmark(small_grid(workers=4), tmp_path / "pooled")
    assert (tmp_path / "serial" / "results.csv").read_bytes() == (
        tmp_path / "pooled" / "results.csv"
    ).read_bytes()


def test_losses_share_data_and_init_within_a_seed(tmp_path):
    # with learning disabled every loss must report the identical accuracy
    # for a given seed index, proving the data/split/init seeds exclude the loss
    grid = small_grid(learning_rate=0.0, epochs=1)
    run_benchmark(grid, tmp_path)
    rows = read_csv(tmp_path / "results.csv")
    by_job = {
        (r["arch"], r["dataset"], r["noise"], r["loss"], r["seed"]): r["accuracy"]
        for r in rows
    }
    for arch, dsel, nsel in grid.cells:
        for s in ("0", "1"):
            cell_accs = {by_job[(arch, dsel, nsel, loss, s)] for loss in grid.losses}
            assert len(cell_accs) == 1


def test_rank_table_recomputable_from_results_csv(tmp_path):
    grid = small_grid(seeds=3)
    run_benchmark(grid, tmp_path)
    results = read_csv(tmp_path / "results.csv")
    reported = read_csv(tmp_path / "rank_table.csv")
    idx = 0
    for arch, dsel, nsel in grid.cells:
        means = []
        for loss in grid.losses:
            accs = [
                float(r["accuracy"])
                for r in results
                if (r["arch"], r["dataset"], r["noise"], r["loss"])
                == (arch, dsel, nsel, loss)
            ]
            assert len(accs) == grid.seeds
            means.append(np.mean(accs))
            row = reported[idx]
            assert float(row["mean_accuracy"]) == pytest.approx(
                np.mean(accs), abs=1e-6
            )
            assert float(row["std_accuracy"]) == pytest.approx(
                np.std(accs), abs=1e-6
            )
            idx += 1
        expected_ranks = rankdata([-m for m in means], method="average")
        got = [
            float(r["rank"])
            for r in reported[idx - len(grid.losses) : idx]
        ]
        np.testing.assert_allclose(got, expected_ranks)


def test_diverged_jobs_keep_their_rows(tmp_path):
    grid = small_grid(learning_rate=1e160, seeds=1, losses=("ce",))
    run_benchmark(grid, tmp_path)
    rows = read_csv(tmp_path / "results.csv")
    assert len(rows) == len(grid.cells)
    for row in rows:
        assert row["accuracy"] == "0.000000"
        assert row["diverged"] == "1"


def test_benchmark_accepts_polynomial_loss_file(tmp_path):
    path = tmp_path / "poly.json"
    save_loss(mse_embedding(), path)
    grid = small_grid(
        cells=[("mlp:8", "blobs:4:20:0.3", "none")],
        losses=(str(path), "ce"),
        seeds=1,
    )
    run_benchmark(grid, tmp_path / "out")
    rows = read_csv(tmp_path / "out" / "results.csv")
    assert [r["loss"] for r in rows] == [str(path), "ce"]
    assert all(r["diverged"] == "0" for r in rows)


def test_unresolvable_selector_fails_before_training(tmp_path):
    grid = small_grid(cells=[("mlp:8", "blobs:3:30:0.3", "sym:2.0")])
    with pytest.raises(ConfigError, match="unresolvable cell selector"):
        run_benchmark(grid, tmp_path)
    assert not (tmp_path / "results.csv").exists()


# ---------------------------------------------------------------------------
# command line behaviour
# ---------------------------------------------------------------------------


def test_cli_help_exits_zero(capsys):
    assert main_entry(["--help"]) == 0
    capsys.readouterr()


def test_cli_unknown_subcommand_is_config_error(capsys):
    assert main_entry(["frobnicate"]) == 2
    capsys.readouterr()


def test_cli_train_prints_accuracy_and_writes_curve(tmp_path, capsys):
    curve = tmp_path / "curve.csv"
    code = main_entry(
        [
            "train",
            "--loss", "ce",
            "--dataset", "blobs:2:250:0.15",
            "--arch", "mlp:32",
            "--noise", "none",
            "--epochs", "20",
            "--seed", "7",
            "--curve-out", str(curve),
        ]
    )
    out = capsys.readouterr()
    assert code == 0
    acc = float(out.out.strip())
    assert acc > 0.95
    lines = curve.read_text().strip().split("\n")
    assert lines[0] == "epoch,train_loss,val_accuracy"
    assert len(lines) == 21


def test_cli_train_bad_loss_selector_exits_two(capsys):
    code = main_entry(
        ["train", "--loss", "nosuch", "--dataset", "blobs:2:10:0.3", "--arch", "linear"]
    )
    err = capsys.readouterr().err
    assert code == 2
    assert "nosuch" in err


def test_cli_train_bad_dataset_selector_exits_two(capsys):
    code = main_entry(
        ["train", "--loss", "ce", "--dataset", "cubes:2:10", "--arch", "linear"]
    )
    assert code == 2
    assert "cubes" in capsys.readouterr().err


def test_cli_benchmark_roundtrip(tmp_path, capsys):
    config = tmp_path / "grid.json"
    config.write_text(
        json.dumps(
            {
                "cells": [["mlp:8", "blobs:3:20:0.3", "none"]],
                "losses": ["ce", "mae"],
                "seeds": 1,
                "epochs": 1,
                "master_seed": 3,
            }
        )
    )
    out_dir = tmp_path / "out"
    assert main_entry(["benchmark", "--config", str(config), "--out", str(out_dir)]) == 0
    err = capsys.readouterr().err
    assert "average rank" in err
    assert (out_dir / "results.csv").exists()
    assert (out_dir / "rank_table.csv").exists()
    assert (out_dir / "avg_ranks.csv").exists()


def test_cli_benchmark_missing_field_names_it(tmp_path, capsys):
    config = tmp_path / "grid.json"
    config.write_text(json.dumps({"losses": ["ce"]}))
    assert main_entry(["benchmark", "--config", str(config), "--out", str(tmp_path / "o")]) == 2
    assert "cells" in capsys.readouterr().err


def test_cli_benchmark_malformed_json_exits_two(tmp_path, capsys):
    config = tmp_path / "grid.json"
    config.write_text("{not json")
    assert main_entry(["benchmark", "--config", str(config), "--out", str(tmp_path / "o")]) == 2
    assert "not valid JSON" in capsys.readouterr().err


def test_cli_benchmark_missing_config_file_exits_two(tmp_path, capsys):
    missing = tmp_path / "absent.json"
    assert main_entry(["benchmark", "--config", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert "not found" in capsys.readouterr().err


def test_cli_runtime_failure_exits_three(tmp_path, capsys):
    config = tmp_path / "grid.json"
    config.write_text(
        json.dumps(
            {
                "cells": [["mlp:8", "blobs:3:20:0.3", "none"]],
                "losses": ["ce"],
                "seeds": 1,
                "epochs": 1,
            }
        )
    )
    blocker = tmp_path / "blocked"
    blocker.write_text("a file where the output directory should go")
    code = main_entry(
        ["benchmark", "--config", str(config), "--out", str(blocker / "sub")]
    )
    assert code == 3
    assert "failed:" in capsys.readouterr().err


def test_cli_inspect_loss_writes_surface(tmp_path, capsys):
    out = tmp_path / "surface.csv"
    code = main_entry(
        ["inspect-loss", "--loss", "ce", "--resolution", "4", "--out", str(out)]
    )
    capsys.readouterr()
    assert code == 0
    text = out.read_text()
    assert surface_value(text, 0.5, 1) == pytest.approx(math.log(2.0), abs=1e-6)


def test_cli_make_noise_matrix(tmp_path, capsys):
    out = tmp_path / "t.csv"
    code = main_entry(
        ["make-noise-matrix", "--noise", "asym:0.2", "--classes", "3", "--out", str(out)]
    )
    capsys.readouterr()
    assert code == 0
    rows = [
        [float(v) for v in line.split(",")]
        for line in out.read_text().strip().split("\n")
    ]
    np.testing.assert_allclose(
        rows, [[0.8, 0.2, 0.0], [0.0, 0.8, 0.2], [0.2, 0.0, 0.8]]
    )


def test_cli_make_noise_matrix_bad_ratio_exits_two(tmp_path, capsys):
    code = main_entry(
        [
            "make-noise-matrix",
            "--noise", "sym:1.5",
            "--classes", "3",
            "--out", str(tmp_path / "t.csv"),
        ]
    )
    assert code == 2
    capsys.readouterr()


def test_cli_meta_train_smoke(tmp_path, capsys):
    config = tmp_path / "meta.json"
    config.write_text(
        json.dumps(
            {
                "mode": "AR",
                "architectures": ["mlp:8"],
                "datasets": ["blobs:3:30:0.3"],
                "noise": "sym:0.2",
                "max_generations": 1,
                "master_seed": 11,
                "population": 5,
                "epochs": 1,
                "batch_size": 16,
                "range_samples": 300,
            }
        )
    )
    run_dir = tmp_path / "run"
    assert main_entry(["meta-train", "--config", str(config), "--out", str(run_dir)]) == 0
    capsys.readouterr()
    assert (run_dir / "best_loss.json").exists()
    assert (run_dir / "cma_log.csv").exists()


def test_cli_meta_train_missing_field_exits_two(tmp_path, capsys):
    config = tmp_path / "meta.json"
    config.write_text(json.dumps({"mode": "AR"}))
    code = main_entry(
        ["meta-train", "--config", str(config), "--out", str(tmp_path / "run")]
    )
    assert code == 2
    assert "missing field" in capsys.readouterr().err
