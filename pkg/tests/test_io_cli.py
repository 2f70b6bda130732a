"""CSV ingestion, model persistence, exports, and the CLI pipeline."""

import json
from pathlib import Path

import numpy as np
import pytest

from conftest import make_hp, make_side
from xfile.cli import hyperparams_from_dict, main
from xfile.io import (
    MatrixParseError,
    export_analysis,
    load_matrix,
    load_model,
    load_side_info,
    save_matrix,
    save_model,
    write_fit_outputs,
    write_pgm,
)
from xfile.model import ObservedMatrix, Transform, materialize, similarity_matrix
from xfile.optimizer import fit
from xfile.shrinkage import ShrinkageParams


class TestLoadMatrix:
    def test_missing_cell(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("1,2\n3,\n")
        data = load_matrix(path)
        assert data.shape == (2, 2)
        np.testing.assert_array_equal(data.mask, [[True, True], [True, False]])
        assert data.values[0, 1] == 2.0

    def test_header_skipped(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a,b\n1,2\n")
        data = load_matrix(path, has_header=True)
        assert data.shape == (1, 2)

    def test_ragged_row_located(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("1,2\n3\n")
        with pytest.raises(MatrixParseError, match="row 2"):
            load_matrix(path)

    def test_bad_cell_located(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("1,2\n3,oops\n")
        with pytest.raises(MatrixParseError, match="row 2, column 2"):
            load_matrix(path)

    def test_roundtrip_bit_identical(self, tmp_path, rng):
        values = rng.standard_normal((7, 5))
        mask = rng.random((7, 5)) > 0.2
        path = tmp_path / "m.csv"
        save_matrix(path, values, mask)
        back = load_matrix(path)
        np.testing.assert_array_equal(back.mask, mask)
        np.testing.assert_array_equal(back.values[mask], values[mask])

    def test_side_info_intercept_prepended(self, tmp_path, rng):
        x = rng.standard_normal((4, 2))
        path = tmp_path / "x.csv"
        save_matrix(path, x)
        side = load_side_info(path, None, 4, 6)
        assert side.x.shape == (4, 3)
        np.testing.assert_array_equal(side.x[:, 0], np.ones(4))
        np.testing.assert_array_equal(side.x[:, 1:], x)
        assert side.w.shape == (6, 1)


def _small_fit(rng, transform=Transform.IDENTITY):
    n = p = 12
    values = rng.standard_normal((n, p)) + 2.0 * np.outer(
        rng.standard_normal(n), rng.standard_normal(p)
    )
    if transform == Transform.NONNEG_TRUNCATION:
        values = np.maximum(values, 0.0)
    side = make_side(n, p, 2, 2, rng)
    data = ObservedMatrix(values, np.ones((n, p), bool), transform)
    hp = make_hp(seed=6, n_restarts=2, max_inner_iters=60,
                 shrink=ShrinkageParams(2.0, 0.0))
    return fit(data, side, hp), side, data, hp


class TestModelPersistence:
    def test_roundtrip(self, tmp_path, rng):
        result, side, data, hp = _small_fit(rng)
        assert result.rank >= 1
        save_model(tmp_path, result, side, data.transform, hp.eps_frelu)
        loaded, side2, transform, eps = load_model(tmp_path)
        assert transform == data.transform
        assert eps == hp.eps_frelu
        assert loaded.rank == result.rank
        np.testing.assert_array_equal(side2.x, side.x)
        for a, b in zip(result.contributions, loaded.contributions):
            np.testing.assert_array_equal(a.u_tilde, b.u_tilde)
            np.testing.assert_array_equal(a.psi_tilde, b.psi_tilde)
            np.testing.assert_array_equal(a.beta, b.beta)
            np.testing.assert_array_equal(a.v_tilde, b.v_tilde)
            np.testing.assert_array_equal(a.gamma, b.gamma)
            assert a.eta == b.eta and a.rho == b.rho
        np.testing.assert_allclose(
            materialize(loaded.contributions, side2, eps),
            materialize(result.contributions, side, hp.eps_frelu),
        )

    def test_fit_outputs_written(self, tmp_path, rng):
        result, side, data, hp = _small_fit(rng)
        write_fit_outputs(tmp_path, result, side, data.transform, hp.eps_frelu)
        assert (tmp_path / "rank.txt").read_text().strip() == str(result.rank)
        assert (tmp_path / "contributions.csv").exists()
        assert (tmp_path / "logpost_trace.csv").exists()
        fitted = load_matrix(tmp_path / "fitted.csv")
        np.testing.assert_allclose(
            fitted.values, materialize(result.contributions, side, 0.0), atol=1e-12
        )

    def test_truncated_fit_outputs_both_scales(self, tmp_path, rng):
        result, side, data, hp = _small_fit(rng, Transform.NONNEG_TRUNCATION)
        write_fit_outputs(tmp_path, result, side, data.transform, hp.eps_frelu)
        latent = load_matrix(tmp_path / "fitted_latent.csv").values
        observed = load_matrix(tmp_path / "fitted_observed.csv").values
        np.testing.assert_allclose(observed, np.maximum(latent, 0.0), atol=1e-12)
        assert np.all(observed >= 0.0)


class TestExports:
    def test_analysis_files(self, tmp_path, rng):
        result, side, data, hp = _small_fit(rng)
        export_analysis(result, side, tmp_path, grid_rows=3, grid_cols=4)
        arch = np.loadtxt(tmp_path / "archetypes.csv", delimiter=",", ndmin=2)
        for h, c in enumerate(result.contributions):
            np.testing.assert_allclose(arch[:, h], c.phi_tilde * c.v_tilde)
        signs = np.loadtxt(tmp_path / "loading_signs.csv", delimiter=",", ndmin=2)
        assert set(np.unique(signs)) <= {-1.0, 0.0, 1.0}
        sim = np.loadtxt(tmp_path / "similarity.csv", delimiter=",", ndmin=2)
        np.testing.assert_allclose(np.diag(sim), np.ones(12), atol=1e-12)
        np.testing.assert_allclose(sim, similarity_matrix(result, side), atol=1e-12)

    def test_pgm_format(self, tmp_path, rng):
        result, side, data, hp = _small_fit(rng)
        export_analysis(result, side, tmp_path, grid_rows=3, grid_cols=4)
        for h in range(1, result.rank + 1):
            raw = (tmp_path / f"archetype_{h}.pgm").read_bytes()
            assert raw.startswith(b"P5\n4 3\n255\n")
            assert len(raw) == len(b"P5\n4 3\n255\n") + 12
            meta = json.loads((tmp_path / f"archetype_{h}.json").read_text())
            assert meta["rows"] == 3 and meta["cols"] == 4
            assert meta["min"] <= meta["max"]

    def test_pgm_rescaling(self, tmp_path):
        meta = write_pgm(tmp_path / "t.pgm", np.array([[0.0, 1.0], [2.0, 4.0]]))
        raw = (tmp_path / "t.pgm").read_bytes()
        pixels = list(raw[len(b"P5\n2 2\n255\n"):])
        assert pixels == [0, 64, 128, 255]
        assert meta == {"min": 0.0, "max": 4.0, "rows": 2, "cols": 2}

    def test_rank_zero_warns(self, tmp_path):
        from xfile.model import FitResult

        empty = FitResult(contributions=(), logpost_trace=np.empty(0),
                          trace_factors=np.empty(0, dtype=int),
                          latent_residual=np.zeros((3, 3)))
        with pytest.warns(RuntimeWarning, match="rank-0"):
            export_analysis(empty, make_side(3, 3), tmp_path)
        assert (tmp_path / "archetypes.csv").read_text() == ""

    def test_bad_grid_rejected(self, tmp_path, rng):
        result, side, data, hp = _small_fit(rng)
        with pytest.raises(ValueError, match="grid"):
            export_analysis(result, side, tmp_path, grid_rows=5, grid_cols=5)


class TestHyperParamsJson:
    def test_flat_keys(self):
        hp = hyperparams_from_dict({"alpha": 2.0, "delta": 0.1, "b_sigma": 0.3,
                                    "seed": 9})
        assert hp.shrink.alpha == 2.0 and hp.shrink.delta == 0.1
        assert hp.b_sigma == 0.3 and hp.seed == 9

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            hyperparams_from_dict({"alhpa": 2.0})


class TestCli:
    def test_no_args_usage_error(self, capsys):
        assert main([]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert main(["prior", "--alpha", "1", "--bogus"]) == 2

    def test_prior_stdout(self, capsys):
        assert main(["prior", "--alpha", "5", "--delta", "0",
                     "--draws", "1000", "--seed", "7"]) == 0
        out = capsys.readouterr().out
        assert out.startswith("# E[k] = 5")
        assert "k,probability" in out

    def test_prior_to_file(self, tmp_path, capsys):
        out = tmp_path / "pmf.csv"
        assert main(["prior", "--alpha", "2", "--draws", "500",
                     "--seed", "1", "--out", str(out)]) == 0
        assert out.read_text().startswith("k,probability")
        cfg = json.loads((tmp_path / "config_used.json").read_text())
        assert cfg["alpha"] == 2.0 and cfg["seed"] == 1

    def test_fit_predict_pipeline(self, tmp_path, rng):
        n = p = 10
        values = rng.standard_normal((n, p)) + 2.0 * np.outer(
            rng.standard_normal(n), rng.standard_normal(p)
        )
        mask = rng.random((n, p)) > 0.15
        data_path = tmp_path / "data.csv"
        save_matrix(data_path, values, mask)
        cfg_path = tmp_path / "hp.json"
        cfg_path.write_text(json.dumps({
            "alpha": 2.0, "b_sigma": 0.5, "n_restarts": 2,
            "max_inner_iters": 60, "max_factors": 3,
        }))
        out_dir = tmp_path / "run"
        assert main(["fit", "--data", str(data_path), "--config", str(cfg_path),
                     "--seed", "3", "--out-dir", str(out_dir)]) == 0
        assert (out_dir / "config_used.json").exists()
        rank = int((out_dir / "rank.txt").read_text())
        assert rank >= 1

        # predictions for the held-out cells must match the fitted matrix
        mask_path = tmp_path / "predict_mask.csv"
        save_matrix(mask_path, (~mask).astype(float))
        pred_path = tmp_path / "pred.csv"
        assert main(["predict", "--model", str(out_dir), "--mask", str(mask_path),
                     "--out", str(pred_path)]) == 0
        fitted = load_matrix(out_dir / "fitted.csv").values
        lines = pred_path.read_text().strip().splitlines()[1:]
        assert len(lines) == int((~mask).sum())
        for line in lines:
            i, j, val = line.split(",")
            assert float(val) == pytest.approx(fitted[int(i), int(j)], rel=1e-12)

    def test_fit_reproducibility_bitwise(self, tmp_path, rng):
        values = rng.standard_normal((8, 8))
        data_path = tmp_path / "d.csv"
        save_matrix(data_path, values)
        args = lambda out: ["fit", "--data", str(data_path), "--seed", "5",
                            "--out-dir", str(out)]
        assert main(args(tmp_path / "a")) == 0
        assert main(args(tmp_path / "b")) == 0
        for name in ("u_tilde.csv", "v_tilde.csv", "theta.csv", "fitted.csv",
                     "contributions.csv", "rank.txt", "logpost_trace.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_fit_nonneg_transform(self, tmp_path, rng):
        values = np.maximum(
            rng.standard_normal((10, 8))
            + np.outer(np.abs(rng.standard_normal(10)), np.abs(rng.standard_normal(8))),
            0.0,
        )
        data_path = tmp_path / "d.csv"
        save_matrix(data_path, values)
        out = tmp_path / "run"
        assert main(["fit", "--data", str(data_path), "--transform", "nonneg",
                     "--seed", "4", "--out-dir", str(out)]) == 0
        observed = load_matrix(out / "fitted_observed.csv").values
        assert np.all(observed >= 0.0)
        cfg = json.loads((out / "config_used.json").read_text())
        assert cfg["transform"] == "nonneg"

    def test_export_command(self, tmp_path, rng):
        values = rng.standard_normal((9, 8)) + 2.0 * np.outer(
            rng.standard_normal(9), rng.standard_normal(8)
        )
        data_path = tmp_path / "d.csv"
        save_matrix(data_path, values)
        run = tmp_path / "run"
        assert main(["fit", "--data", str(data_path), "--seed", "2",
                     "--out-dir", str(run)]) == 0
        exp = tmp_path / "exp"
        assert main(["export", "--model", str(run), "--out-dir", str(exp),
                     "--grid-rows", "2", "--grid-cols", "4"]) == 0
        assert (exp / "similarity.csv").exists()
        assert (exp / "config_used.json").exists()

    def test_simulate_command(self, tmp_path):
        scenario = tmp_path / "scenario.json"
        scenario.write_text(json.dumps({
            "n": 15, "p": 12, "k_true": 2, "q_x": 2, "q_w": 2,
            "dgp": "multiplicative", "holdout_fraction": 0.2,
            "sparsity_fraction": 0.25, "noise_sd": 1.0,
            "n_replicates": 2, "seed": 3,
        }))
        cfg = tmp_path / "hp.json"
        cfg.write_text(json.dumps({"n_restarts": 2, "max_inner_iters": 40,
                                   "max_factors": 3, "zeta_n": 0.15, "zeta_p": 0.15}))
        out = tmp_path / "report.csv"
        assert main(["simulate", "--scenario", str(scenario), "--config", str(cfg),
                     "--out", str(out)]) == 0
        text = out.read_text()
        assert "replicate,model,rmse,rank_selected,wall_time_ms" in text
        assert text.count("xfile") >= 2

    def test_simulate_grid_flag(self, tmp_path):
        scenario = tmp_path / "scenario.json"
        scenario.write_text(json.dumps({
            "n": 12, "p": 10, "k_true": 2, "q_x": 2, "q_w": 2,
            "dgp": "multiplicative", "holdout_fraction": 0.2,
            "sparsity_fraction": 0.25, "noise_sd": 1.0,
            "n_replicates": 1, "seed": 4,
        }))
        cfg = tmp_path / "hp.json"
        cfg.write_text(json.dumps({"n_restarts": 1, "max_inner_iters": 30,
                                   "max_factors": 2}))
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"alpha": [1.0, 3.0]}))
        out = tmp_path / "report.csv"
        assert main(["simulate", "--scenario", str(scenario), "--config", str(cfg),
                     "--grid", str(grid), "--out", str(out)]) == 0
        cfg_used = json.loads((tmp_path / "config_used.json").read_text())
        assert len(cfg_used["grid_trials"]) == 2
        assert cfg_used["hyper"]["alpha"] in (1.0, 3.0)

    def test_missing_file_is_clean_error(self, tmp_path, capsys):
        assert main(["fit", "--data", str(tmp_path / "absent.csv"),
                     "--out-dir", str(tmp_path / "o")]) == 1
        assert "error" in capsys.readouterr().err
