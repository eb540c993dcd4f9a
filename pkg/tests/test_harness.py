import json

import numpy as np
import pytest
import yaml

from vbsens.errors import ConfigError
from vbsens.harness import (
    ComparisonReport,
    ExperimentConfig,
    emit_report,
    gen_glmm_data,
    load_config,
    load_report,
    refit_sweep,
    run_experiment,
)
from vbsens.harness.cli import main
from vbsens.harness.config import MIXTURES, default_document
from vbsens.harness.experiments import fit_glmm, offdiag_slope
from vbsens.harness.report import to_json
from vbsens.targets import GlmmPrior, MixtureTarget
from vbsens.targets.glmm import read_glmm_data

SMALL_GLMM = {
    "experiment": "glmm",
    "glmm": {"n_groups": 8, "max_group_size": 10, "beta_true": [0.5, -0.5], "tau_true": 1.0, "mu_true": 0.0},
    "mcmc": {"n_draws": 300, "warmup": 500, "thin": 1, "pilot_draws": 200, "pilot_warmup": 300, "pilot_thin": 1},
    "sweep": {"parameter": "mu0", "grid": [-0.1, 0.0, 0.1]},
}


def write_cfg(tmp_path, doc, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return p


# ---------------------------------------------------------------------------
# configuration


def test_minimal_config_fills_defaults(tmp_path):
    cfg = load_config(write_cfg(tmp_path, {"experiment": "glmm"}))
    assert cfg.glmm["n_groups"] == 50 and cfg.gh_points == 4
    assert cfg.prior() == GlmmPrior()
    assert set(cfg.seeds) == {"fit", "draws", "mcmc", "data", "oracle"}


def test_default_prior_values():
    p = GlmmPrior()
    assert (p.beta0, p.tau_beta, p.gamma_beta, p.mu0, p.tau_mu, p.a_tau, p.b_tau) == (0, 0.1, 0, 0, 0.01, 3, 3)


@pytest.mark.parametrize(
    "doc",
    [
        {},
        {"experiment": "nope"},
        {"experiment": "glmm", "bogus": 1},
        {"experiment": "glmm", "seeds": {"fit": -1}},
        {"experiment": "glmm", "output": {"format": "xml"}},
        {"experiment": "glmm", "optimizer": {"gtol": -1}},
        {"experiment": "glmm", "optimizer": {"nonsense": 1}},
        {"experiment": "glmm", "glmm": {"tau_true": 0}},
        {"experiment": "glmm", "glmm": {"prior": {"xi": 1}}},
        {"experiment": "glmm", "sensitivity": {"directions": ["xi"]}},
        {"experiment": "mixture_skew", "n_draws": 1},
        {"experiment": "mixture_skew", "target": {"weights": [0.5, 0.6]}},
        {"experiment": "mixture_skew", "target": {"covs": [[[1, 2], [2, 1]], [[1, 0], [0, 1]]]}},
    ],
)
def test_invalid_configs_rejected(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_yaml_string_numbers_and_seed_override():
    cfg = ExperimentConfig.from_dict({"experiment": "mvn_exactness", "optimizer": {"gtol": "1e-9"}})
    assert cfg.optimizer_config().gtol == 1e-9
    s = cfg.with_seed(10)
    assert list(s.seeds.values()) == [10, 11, 12, 13, 14]
    assert s.hash() != cfg.hash() and cfg.hash() == ExperimentConfig.from_dict(cfg.to_dict()).hash()


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("experiment: [unclosed")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_committed_mixture_oracle_variances():
    for kind, mix in MIXTURES.items():
        t = MixtureTarget(mix["weights"], mix["means"], mix["covs"])
        x = t.sample(np.random.default_rng(0), 1_000_000)[:, 0]
        assert x.var() == pytest.approx(mix["oracle_var"], abs=5e-5)
        assert default_document(kind)["target"]["weights"] == mix["weights"]


# ---------------------------------------------------------------------------
# data generation


def test_gen_data_single_row_reproducible():
    a = gen_glmm_data(1, 1, [0.3], 0.0, 1.0, seed=5)
    b = gen_glmm_data(1, 1, [0.3], 0.0, 1.0, seed=5)
    assert a.n_obs == 1 and np.array_equal(a.y, b.y) and np.array_equal(a.x, b.x)


def test_gen_data_null_model_rate_is_half():
    m = gen_glmm_data(1000, 20, [0.0, 0.0], 0.0, 1e12, seed=1)
    n = 10_000
    y = m.y[:n]
    assert y.size == n
    assert abs(y.mean() - 0.5) < 4 * 0.5 / np.sqrt(n)


def test_gen_data_group_sizes_and_covariates():
    m = gen_glmm_data(200, 5, [1.0, 2.0], 0.0, 1.0, seed=2, group_level_covariates=1)
    sizes = m.group_sizes()
    assert sizes.min() >= 1 and sizes.max() <= 5 and set(sizes) == {1, 2, 3, 4, 5}
    for t in range(m.n_groups):
        assert np.ptp(m.x[m.group == t, 0]) == 0.0
    with pytest.raises(ValueError):
        gen_glmm_data(2, 2, [1.0], 0.0, 0.0, seed=0)


def test_gen_data_file_bytes_identical(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_GLMM)
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "data.csv").read_bytes() == (tmp_path / "b" / "data.csv").read_bytes()
    model = read_glmm_data(tmp_path / "a" / "data.csv")
    assert model.n_groups == 8


# ---------------------------------------------------------------------------
# reports


def sample_report():
    r = ComparisonReport("demo", provenance={"seed": 1})
    r.add_row("theta_1", "mean", exact=1.0, exact_se=0.01, mfvb=0.9, lrvb=0.9, laplace=None, ess=1000.0)
    r.add_row("theta_1", "sd", exact=float("nan"), mfvb=0.5)
    r.add_table("cov", [[1.0, 0.5], [0.5, 2.0]], ["a", "b"], ["a", "b"])
    r.diagnostics["ok"] = True
    return r


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_report_roundtrip(tmp_path, fmt):
    r = sample_report()
    emit_report(r, fmt, tmp_path)
    back = load_report(tmp_path)
    assert back.to_dict() == r.to_dict()
    assert back.row("theta_1", "sd")["exact"] is None
    np.testing.assert_array_equal(back.table("cov"), [[1.0, 0.5], [0.5, 2.0]])


def test_empty_report_csv(tmp_path):
    files = emit_report(ComparisonReport("empty"), "csv", tmp_path)
    assert [f.name for f in files] == ["rows.csv", "manifest.json"]
    assert (tmp_path / "rows.csv").read_text().strip() == ",".join(
        ["parameter", "statistic", "exact", "exact_se", "mfvb", "lrvb", "laplace", "ess"])
    assert load_report(tmp_path).rows == []


def test_report_rejects_bad_cells():
    r = ComparisonReport("x")
    with pytest.raises(KeyError):
        r.add_row("a", "mean", median=1.0)
    with pytest.raises(ValueError):
        r.add_table("t", np.eye(2), ["a"], ["a", "b"])
    assert "NaN" not in to_json(sample_report())


def test_offdiag_slope():
    ref = np.array([[1.0, 0.2, -0.4], [0.2, 1.0, 0.1], [-0.4, 0.1, 1.0]])
    assert offdiag_slope(ref, ref) == pytest.approx(1.0)
    assert offdiag_slope(ref, 0.5 * ref) == pytest.approx(2.0)


# ---------------------------------------------------------------------------
# experiments and CLI


def test_mvn_experiment_report():
    cfg = ExperimentConfig.from_dict({"experiment": "mvn_exactness", "mvn": {"dim": 4}})
    r = run_experiment(cfg)
    assert not r.failed
    np.testing.assert_allclose(r.table("cov_lrvb"), r.table("cov_exact"), atol=1e-6)
    for row in r.rows:
        if row["statistic"] == "mean":
            assert abs(row["mfvb"] - row["exact"]) < 1e-8


def test_mixture_skew_experiment_ordering():
    r = run_experiment(ExperimentConfig.from_dict({"experiment": "mixture_skew", "oracle_draws": 200_000}))
    row = r.row("theta_1", "var")
    gap = abs(row["lrvb"] - row["exact"])
    assert gap < abs(row["mfvb"] - row["exact"]) and gap < abs(row["laplace"] - row["exact"])
    assert row["exact_se"] > 0


def test_glmm_experiment_and_determinism(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_GLMM)
    for d in ("a", "b"):
        assert main(["compare", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    a = (tmp_path / "a" / "report.json").read_bytes()
    assert a == (tmp_path / "b" / "report.json").read_bytes()
    rep = load_report(tmp_path / "a")
    assert {"sensitivity_lrvb_normalized", "sensitivity_mcmc_normalized"} <= set(rep.tables)
    prov = rep.provenance
    assert prov["config_hash"] == ExperimentConfig.from_dict(SMALL_GLMM).hash() and "versions" in prov


def test_cli_commands(tmp_path):
    cfg = write_cfg(tmp_path, {"experiment": "mixture_overdispersed_1d", "n_draws": 200, "oracle_draws": 10_000})
    for cmd in ("fit", "lrvb", "sensitivity", "laplace"):
        assert main([cmd, "--config", str(cfg), "--out", str(tmp_path / cmd)]) == 0
    fit = json.loads((tmp_path / "fit" / "fit.json").read_text())
    assert fit["converged"] and len(fit["eta"]) == 2
    assert main(["lrvb", "--config", str(cfg), "--out", str(tmp_path / "csv"), "--format", "csv"]) == 0
    assert (tmp_path / "csv" / "manifest.json").exists()
    assert main(["fit", "--config", str(cfg), "--out", str(tmp_path / "s"), "--seed", "3"]) == 0
    seeded = json.loads((tmp_path / "s" / "fit.json").read_text())
    assert seeded["provenance"]["seeds"]["draws"] == 4


def test_cli_exit_codes(tmp_path, capsys):
    bad = write_cfg(tmp_path, {"experiment": "glmm", "unknown": 1}, "bad.yaml")
    assert main(["fit", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    mix = write_cfg(tmp_path, {"experiment": "mixture_skew"}, "mix.yaml")
    assert main(["sweep", "--config", str(mix), "--out", str(tmp_path / "o")]) == 2
    slow = write_cfg(tmp_path, {"experiment": "mixture_skew", "n_draws": 50, "optimizer": {"max_iter": 1}},
                     "slow.yaml")
    assert main(["fit", "--config", str(slow), "--out", str(tmp_path / "f")]) == 3
    assert main(["lrvb", "--config", str(slow), "--out", str(tmp_path / "l")]) == 3
    partial = load_report(tmp_path / "l")
    assert partial.errors and partial.errors[0]["stage"] == "lrvb"
    assert partial.row("theta_1", "sd")["lrvb"] is None
    assert "configuration error" in capsys.readouterr().err


def test_mcmc_command_writes_chain(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_GLMM)
    assert main(["mcmc", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    from vbsens.baselines import ChainOutput

    chain = ChainOutput.load(tmp_path / "chain.npz")
    assert chain.n_draws == 300 and chain.drho.shape == (300, 7)


def test_sweep_single_point_equals_base():
    cfg = ExperimentConfig.from_dict(SMALL_GLMM)
    base = fit_glmm(cfg)
    res = refit_sweep(cfg, "tau_mu", [cfg.prior().tau_mu], base=base)
    assert res.converged == [True]
    np.testing.assert_allclose(res.refit[0], res.base_mean, atol=1e-7)
    np.testing.assert_allclose(res.predicted[0], res.base_mean, atol=0)


def test_sweep_small_grid_matches_sensitivity(tmp_path):
    cfg = ExperimentConfig.from_dict(SMALL_GLMM)
    res = refit_sweep(cfg, "mu0", [-0.01, 0.0, 0.01])
    fd = (res.refit[2] - res.refit[0]) / 0.02
    assert np.linalg.norm(fd - res.slope) < 0.05 * np.linalg.norm(res.slope)
    out = write_cfg(tmp_path, SMALL_GLMM)
    assert main(["sweep", "--config", str(out), "--out", str(tmp_path / "sw")]) == 0
    rep = load_report(tmp_path / "sw")
    assert {"refit", "linear"} <= set(rep.tables)
