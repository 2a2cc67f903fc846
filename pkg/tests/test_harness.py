import json
import math

import numpy as np
import pytest

from expander_bp.expander import (BipartiteExpander, TensorExpander, construct_random,
                                  tensor_matvec)
from expander_bp.harness import (CSV_COLUMNS, ConfigError, CovSketchConfig, ExperimentConfig,
                                 ImageConfig, ResourceError, TheoryConfig, TrialRecord,
                                 default_grid, derive_seed, identity_sketch, matvec_cost_ratio,
                                 parse_grid, planted_covariance, psnr, read_records_csv,
                                 records_csv, run_cov_sketch, run_image, run_phase, run_timing,
                                 run_verify_theory, strip_timing, summarize, synthetic_frame,
                                 validate_records)
from expander_bp.solver import SolverConfig

SMALL = dict(p=60, M=20, k=2, d=4, n_grid=(20, 40, 60), monte_carlo=2, master_seed=3)


def test_default_grid_and_parse():
    assert default_grid(1000) == [100, 150, 200, 250, 300, 350, 400, 450, 500]
    assert parse_grid("100:500:50", 1000) == list(range(100, 501, 50))
    assert parse_grid("0.1,0.25,300", 1000) == [100, 250, 300]
    with pytest.raises(ConfigError):
        parse_grid("1:5", 10)


def test_derive_seed():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 3, 2)
    assert 0 <= derive_seed(2**64 + 5, 0) < 2**64


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(p=1000, M=30)
    with pytest.raises(ConfigError):
        ExperimentConfig(n_grid=(2000,))
    with pytest.raises(ConfigError):
        ExperimentConfig(monte_carlo=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(matrix_kind="dense")
    cfg = ExperimentConfig()
    assert cfg.g == 10 and cfg.degree == 11
    meta = cfg.to_dict()
    assert meta["grid_source"] == "default" and meta["d_rule"] == "experimental"
    assert ExperimentConfig(experiment="timing", p=10000, M=1000).grid() == [4000]


def test_phase_records_and_summary():
    cfg = ExperimentConfig(**SMALL)
    res = run_phase(cfg)
    assert len(res.records) == 3 * 2 * 2
    assert not validate_records(res.records)
    by_n = {(row["method"], row["n"]): float(row["success_rate"]) for row in res.summary}
    # n = p with an injective-ish expander is always recovered
    assert by_n[("l21", 60)] == 1.0
    assert all(r.time_ms >= 0 for r in res.records)


def test_phase_determinism_and_workers(tmp_path):
    cfg = ExperimentConfig(**SMALL, signal="both")
    a = run_phase(cfg)
    b = run_phase(cfg, workers=2)
    assert strip_timing(records_csv(a.records)) == strip_timing(records_csv(b.records))
    assert {r.experiment for r in a.records} == {"phase-gaussian", "phase-sign"}
    pa, pb = a.write(tmp_path / "a"), b.write(tmp_path / "b")
    for x, y in zip(pa, pb):
        if x.name.endswith(".csv"):
            assert strip_timing(x.read_text()) == strip_timing(y.read_text())
        else:
            assert x.read_bytes() == y.read_bytes()


def test_records_round_trip(tmp_path):
    res = run_phase(ExperimentConfig(**SMALL))
    res.write(tmp_path)
    header = (tmp_path / "records.csv").read_text().splitlines()[0]
    assert tuple(header.split(",")) == CSV_COLUMNS
    back = read_records_csv(tmp_path / "records.csv")
    assert back == res.records
    res.write(tmp_path / "j", "json")
    rows = json.loads((tmp_path / "j" / "records.json").read_text())
    assert [TrialRecord.from_row(r) for r in rows] == res.records


def test_validation_catches_inconsistent_rows():
    good = TrialRecord("phase", 0, 1, 10, 20, 10, 2, 1, "l21", "expander", True, 1e-6, 1e-6,
                       0.0, 1.0, 5, True)
    bad = TrialRecord("phase", 0, 1, 10, 20, 10, 2, 1, "l21", "expander", True, 1e-3, 1e-3,
                      0.0, 1.0, 5, True)
    neg = TrialRecord("phase", 0, 1, 10, 20, 10, 2, 1, "l21", "expander", False, 1e-3, 1e-3,
                      0.0, -1.0, 5, True)
    assert validate_records([good, bad, neg]) == [bad, neg]
    assert summarize([good])[0]["success_rate"] == "1.0"


def test_strip_timing():
    text = "a,time_ms,b\n1,2.5,3\n"
    assert strip_timing(text) == "a,b\n1,3\n"


def test_wall_clock_cap_counts_as_failure():
    cfg = ExperimentConfig(**{**SMALL, "n_grid": (40,), "monte_carlo": 1}, wall_clock_cap=1e-6,
                           solver=SolverConfig(rel_tol=1e-14, max_iter=10**6))
    res = run_phase(cfg)
    assert not any(r.success for r in res.records)


def test_timing_dense_budget_refusal():
    cfg = ExperimentConfig(experiment="timing", p=10000, M=1000, k=30, matrix_kind="both",
                           objective="l21", dense_budget=10**6)
    with pytest.raises(ResourceError, match="budget"):
        run_timing(cfg)


def test_timing_small(tmp_path):
    cfg = ExperimentConfig(experiment="timing", p=600, M=60, k=3, matrix_kind="both",
                           objective="l21", monte_carlo=2)
    res = run_timing(cfg)
    assert {r.matrix for r in res.records} == {"expander", "gaussian"}
    assert "240/l21" in res.timing["speedup"]
    paths = res.write(tmp_path)
    assert (tmp_path / "timing.json").exists() and len(paths) == 4
    assert "speedup" not in (tmp_path / "metadata.json").read_text()


def test_matvec_cost_ratio_exceeds_ten():
    assert matvec_cost_ratio(10**4, 4000, 11, repeats=10) > 10


def test_identity_cov_sketch_is_exact():
    cfg = CovSketchConfig(sqrt_p=8, sqrt_n=8, q=500, k=2, sketch=identity_sketch(8),
                          solver=SolverConfig(rel_tol=1e-14, max_iter=50000))
    rep = run_cov_sketch(cfg)
    assert rep.err_l2 <= 1e-10 * math.sqrt(64)
    assert rep.recall == 1.0


def test_kronecker_consistency_small():
    base = construct_random(6, 4, 2, 11)
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((6, 6))
    Sz = Z @ Z.T
    K = np.kron(base.to_dense(), base.to_dense()).astype(float)
    Xh = base.to_dense().astype(float)
    lhs = tensor_matvec(TensorExpander(base), Sz.ravel(order="F"))
    np.testing.assert_allclose(lhs, K @ Sz.ravel(order="F"), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(lhs, (Xh @ Sz @ Xh.T).ravel(order="F"), rtol=1e-12, atol=1e-12)


def test_planted_covariance_spd():
    rng = np.random.default_rng(0)
    S, lam, boost = planted_covariance(16, [1, 5], 3.0, rng)
    assert np.allclose(S, S.T) and lam >= 0.1 - 1e-12
    assert np.linalg.eigvalsh(S)[0] == pytest.approx(lam)
    # off-planted, off-diagonal entries are zero
    mask = np.ones((16, 16), bool)
    mask[:, [1, 5]] = mask[[1, 5], :] = False
    np.fill_diagonal(mask, False)
    assert not S[mask].any()


def test_cov_sketch_config_errors():
    with pytest.raises(ConfigError):
        CovSketchConfig(sqrt_p=8, sqrt_n=10)
    with pytest.raises(ConfigError):
        CovSketchConfig(sqrt_p=8, sqrt_n=4, cov_group_g=3)
    with pytest.raises(ConfigError):
        CovSketchConfig(q=0)


@pytest.mark.slow
def test_cov_sketch_recall_over_ten_seeds():
    recall = [run_cov_sketch(CovSketchConfig(seed=s)).recall for s in range(10)]
    assert np.mean(recall) >= 0.9
    # regression data from the first run
    assert np.round(recall, 6).tolist() == [1, 1, 1, 1, 0.666667, 1, 1, 1, 1, 1]


def test_synthetic_frame_and_psnr():
    rng = np.random.default_rng(0)
    f = synthetic_frame(32, 3, rng)
    assert f.shape == (1024,) and f.min() >= 0 and f.max() <= 1 and f.any()
    assert psnr(f, f) == math.inf
    assert psnr(np.zeros(4), np.full(4, 0.1)) == pytest.approx(20.0)


def test_run_image_small():
    rows = run_image(ImageConfig(side=16, matrix_kind="expander", objective="l21", d=6))
    assert len(rows) == 1 and rows[0]["n"] == math.ceil(0.3 * 256)
    with pytest.raises(ConfigError):
        ImageConfig(side=15, g=4)


def test_theory_empty_instances_warns():
    cfg = TheoryConfig(instances=0, kernel_samples=10, probability_d_grid=(2,),
                       probability_trials=5)
    with pytest.warns(UserWarning, match="vacuously"):
        bundle = run_verify_theory(cfg)
    assert bundle["summary"]["passed"] and bundle["cases"] == []


def test_theory_small_bundle_passes():
    cfg = TheoryConfig(k_values=(1,), instances=4, kernel_samples=50, probability_d_grid=(2,),
                       probability_trials=5)
    bundle = run_verify_theory(cfg)
    s = bundle["summary"]
    assert s["theorem_instances"] == 4 and s["corollary_instances"] == 4
    assert s["violations"] == 0
    assert bundle["epsilon_source"] == "certified"
    json.dumps(bundle)


def test_theory_corrupted_matrix_is_flagged():
    X = construct_random(60, 4000, 3, 0)
    cols = X.columns.copy()
    cols[3] = cols[0]  # column 3 (group 1) duplicates column 0 (group 0)
    bad = BipartiteExpander(4000, 60, 3, cols)
    cfg = TheoryConfig(k_values=(2,), instances=200, noisy=False, matrix=bad, epsilon=0.0556,
                       kernel_samples=100, probability_d_grid=(), probability_trials=1)
    bundle = run_verify_theory(cfg)
    assert bundle["epsilon_source"] == "asserted"
    assert bundle["summary"]["violations"] > 0
    with pytest.raises(ConfigError):
        TheoryConfig(matrix=bad)
