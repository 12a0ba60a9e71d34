import numpy as np
import pytest
from numpy.testing import assert_allclose

from genkit.data import RoleMap, StackedDataset
from genkit.errors import DegenerateWeightsError, EstimationError, OverlapError, ValidationError
from genkit.estimators import (estimate_sate, estimate_tate_outcome_model, estimate_tate_weighted,
                               membership_weights)
from genkit.sensitivity import (USensitivitySpec, VSensitivitySpec, full_weighting_weights,
                                parse_grid, run_u, run_v, sens_u_bias_formula,
                                sens_u_weighting_plus_bias, sens_v_full_weighting,
                                sens_v_outcome_model, sens_v_weighted_outcome_model,
                                v_outcome_formula)


def make_data(t, y, rct, target):
    """``rct``/``target`` map column -> values; V columns are absent from ``target``."""
    n1, n0 = len(t), len(next(iter(target.values())))
    nan0 = np.full(n0, np.nan)
    covs = {k: np.r_[v, target.get(k, nan0)] for k, v in rct.items()}
    return StackedDataset(s=np.r_[np.ones(n1), np.zeros(n0)], t=np.r_[t, nan0],
                          y=np.r_[y, nan0], covariates=covs)


def binary_zv_world(rng, n1=400, n0=1000, effect=None, noise=1.0,
                    pz=(0.4, 0.6), pv1=(0.3, 0.5), pv0=(0.6, 0.7)):
    """Binary Z and V; returns (data, true TATE by enumeration).

    pz = (P(Z=1|S=1), P(Z=1|S=0)); pv1[z] = P(V=1|S=1,Z=z); pv0[z] = P(V=1|S=0,Z=z).
    """
    effect = effect or (lambda z, v: 1.0 + 0.5 * z + 0.8 * v - 0.3 * z * v)
    z1 = (rng.random(n1) < pz[0]).astype(float)
    v1 = (rng.random(n1) < np.where(z1 == 1, pv1[1], pv1[0])).astype(float)
    t = (rng.random(n1) < 0.5).astype(float)
    y = 0.2 * z1 + 0.3 * v1 + t * effect(z1, v1) + rng.normal(0, noise, n1)
    z0 = (rng.random(n0) < pz[1]).astype(float)
    truth = sum(
        (pz[1] if z else 1 - pz[1]) * (pv0[z] if v else 1 - pv0[z]) * effect(z, v)
        for z in (0, 1) for v in (0, 1))
    return make_data(t, y, {"z": z1, "v": v1}, {"z": z0}), truth


ROLES_ZV = RoleMap({"z": "Z", "v": "V"})


# --------------------------------------------------------------------------- #
# Formula level
# --------------------------------------------------------------------------- #


class TestFormula:
    def test_application_coefficients(self):
        # race and cigarettes/day are observed in the target; addiction score is not
        zbar = [67 / 934, 17.6]
        res = v_outcome_formula([-6.15, -4.09, -0.60, 2.37], None, zbar, [3.0, 5.0])
        assert_allclose(res.tate, [-9.8934, -5.1534], atol=5e-5)
        res = v_outcome_formula([-3.70, -4.49, -0.55, 1.77], None, zbar, [3.0, 5.0])
        assert_allclose(res.tate, [-8.3921, -4.8521], atol=5e-5)
        assert np.all(np.isnan(res.ci_lower))

    def test_zero_vt_coefficient_is_constant(self):
        cov = np.diag([0.04, 0.01, 0.0025])
        res = v_outcome_formula([-2.0, 1.0, 0.0], cov, [0.3], np.linspace(0, 10, 11), 0.95)
        assert_allclose(res.tate, -2.0 + 0.3, rtol=0, atol=1e-14)

    def test_ci_width_minimised_at_quadratic_minimiser(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        cov = a @ a.T / 10
        zbar = 0.4
        grid = np.linspace(-5, 5, 2001)
        res = v_outcome_formula([1.0, 0.5, -0.2], cov, [zbar], grid, 0.95)
        c = np.column_stack([np.ones_like(grid), np.full_like(grid, zbar), grid])
        quad = np.einsum("ij,jk,ik->i", c, cov, c)
        assert_allclose((res.ci_upper - res.ci_lower) / 2, 1.959963984540054 * np.sqrt(quad),
                        rtol=1e-12)
        v_star = -(cov[2, 0] + cov[2, 1] * zbar) / cov[2, 2]
        best = grid[np.argmin(res.ci_upper - res.ci_lower)]
        assert abs(best - v_star) <= (grid[1] - grid[0])


# --------------------------------------------------------------------------- #
# V case: outcome model
# --------------------------------------------------------------------------- #


class TestVOutcomeModel:
    def test_grid_and_columns(self, application_data, application_roles):
        spec = VSensitivitySpec(grid=parse_grid("3:5:101"))
        res = sens_v_outcome_model(application_data, application_roles, spec)
        assert len(res) == 101
        assert res.header == ["mean_cigs_target", "tate", "ci_lower", "ci_upper"]
        assert np.all(res.ci_lower <= res.tate) and np.all(res.tate <= res.ci_upper)

    def test_default_grid_spans_rct_range(self, application_data, application_roles):
        res = sens_v_outcome_model(application_data, application_roles)
        v = application_data.rct_column("cigs")
        assert len(res) == 101
        assert res.grid[0, 0] == v.min() and res.grid[-1, 0] == v.max()

    def test_affine_in_grid(self, application_data, application_roles):
        spec = VSensitivitySpec(grid=[3.0, 3.7, 4.4])
        tate = sens_v_outcome_model(application_data, application_roles, spec).tate
        assert (tate[2] - tate[1]) == pytest.approx(tate[1] - tate[0], abs=1e-10)

    def test_matches_formula_on_fitted_coefficients(self, application_data, application_roles):
        res = sens_v_outcome_model(application_data, application_roles,
                                   VSensitivitySpec(grid=[4.0]))
        b = res.metadata["terms"]
        zbar = application_data.target_column("black").mean()
        assert res.tate[0] == pytest.approx(b["T"] + b["black:T"] * zbar + b["cigs:T"] * 4.0)

    def test_zero_vt_equals_outcome_model_tate(self):
        # response built so the V and V-by-T coefficients are exactly zero
        rng = np.random.default_rng(1)
        n = 300
        z, v = (rng.random(n) < 0.4).astype(float), rng.normal(size=n)
        t = (rng.random(n) < 0.5).astype(float)
        full = np.column_stack([np.ones(n), t, z, v, z * t, v * t])
        noise = rng.normal(size=n)
        noise -= full @ np.linalg.lstsq(full, noise, rcond=None)[0]
        y = 1 + 2 * t + 0.5 * z - 1.5 * z * t + noise
        data = make_data(t, y, {"z": z, "v": v}, {"z": (rng.random(800) < 0.6).astype(float)})
        res = sens_v_outcome_model(data, ROLES_ZV, VSensitivitySpec(grid=[-1.0, 0.0, 1.0]))
        base, _ = estimate_tate_outcome_model(data, RoleMap({"z": "Z"}))
        assert_allclose(res.tate, base.point, atol=1e-10)

    def test_no_shift_reproduces_sate(self):
        # identical covariates in both arms and identical Z distribution in both samples
        rng = np.random.default_rng(2)
        m = 150
        z = (rng.random(m) < 0.5).astype(float)
        v = rng.normal(size=m)
        zz, vv = np.r_[z, z], np.r_[v, v]
        t = np.r_[np.ones(m), np.zeros(m)]
        y = 1 + zz + vv + t * (2 + zz - vv) + rng.normal(size=2 * m)
        data = make_data(t, y, {"z": zz, "v": vv}, {"z": np.r_[z, z, z]})
        res = sens_v_outcome_model(data, ROLES_ZV, VSensitivitySpec(grid=[vv.mean()]))
        assert res.tate[0] == pytest.approx(estimate_sate(data).point, abs=1e-10)

    def test_grid_outside_rct_range(self, application_data, application_roles):
        with pytest.raises(OverlapError, match="RCT range"):
            sens_v_outcome_model(application_data, application_roles,
                                 VSensitivitySpec(grid=[0.0, 20.0]))
        res = sens_v_outcome_model(application_data, application_roles,
                                   VSensitivitySpec(grid=[0.0, 20.0], allow_extrapolation=True))
        assert any(w.startswith("extrapolation override") for w in res.warnings)

    def test_three_way_term_rejected(self, application_data):
        data = application_data.with_covariates(
            {"black_cigs": application_data.column("black") * application_data.column("cigs")})
        roles = RoleMap({"age": "X", "black": "Z", "cigs": "V", "black_cigs": "V"})
        spec = VSensitivitySpec(grid=[[4.0, 0.5]])
        with pytest.raises(ValidationError, match="three-way"):
            sens_v_outcome_model(data, roles, spec)
        ok = sens_v_outcome_model(data, roles, VSensitivitySpec(grid=[[4.0, 0.5]],
                                                                allow_three_way=True))
        assert ok.parameter_names == ("mean_cigs_target", "mean_black_cigs_target")

    def test_needs_v_column(self, application_data):
        with pytest.raises(ValidationError, match="V-role"):
            sens_v_outcome_model(application_data, RoleMap({"age": "X", "black": "Z"}))

    def test_csv_output(self, application_data, application_roles, tmp_path):
        res = sens_v_outcome_model(application_data, application_roles,
                                   VSensitivitySpec(grid=[3.0, 4.0]))
        text = res.to_csv(tmp_path / "g.csv")
        lines = text.splitlines()
        assert lines[0] == "mean_cigs_target,tate,ci_lower,ci_upper"
        assert len(lines) == 3
        assert (tmp_path / "g.csv").read_text() == text


# --------------------------------------------------------------------------- #
# V case: weighted outcome model
# --------------------------------------------------------------------------- #


class TestVWeightedOutcomeModel:
    def test_unit_weights_match_outcome_model(self):
        rng = np.random.default_rng(3)
        data, _ = binary_zv_world(rng)
        # target sample with exactly the RCT Z multiset -> saturated odds are 1
        z1 = data.rct_column("z")
        same = make_data(data.rct_t, data.rct_y, {"z": z1, "v": data.rct_column("v")},
                         {"z": z1.copy()})
        spec = VSensitivitySpec(method="weighted-outcome-model", grid=[0.2, 0.6])
        a = sens_v_weighted_outcome_model(same, ROLES_ZV, spec)
        b = sens_v_outcome_model(same, ROLES_ZV, VSensitivitySpec(grid=[0.2, 0.6]))
        assert_allclose(a.tate, b.tate, atol=1e-8)
        assert a.metadata["covariance_kind"] == "sandwich"

    def test_precomputed_weights(self, application_data, application_roles):
        w = membership_weights(application_data, ["black"], roles=application_roles)
        spec = VSensitivitySpec(method="weighted-outcome-model", grid=[4.0])
        a = sens_v_weighted_outcome_model(application_data, application_roles, spec, w)
        b = sens_v_weighted_outcome_model(application_data, application_roles, spec)
        assert a.tate[0] == b.tate[0]
        assert a.metadata["weight_formula"] == "odds-given-Z"

    def test_balance_warning(self, application_data, application_roles):
        spec = VSensitivitySpec(method="weighted-outcome-model", grid=[4.0],
                                weighting_columns=["age"], balance_threshold=1e-12)
        res = sens_v_weighted_outcome_model(application_data, application_roles, spec)
        assert any("SMD" in w for w in res.warnings)

    def test_v_weighting_column_rejected(self, application_data, application_roles):
        spec = VSensitivitySpec(method="weighted-outcome-model", grid=[4.0],
                                weighting_columns=["cigs"])
        with pytest.raises(ValidationError, match="role V"):
            sens_v_weighted_outcome_model(application_data, application_roles, spec)


# --------------------------------------------------------------------------- #
# V case: full weighting
# --------------------------------------------------------------------------- #


class TestFullWeighting:
    def test_hand_weight_eight(self):
        # Z=1: 20 RCT rows (6 with V=1) and 80 target rows -> odds 4; p1=.6 vs .3 -> factor 2
        z1 = np.r_[np.ones(20), np.zeros(40)]
        v1 = np.r_[np.ones(6), np.zeros(14), np.ones(10), np.zeros(30)]
        t = np.tile([1.0, 0.0], 30)
        data = make_data(t, np.arange(60.0), {"z": z1, "v": v1},
                         {"z": np.r_[np.ones(80), np.zeros(40)]})
        w = full_weighting_weights(data, "z", "v", p1=0.6, p0=0.25).weights
        assert_allclose(w[(z1 == 1) & (v1 == 1)], 8.0, rtol=1e-12)
        assert_allclose(w[(z1 == 1) & (v1 == 0)], 4.0 * 0.4 / 0.7, rtol=1e-12)
        assert_allclose(w[(z1 == 0) & (v1 == 1)], 1.0 * 0.25 / 0.25, rtol=1e-12)

    def test_no_shift_equals_z_weighting(self):
        rng = np.random.default_rng(4)
        data, _ = binary_zv_world(rng)
        z, v = data.rct_column("z"), data.rct_column("v")
        p1, p0 = v[z == 1].mean(), v[z == 0].mean()
        res = sens_v_full_weighting(data, ROLES_ZV, VSensitivitySpec(
            method="full-weighting", grid=[p1], grid2=[p0]))
        ref = estimate_tate_weighted(data, membership_weights(data, ["z"]))
        assert res.tate[0] == pytest.approx(ref.point, abs=1e-10)
        assert (res.ci_upper[0] - res.tate[0]) == pytest.approx(ref.ci[1] - ref.point, abs=1e-10)

    def test_each_grid_point_matches_explicit_weighting(self):
        rng = np.random.default_rng(5)
        data, _ = binary_zv_world(rng)
        res = sens_v_full_weighting(data, ROLES_ZV, VSensitivitySpec(
            method="full-weighting", grid=[0.2, 0.9], grid2=[0.1, 0.5, 0.8]))
        assert len(res) == 6
        for (p1, p0), tate, hi in zip(res.grid, res.tate, res.ci_upper):
            ref = estimate_tate_weighted(data, full_weighting_weights(data, "z", "v", p1, p0))
            assert tate == pytest.approx(ref.point, abs=1e-10)
            assert hi == pytest.approx(ref.ci[1], abs=1e-10)

    def test_enumeration_oracle(self):
        rng = np.random.default_rng(6)
        data, truth = binary_zv_world(rng, n1=50_000, n0=50_000, noise=0.2)
        res = sens_v_full_weighting(data, ROLES_ZV, VSensitivitySpec(
            method="full-weighting", grid=[0.7], grid2=[0.6]))
        assert abs(res.tate[0] - truth) < 1e-2

    def test_empty_cell(self):
        z1 = np.r_[np.ones(10), np.zeros(10)]
        v1 = np.r_[np.ones(10), np.zeros(5), np.ones(5)]      # no (Z=1, V=0) rows
        data = make_data(np.tile([1.0, 0.0], 10), np.arange(20.0), {"z": z1, "v": v1},
                         {"z": np.r_[np.ones(5), np.zeros(5)]})
        with pytest.raises(EstimationError):
            sens_v_full_weighting(data, ROLES_ZV, VSensitivitySpec(method="full-weighting",
                                                                   grid=[0.5], grid2=[0.5]))

    def test_probability_grid_bounds(self):
        data, _ = binary_zv_world(np.random.default_rng(7))
        with pytest.raises(ValidationError, match=r"\[0, 1\]"):
            sens_v_full_weighting(data, ROLES_ZV, VSensitivitySpec(method="full-weighting",
                                                                   grid=[1.2], grid2=[0.5]))

    def test_zero_weight_arm(self):
        data, _ = binary_zv_world(np.random.default_rng(8))
        # p1 = p0 = 0 removes every V=1 row; still estimable. Force an arm to zero:
        t = np.where(data.rct_column("v") == 1, 1.0, 0.0)
        d2 = make_data(t, data.rct_y, {"z": data.rct_column("z"), "v": data.rct_column("v")},
                       {"z": data.target_column("z")})
        with pytest.raises(DegenerateWeightsError):
            sens_v_full_weighting(d2, ROLES_ZV, VSensitivitySpec(method="full-weighting",
                                                                 grid=[0.0], grid2=[0.0]))

    def test_requires_binary(self, application_data, application_roles):
        with pytest.raises(ValidationError):
            sens_v_full_weighting(application_data, application_roles,
                                  VSensitivitySpec(method="full-weighting", grid=[0.5]))

    def test_default_grid_is_long_format(self):
        data, _ = binary_zv_world(np.random.default_rng(9))
        res = run_v(data, ROLES_ZV, VSensitivitySpec(method="full-weighting"))
        assert res.grid.shape == (101 * 101, 2)


# --------------------------------------------------------------------------- #
# U case
# --------------------------------------------------------------------------- #


def u_world(rng, n1=400, n0=2000, beta_ut=1.0, gap=0.5):
    """Observed X, Z plus an omitted standardized moderator U independent of both."""
    x1, z1 = rng.normal(size=n1), (rng.random(n1) < 0.3).astype(float)
    u1 = rng.normal(size=n1)
    t = (rng.random(n1) < 0.5).astype(float)
    y = x1 + z1 + u1 + t * (1.0 + 2.0 * z1 + beta_ut * u1) + rng.normal(0, 1, n1)
    x0, z0 = rng.normal(0.3, 1, n0), (rng.random(n0) < 0.6).astype(float)
    u0 = rng.normal(gap, 1, n0)
    truth = float(np.mean(1.0 + 2.0 * z0 + beta_ut * u0))
    return make_data(t, y, {"x": x1, "z": z1}, {"x": x0, "z": z0}), truth


ROLES_XZ = RoleMap({"x": "X", "z": "Z"})


class TestUBiasFormula:
    def test_hand_case(self):
        t = np.array([1.0, 1.0, 0.0, 0.0])
        data = make_data(t, [-7.0, -9.0, 0.0, 0.0], {"x": [0.0, 1.0, 0.0, 1.0]}, {"x": [0.5, 0.5]})
        res = sens_u_bias_formula(data, RoleMap({"x": "X"}),
                                  USensitivitySpec(beta_ut=[1.0], delta_u=[0.5]))
        assert res.metadata["z_adjusted_tate"] == pytest.approx(-8.0, abs=1e-12)
        assert res.tate[0] == pytest.approx(-7.5, abs=1e-12)

    def test_zero_parameters_reduce_to_z_adjusted(self):
        data, _ = u_world(np.random.default_rng(10))
        res = sens_u_bias_formula(data, ROLES_XZ, USensitivitySpec(beta_ut=[0.0, 1.5],
                                                                   delta_u=[-1.0, 0.0]))
        base = res.metadata["z_adjusted_tate"]
        zero = (res.grid[:, 0] == 0) | (res.grid[:, 1] == 0)
        assert_allclose(res.tate[zero], base, rtol=0, atol=0)
        meta = res.metadata
        gap = meta["z_gap_target_minus_rct"]["z"]
        assert base == pytest.approx(meta["sate"] + meta["beta_zt"]["z:T"] * gap)

    def test_grid_order_and_size(self):
        data, _ = u_world(np.random.default_rng(11))
        spec = USensitivitySpec(beta_ut=parse_grid("-2:2:41"), delta_u=parse_grid("-1:1:21"))
        res = run_u(data, ROLES_XZ, spec)
        assert len(res) == 861
        assert res.grid[0].tolist() == [-2.0, -1.0] and res.grid[1].tolist() == [-2.0, -0.9]

    def test_affine_in_each_parameter(self):
        data, _ = u_world(np.random.default_rng(12))
        res = sens_u_bias_formula(data, ROLES_XZ, USensitivitySpec(beta_ut=[-1.0, 0.5, 2.0],
                                                                   delta_u=[0.3]))
        b, y = res.grid[:, 0], res.tate
        assert (y[2] - y[1]) / (b[2] - b[1]) == pytest.approx((y[1] - y[0]) / (b[1] - b[0]),
                                                              abs=1e-10)

    def test_se_uses_joint_covariance(self):
        # with no Z shift the interval is the SATE interval
        rng = np.random.default_rng(13)
        data, _ = u_world(rng)
        z1 = data.rct_column("z")
        same = make_data(data.rct_t, data.rct_y, {"x": data.rct_column("x"), "z": z1},
                         {"x": data.rct_column("x"), "z": z1})
        res = sens_u_bias_formula(same, ROLES_XZ, USensitivitySpec(beta_ut=[0.0], delta_u=[0.0]))
        sate = estimate_tate_weighted(same, np.ones(same.n_rct))
        assert res.tate[0] == pytest.approx(sate.point, abs=1e-12)
        assert res.metadata["std_error"] == pytest.approx(sate.std_error, rel=1e-10)

    def test_simulation_oracle(self):
        rng = np.random.default_rng(14)
        errors = []
        for _ in range(200):
            data, truth = u_world(rng)
            res = sens_u_bias_formula(data, ROLES_XZ, USensitivitySpec(beta_ut=[1.0],
                                                                       delta_u=[0.5]))
            errors.append(res.tate[0] - truth)
        errors = np.array(errors)
        assert abs(errors.mean()) < 3 * errors.std(ddof=1) / np.sqrt(errors.size)


class TestUWeightingPlusBias:
    def test_zero_parameters_equal_xzate(self):
        data, _ = u_world(np.random.default_rng(15))
        spec = USensitivitySpec(beta_ut=[0.0], delta_u=[0.0],
                                adjustment="weighting-plus-bias-formula")
        res = sens_u_weighting_plus_bias(data, ROLES_XZ, spec)
        w = membership_weights(data, ["x", "z"], roles=ROLES_XZ)
        xz = estimate_tate_weighted(data, w, estimand="xzATE")
        assert res.tate[0] == pytest.approx(xz.point, abs=1e-12)
        assert res.ci_upper[0] == pytest.approx(xz.ci[1], abs=1e-12)

    def test_perfect_balance_variants_coincide(self):
        data, _ = u_world(np.random.default_rng(16))
        roles = RoleMap({"z": "Z"})
        base = dict(beta_ut=[0.0, 1.0], delta_u=[0.5], adjustment="weighting-plus-bias-formula",
                    weighting_columns=["z"])
        plain = sens_u_weighting_plus_bias(data, roles, USensitivitySpec(**base))
        fixed = sens_u_weighting_plus_bias(
            data, roles, USensitivitySpec(**base, residual_z_gap_correction=True))
        assert_allclose(fixed.tate, plain.tate, atol=1e-8)
        assert np.all(np.isnan(fixed.ci_lower)) and np.all(np.isnan(fixed.ci_upper))

    def test_correction_uses_residual_gap(self):
        data, _ = u_world(np.random.default_rng(17))
        spec = USensitivitySpec(beta_ut=[0.0], delta_u=[0.0],
                                adjustment="weighting-plus-bias-formula",
                                residual_z_gap_correction=True, weighting_columns=["x"])
        res = sens_u_weighting_plus_bias(data, ROLES_XZ, spec)
        meta = res.metadata
        expect = meta["xzATE"] + meta["beta_zt"]["z:T"] * meta["z_gap_after_weighting"]["z"]
        assert res.tate[0] == pytest.approx(expect)

    def test_simulation_oracle(self):
        rng = np.random.default_rng(18)
        errors = []
        spec = USensitivitySpec(beta_ut=[1.0], delta_u=[0.5],
                                adjustment="weighting-plus-bias-formula")
        for _ in range(150):
            data, truth = u_world(rng)
            errors.append(sens_u_weighting_plus_bias(data, ROLES_XZ, spec).tate[0] - truth)
        errors = np.array(errors)
        assert abs(errors.mean()) < 3 * errors.std(ddof=1) / np.sqrt(errors.size)

    def test_v_columns_dropped_with_note(self, application_data, application_roles):
        spec = USensitivitySpec(beta_ut=[0.0], delta_u=[0.0],
                                adjustment="weighting-plus-bias-formula")
        res = sens_u_weighting_plus_bias(application_data, application_roles, spec)
        assert any("ignored" in w for w in res.warnings)
        assert "cigs" not in res.metadata["weighting_columns"]


# --------------------------------------------------------------------------- #
# Null-heterogeneity coverage
# --------------------------------------------------------------------------- #


def test_null_world_coverage_all_methods():
    """Constant effect: every method's interval should cover it at about the nominal rate."""
    rng = np.random.default_rng(19)
    roles = RoleMap({"x": "X", "z": "Z", "v": "V"})
    n_sims, effect = 300, 2.0
    hits = {}
    for _ in range(n_sims):
        n1, n0 = 300, 1000
        x1 = rng.normal(size=n1)
        z1 = (rng.random(n1) < 0.4).astype(float)
        v1 = (rng.random(n1) < np.where(z1 == 1, 0.5, 0.3)).astype(float)
        t = (rng.random(n1) < 0.5).astype(float)
        y = x1 + z1 + v1 + effect * t + rng.normal(size=n1)
        data = make_data(t, y, {"x": x1, "z": z1, "v": v1},
                         {"x": rng.normal(0.2, 1, n0), "z": (rng.random(n0) < 0.6).astype(float)})
        results = {
            "outcome-model": run_v(data, roles, VSensitivitySpec(grid=[0.3, 0.7])),
            "weighted-outcome-model": run_v(data, roles, VSensitivitySpec(
                method="weighted-outcome-model", grid=[0.3, 0.7])),
            "full-weighting": run_v(data, roles, VSensitivitySpec(
                method="full-weighting", grid=[0.4, 0.7], grid2=[0.3])),
            "bias-formula": run_u(data, roles, USensitivitySpec(beta_ut=[0.0, 1.0],
                                                                delta_u=[0.0])),
            "weighting-plus-bias-formula": run_u(data, roles, USensitivitySpec(
                beta_ut=[0.0, 1.0], delta_u=[0.0], adjustment="weighting-plus-bias-formula")),
        }
        for name, res in results.items():
            covered = (res.ci_lower <= effect) & (effect <= res.ci_upper)
            hits.setdefault(name, []).append(covered)
    floor = 0.95 - 3 * np.sqrt(0.95 * 0.05 / n_sims)
    for name, rows in hits.items():
        rate = np.mean(rows, axis=0)
        assert np.all(rate >= floor), (name, rate)
