"""Acceptance criteria, one test per criterion at its stated tolerance.

The terminal summary (see conftest) prints one PASS/FAIL line apiece.
"""

import json

import numpy as np
import pytest

from freqlens.cli import main
from freqlens.freqloss import LossConfig, case_mixture_coefficient, case_weights
from freqlens.masking import RatioSchedule
from freqlens.numopt import lasso_objective, pinv, powell_minimize
from freqlens.rng import substream
from freqlens.separation import (
    FeatureSet,
    fit_hyperplane,
    fit_robust,
    fit_theta,
    residualize,
    rho_index,
)
from freqlens.specstats import (
    Chi2Spec,
    adaptive_quad,
    bessel_i,
    build_scaling_table,
    focal_expectation,
    loss_scale,
    nc_chi2_pdf,
)
from freqlens.spectra import magnitude_spectrum, normalize_grid, read_flsg, write_flsg
from freqlens.toymae import (
    TrainState,
    backward,
    case_error_report,
    forward,
    gmu_backward,
    gmu_fuse,
    init_gmu,
    init_model,
    load_checkpoint,
    save_checkpoint,
    synthetic_spectra,
    train,
)
from freqlens.toymae import _loss_and_grad_blocks

R_GRID = np.round(np.arange(0.05, 0.951, 0.05), 10)
CHI2_TUPLES = [(2.0, 0.0), (4.0, 2.0), (16.0, 8.0), (256.0, 10.0)]


def test_criterion_01_combinatorics():
    n = 14
    half = n * n / 2
    for r in R_GRID:
        p1, p2, p3 = r**2, 2 * r * (1 - r), (1 - r) ** 2
        assert abs(p1 + p2 + p3 - 1.0) < 1e-12
        e = half * np.array([p1, p2, p3])
        assert abs(e.sum() - half) < 1e-12 * half
        assert abs(sum(case_weights(float(r)).alpha) - 1.0) < 1e-12

    # Empirical pair-state frequencies over 10^4 masks (vectorized Bernoulli).
    m = 10_000
    pairs = n * n // 2
    flat = np.arange(n * n)
    leaders = flat < (n * n - 1 - flat)
    for r in (0.15, 0.3):
        rng = substream(101, int(r * 100))
        masks = rng.random((m, n * n)) < r
        partners = masks[:, ::-1]
        both = (masks & partners)[:, leaders].sum()
        one = (masks ^ partners)[:, leaders].sum()
        none = (~masks & ~partners)[:, leaders].sum()
        freq = np.array([both, one, none]) / (m * pairs)
        expected = np.array([r**2, 2 * r * (1 - r), (1 - r) ** 2])
        sigma = np.sqrt(expected * (1 - expected) / (m * pairs))
        assert (np.abs(freq - expected) < 3 * sigma).all()


def test_criterion_02_mixture_coefficient():
    for r in R_GRID:
        w = case_weights(float(r))
        term_by_term = sum(pt * at for pt, at in zip(w.p, w.alpha))
        closed_form = 6 * r**2 * (1 - r) ** 2 / (3 * r**2 - 3 * r + 2)
        assert abs(term_by_term - closed_form) < 1e-12
        assert abs(case_mixture_coefficient(float(r), "derived") - closed_form) < 1e-12
        assert abs(case_mixture_coefficient(float(r), "paper") - closed_form / 2.0) < 1e-12


def test_criterion_03_special_functions():
    for k, lam in CHI2_TUPLES:
        spec = Chi2Spec(k=k, lambda_nc=lam)
        hi = spec.mean + 14.0 * np.sqrt(spec.variance) + 20.0
        pdf = lambda x: nc_chi2_pdf(spec, x)
        total = adaptive_quad(pdf, 0.0, hi)
        mean = adaptive_quad(lambda x: x * pdf(x), 0.0, hi)
        var = adaptive_quad(lambda x: (x - spec.mean) ** 2 * pdf(x), 0.0, hi)
        assert abs(total - 1.0) < 1e-6
        assert abs(mean - spec.mean) < 1e-4
        assert abs(var - spec.variance) < 1e-4
    nu, x = 2.0, 3.0
    residual = bessel_i(nu - 1, x) - bessel_i(nu + 1, x) - (2 * nu / x) * bessel_i(nu, x)
    assert abs(residual) < 1e-9


def _chi2_definition_draws(k: float, lam: float, size: int, rng) -> np.ndarray:
    """Sampling oracle from the definition: the squared norm of a normal
    vector whose first coordinate is shifted by sqrt(lambda)."""
    total = np.zeros(size)
    delta = np.sqrt(lam)
    for i in range(int(k)):
        z = rng.standard_normal(size)
        if i == 0:
            z = z + delta
        total += z * z
    return total


def test_criterion_04_focal_expectation_vs_monte_carlo():
    rng = np.random.default_rng(6)
    for k, lam in CHI2_TUPLES:
        spec = Chi2Spec(k=k, lambda_nc=lam)
        draws = _chi2_definition_draws(k, lam, 1_000_000, rng)
        lhat = np.clip(draws / loss_scale(spec), 1e-6, 1 - 1e-6)
        for gamma in (0.0, 2.0):
            for variant in ("paper", "complement"):
                quad = focal_expectation(spec, gamma, variant)
                if variant == "paper":
                    mc = float(((1 - lhat) ** gamma * np.log(lhat)).mean())
                else:
                    mc = float((lhat**gamma * np.log1p(-lhat)).mean())
                assert quad == pytest.approx(mc, rel=0.01), (k, lam, gamma, variant)


def test_criterion_05_gradients_finite_differences():
    n, w, d = 4, 4, 16
    cfg = LossConfig()
    table = build_scaling_table([0.3], Chi2Spec(k=w * w, lambda_nc=0.0), cfg.gamma, cfg)
    h = 1e-6
    for model_seed in range(5):
        rng = substream(500, model_seed)
        model = init_model(n, w, d, rng)
        model.mask_token[:] = 0.1 * rng.normal(size=w * w)
        patches_grid = synthetic_spectra(1, n * w, seed=600 + model_seed)[0]
        from freqlens.spectra import patchify

        patches = patchify(patches_grid, w)
        from freqlens.masking import sample_mask

        plan = sample_mask(n, 0.3, substream(700, model_seed))
        grads = backward(model, patches, plan, cfg, table, "scaled")

        def loss_of():
            recon = forward(model, patches, plan)
            _raw, scaled, _g, _c = _loss_and_grad_blocks(patches, recon, plan, cfg, table, "scaled")
            return scaled

        for name in ("embed", "mix", "dec", "mask_token"):
            arr = getattr(model, name)
            g = getattr(grads, name)
            for _ in range(20):
                idx = tuple(rng.integers(s) for s in arr.shape)
                orig = arr[idx]
                arr[idx] = orig + h
                up = loss_of()
                arr[idx] = orig - h
                down = loss_of()
                arr[idx] = orig
                fd = (up - down) / (2 * h)
                assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), abs(g[idx]), 1e-8)

        params = init_gmu(5, 7, 6, rng)
        x1, x2 = rng.normal(size=5), rng.normal(size=7)
        dh = rng.normal(size=6)
        gg = gmu_backward(x1, x2, params, dh)

        def gmu_scalar():
            return float(dh @ gmu_fuse(x1, x2, params))

        for name in ("w1", "w2", "wz", "b1", "b2", "bz"):
            arr = getattr(params, name)
            g = getattr(gg, name)
            flat_idx = [tuple(rng.integers(s) for s in arr.shape) for _ in range(20)]
            for idx in flat_idx:
                orig = arr[idx]
                arr[idx] = orig + h
                up = gmu_scalar()
                arr[idx] = orig - h
                down = gmu_scalar()
                arr[idx] = orig
                fd = (up - down) / (2 * h)
                assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), abs(g[idx]), 1e-8)


def test_criterion_06_case_behavior_counterpart_copying():
    side, w, d = 64, 8, 64
    n = side // w
    data = synthetic_spectra(200, side, seed=11)
    model = init_model(n, w, d, substream(42, 0))
    untrained = case_error_report(model, data, 0.3, trials=3, seed=99)
    assert 0.8 <= untrained.e2 / untrained.e1 <= 1.25

    state = TrainState(model=model, lr=2.0, seed=7,
                       schedule=RatioSchedule(levels=(0.3,), seed=7),
                       cfg=LossConfig(), table=None, objective="masked_mae")
    state, _trace = train(state, data, epochs=10)  # 2000 steps
    trained = case_error_report(state.model, data, 0.3, trials=3, seed=99)
    assert trained.e2 < 0.5 * trained.e1


def test_criterion_07_dynamic_ratio_beats_fixed():
    side, w, d = 64, 8, 64
    n = side // w
    cfg = LossConfig()
    table = build_scaling_table([0.3, 0.15, 0.0], Chi2Spec(k=w * w, lambda_nc=0.0),
                                cfg.gamma, cfg)
    data = synthetic_spectra(200, side, seed=11)
    wins = 0
    for seed in (1, 2, 3):
        e_globals = {}
        for label, levels in (("dynamic", (0.3, 0.15, 0.0)), ("fixed", (0.3,))):
            model = init_model(n, w, d, substream(seed, 0))
            state = TrainState(model=model, lr=0.2, seed=seed,
                               schedule=RatioSchedule(levels=levels, seed=seed),
                               cfg=cfg, table=table, objective="scaled")
            state, _ = train(state, data, epochs=10)  # 2000 steps, same budget
            e_globals[label] = case_error_report(state.model, data, 0.0, trials=1,
                                                 seed=99).e_global
        wins += e_globals["dynamic"] < e_globals["fixed"]
    assert wins >= 2


def _planted_instance(seed, d=8, n_real=400, n_fake=400, n_out=20):
    rng = np.random.default_rng(seed)
    normal = np.zeros(d)
    normal[0] = 1.0
    reals = rng.normal(size=(n_real, d)) * 0.5
    reals[:, 0] -= 1.5
    fakes = rng.normal(size=(n_fake, d)) * 0.5
    fakes[:, 0] += 1.5
    outliers = rng.normal(size=(n_out, d)) * 0.5
    outliers[:, 0] = -8.0 + 0.5 * rng.normal(size=n_out)
    fakes = np.vstack([fakes, outliers])
    nf = len(fakes)
    features = np.vstack([reals, fakes])
    labels = np.array([0] * n_real + [1] * nf)
    clusters = np.array(["real"] * n_real + ["G1"] * (nf // 2) + ["G2"] * (nf - nf // 2),
                        dtype=object)
    return FeatureSet(features, labels, clusters), normal


def _angle(u, v):
    c = abs(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return np.degrees(np.arccos(min(c, 1.0)))


def test_criterion_08_robust_fit_beats_ols():
    wins = 0
    for seed in range(20):
        fs, normal = _planted_instance(seed)
        robust = fit_robust(fs)
        ols = fit_hyperplane(fs, np.zeros(len(fs.fake_rows)), kept_fraction=1.0)
        wins += _angle(robust.u_star, normal) < _angle(ols.u_star, normal)
    assert wins >= 15

    fs, _ = _planted_instance(99, n_out=0)
    theta0 = np.zeros(len(fs.fake_rows))
    robust = fit_hyperplane(fs, theta0, kept_fraction=0.8)
    ols = fit_hyperplane(fs, theta0, kept_fraction=1.0)
    assert np.abs(robust.u_star - ols.u_star).max() < 1e-8


def test_criterion_09_solver_equivalence_and_kkt():
    rng = np.random.default_rng(33)
    for trial in range(10):
        n = int(rng.integers(20, 41))
        n_fake = int(rng.integers(6, 12))
        d = int(rng.integers(2, 5))
        features = rng.normal(size=(n, d))
        labels = np.array([0] * (n - n_fake) + [1] * n_fake)
        clusters = np.array(["real"] * (n - n_fake)
                            + ["A"] * (n_fake // 2) + ["B"] * (n_fake - n_fake // 2),
                            dtype=object)
        fs = FeatureSet(features, labels, clusters)
        design, l_tilde = residualize(fs)
        lam = 0.3 * float(np.abs(design.T @ l_tilde).max())
        theta_cd = fit_theta(fs, lam, solver="cd")
        theta_pw = fit_theta(fs, lam, solver="powell")
        obj_cd = lasso_objective(design, l_tilde, theta_cd, lam)
        obj_pw = lasso_objective(design, l_tilde, theta_pw, lam)
        assert abs(obj_cd - obj_pw) < 1e-3, trial

        grad = design.T @ (l_tilde - design @ theta_cd)
        for j in range(len(theta_cd)):
            if theta_cd[j] == 0.0:
                assert abs(grad[j]) <= lam + 1e-6
            else:
                assert abs(grad[j] - np.sign(theta_cd[j]) * lam) <= 1e-6


def test_criterion_10_rho_fixture_invariance_and_sweep():
    # Hand-computed fixture: rho = 2/3.
    features = np.array([[0.0]] * 4 + [[1.0]] * 3 + [[2.0]] * 3)
    labels = np.array([0] * 4 + [1] * 6)
    clusters = np.array(["real"] * 4 + ["A"] * 3 + ["B"] * 3, dtype=object)
    fs = FeatureSet(features, labels, clusters)
    from freqlens.separation import RobustFit

    fit = RobustFit(u_star=np.array([1.0]), theta_star=np.zeros(6), lam=0.0)
    assert rho_index(fs, fit).rho == pytest.approx(2.0 / 3.0, abs=1e-6)

    # Orthogonal-transform invariance of the full pipeline.
    fs2, _ = _planted_instance(5, n_real=80, n_fake=80, n_out=5)
    rho0 = rho_index(fs2, fit_robust(fs2, solver="cd")).rho
    q, _ = np.linalg.qr(np.random.default_rng(6).normal(size=(fs2.d, fs2.d)))
    rotated = FeatureSet(fs2.features @ q, fs2.labels, fs2.clusters)
    rho1 = rho_index(rotated, fit_robust(rotated, solver="cd")).rho
    assert abs(rho0 - rho1) < 1e-6

    # Widening the real-fake gap at fixed cluster spread strictly lowers rho.
    def build(gap, n=120, d=6):
        rng = np.random.default_rng(60)
        reals = rng.normal(size=(n, d)) * 0.4
        fake_a = rng.normal(size=(n, d)) * 0.4
        fake_a[:, 0] += gap
        fake_b = rng.normal(size=(n, d)) * 0.4
        fake_b[:, 0] += gap + 1.0
        return FeatureSet(
            np.vstack([reals, fake_a, fake_b]),
            np.array([0] * n + [1] * (2 * n)),
            np.array(["real"] * n + ["A"] * n + ["B"] * n, dtype=object),
        )

    rhos = [rho_index(build(g), fit_robust(build(g))).rho for g in (1.0, 2.0, 3.0, 4.0, 5.0)]
    assert all(a > b for a, b in zip(rhos, rhos[1:]))


def test_criterion_11_numerics_kernels():
    rng = np.random.default_rng(77)
    for trial in range(50):
        m = int(rng.integers(2, 40))
        n = int(rng.integers(2, 12))
        a = rng.normal(size=(m, n)) * 10.0 ** rng.integers(-2, 3)
        if trial % 3 == 0 and n >= 3:
            a[:, -1] = 2.0 * a[:, 0] - a[:, 1]
        ap = pinv(a)
        nrm = max(np.linalg.norm(a), 1e-300)
        assert np.linalg.norm(a @ ap @ a - a) / nrm < 1e-8
        assert np.linalg.norm(ap @ a @ ap - ap) / max(np.linalg.norm(ap), 1e-300) < 1e-8
        assert np.linalg.norm((a @ ap).T - a @ ap) / max(nrm, 1.0) < 1e-8
        assert np.linalg.norm((ap @ a).T - ap @ a) / max(nrm, 1.0) < 1e-8

    rosen = lambda v: (1 - v[0]) ** 2 + 100 * (v[1] - v[0] ** 2) ** 2
    _x, fx, _ = powell_minimize(rosen, np.array([-1.2, 1.0]))
    assert fx < 1e-8


def test_criterion_12_determinism_and_round_trips(tmp_path):
    config = {
        "version": 1, "seed": 9, "epochs": 2, "lr": 0.15, "side": 64, "patch": 8,
        "embed_dim": 64, "levels": [0.3, 0.15, 0.0],
        "data": {"kind": "synthetic", "count": 50},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(out1)]) == 0
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(out2)]) == 0
    assert (out1 / "checkpoint.ffit").read_bytes() == (out2 / "checkpoint.ffit").read_bytes()

    # FLSG round trip through its reader, bit-exact.
    grid = normalize_grid(magnitude_spectrum(np.random.default_rng(3).random((64, 64)), side=64))
    f1, f2 = tmp_path / "g1.flsg", tmp_path / "g2.flsg"
    write_flsg(grid, f1)
    write_flsg(read_flsg(f1), f2)
    assert f1.read_bytes() == f2.read_bytes()

    # Checkpoint round trip through its reader, bit-exact.
    c1 = out1 / "checkpoint.ffit"
    c2 = tmp_path / "copy.ffit"
    save_checkpoint(load_checkpoint(c1), c2)
    assert c1.read_bytes() == c2.read_bytes()
