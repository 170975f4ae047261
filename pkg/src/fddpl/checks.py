"""Fast self-contained oracle checks behind the ``check`` CLI subcommand.

Each check pits an implementation path against an independent reference
(elementwise formulas, explicit Kronecker lifts, finite differences,
closed forms) on small random instances.  The full test suite covers the
same ground at scale; this runs in seconds as a smoke screen.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import channel_model as cm
from . import estimators, fileio, gmm, pilot_design as pd
from .linalg import complex_randn, herm


def _random_stats(rng, n_tx, n_rx):
    ctx = complex_randn(rng, (n_tx, n_tx))
    ctx = herm(ctx @ ctx.conj().T)
    ctx *= n_tx / np.real(np.trace(ctx))
    crx = complex_randn(rng, (n_rx, n_rx))
    crx = herm(crx @ crx.conj().T)
    crx *= n_rx / np.real(np.trace(crx))
    return ctx, crx


def check_steering(rng) -> tuple[bool, str]:
    theta = rng.uniform(-np.pi / 2, np.pi / 2)
    v = cm.steering_vector(theta, 8)
    ref = np.exp(1j * np.pi * np.arange(8) * np.sin(theta))
    err = float(np.abs(v - ref).max())
    return err < 1e-14, f"max err {err:.2e}"


def check_side_covariance(rng) -> tuple[bool, str]:
    c = cm.side_covariance(rng.uniform(-1, 1), 10.0, 6)
    diag_err = float(np.abs(np.diag(c) - 1).max())
    min_eig = float(np.linalg.eigvalsh(c)[0])
    ok = diag_err < 1e-8 and min_eig > -1e-10
    return ok, f"diag err {diag_err:.2e}, min eig {min_eig:.2e}"


def check_observe_kron(rng) -> tuple[bool, str]:
    n_tx, n_rx, n_p = 5, 3, 2
    h = complex_randn(rng, n_tx * n_rx)
    p = complex_randn(rng, (n_p, n_tx))
    y = cm.observe(None, h, p, 0.0).y
    y_ref = np.kron(p, np.eye(n_rx)) @ h
    err = float(np.abs(y - y_ref).max())
    return err < 1e-12, f"max err {err:.2e}"


def check_em_single_component(rng) -> tuple[bool, str]:
    data = complex_randn(rng, (200, 4))
    fit = gmm.fit_em_zero_mean(rng, data, 1, max_iters=2)
    ref = herm(data.T @ data.conj() / 200)
    err = float(np.abs(fit.covariances[0] - ref).max())
    return err < 1e-10, f"max err {err:.2e}"


def check_gmm_single_component_lmmse(rng) -> tuple[bool, str]:
    n_tx, n_rx, n_p = 4, 2, 3
    ctx, crx = _random_stats(rng, n_tx, n_rx)
    model = gmm.GmmModel(
        weights=np.ones(1),
        cov_tx_components=ctx[None],
        cov_rx_components=crx[None],
    )
    pilot = pd.random_pilot(n_tx, n_p, 1.0, rng)
    y = complex_randn(rng, n_p * n_rx)
    est = gmm.gmm_estimate(model, y, pilot, 0.1)
    ref = estimators.genie_lmmse(y, pilot, np.kron(ctx, crx), 0.1)
    err = float(np.abs(est - ref).max())
    return err < 1e-10, f"max err {err:.2e}"


def check_kron_diag_svd(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(100):
        n_p = int(rng.integers(1, 8))
        n_rx = int(rng.integers(1, 8))
        d = rng.uniform(0.1, 2.0, n_p * n_rx)
        triples = pd.kron_diag_svd(d, n_p, n_rx)
        rec = sum(a * np.kron(b, g) for a, b, g in triples)
        worst = max(worst, float(np.abs(rec - d).max()))
    return worst < 1e-12, f"max reconstruction err {worst:.2e}"


def check_gradient_fd(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(3):
        stats = [_random_stats(rng, 6, 2) for _ in range(2)]
        p = complex_randn(rng, (3, 6))
        grad = pd.cmi_gradient(p, stats, 0.5)
        direction = complex_randn(rng, p.shape)
        eps = 1e-5
        fp = pd.sum_cmi(p + eps * direction, stats, 0.5)
        fm = pd.sum_cmi(p - eps * direction, stats, 0.5)
        fd = (fp - fm) / (2 * eps)
        pred = 2.0 * np.real(np.vdot(grad, direction))
        worst = max(worst, abs(fd - pred) / max(abs(fd), 1e-12))
    return worst < 1e-6, f"max rel err {worst:.2e}"


def check_lower_bound(rng) -> tuple[bool, str]:
    worst = -np.inf
    for _ in range(200):
        stats = [_random_stats(rng, 5, 3) for _ in range(2)]
        p = complex_randn(rng, (2, 5))
        gap = pd.lower_bound(p, stats, 0.3) - pd.sum_cmi(p, stats, 0.3)
        worst = max(worst, gap)
    return worst <= 1e-9, f"max (lower - objective) {worst:.2e}"


def check_optimizer(rng) -> tuple[bool, str]:
    worst_res, worst_pow = 0.0, 0.0
    opts = pd.OptimizerOptions(l_max=3000, epsilon=1e-4)
    for _ in range(3):
        stats = [_random_stats(rng, 6, 2) for _ in range(2)]
        pilot, trace = pd.optimize_pilot_full(stats, 0.5, 3, 1.0, opts)
        worst_pow = max(
            worst_pow, max(abs(p - 3.0) for p in trace.powers[1:])
        )
        if trace.converged:
            worst_res = max(
                worst_res, pd.kkt_residual_full(pilot, stats, 0.5)
            )
    ok = worst_res < 1e-3 and worst_pow < 1e-10
    return ok, f"kkt {worst_res:.2e}, power err {worst_pow:.2e}"


def check_fileio(rng) -> tuple[bool, str]:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        h = complex_randn(rng, (7, 6))
        fileio.save_dataset(tmp / "d.bin", h, 3, 2)
        h2, n_tx, n_rx = fileio.load_dataset(tmp / "d.bin")
        ok = np.array_equal(h, h2) and (n_tx, n_rx) == (3, 2)
        pilot = pd.random_pilot(4, 2, 1.5, rng)
        fileio.save_pilot(tmp / "p.bin", pilot)
        p2 = fileio.load_pilot(tmp / "p.bin")
        ok &= np.array_equal(pilot.p, p2.p) and pilot.rho == p2.rho
        ctx, crx = _random_stats(rng, 3, 2)
        model = gmm.GmmModel(
            weights=np.ones(1),
            cov_tx_components=ctx[None],
            cov_rx_components=crx[None],
        )
        fileio.save_gmm(tmp / "g.bin", model)
        m2, _ = fileio.load_gmm(tmp / "g.bin")
        ok &= np.allclose(m2.cov_tx_components, model.cov_tx_components)
    return bool(ok), "roundtrips"


CHECKS = (
    ("steering_vector formula", check_steering),
    ("side_covariance normalization", check_side_covariance),
    ("observe vs explicit Kronecker", check_observe_kron),
    ("EM single-component closed form", check_em_single_component),
    ("mixture estimate vs dense LMMSE", check_gmm_single_component_lmmse),
    ("Kronecker-diagonal SVD reconstruction", check_kron_diag_svd),
    ("objective gradient vs finite differences", check_gradient_fd),
    ("lower bound never exceeds objective", check_lower_bound),
    ("optimizer power budget and stationarity", check_optimizer),
    ("file format roundtrips", check_fileio),
)


def run_quick_checks(seed: int = 0) -> list[tuple[str, bool, str]]:
    from .harness import derive_rng

    results = []
    for name, fn in CHECKS:
        rng = derive_rng(seed, "check", name)
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {exc!r}"
        results.append((name, ok, detail))
    return results
