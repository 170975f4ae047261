"""Pilot matrices: single-user eigenbeams, codebooks, and the multi-user
sum conditional-mutual-information (CMI) optimizers.

Single-user pilots stack the dominant transmit-covariance eigenvectors,
scaled to per-row power ``sqrt(rho)``.  Multi-user pilots maximize the sum
over users of ``log det(I + (P C_tx P^H) kron C_rx / noise_var)`` under the
total power budget ``tr(P P^H) <= rho * n_p``.  Two fixed-point iterations
are provided: the full objective (driven by per-user eigendecompositions
plus a Kronecker-diagonal SVD of the whitened inverse) and a cheaper
surrogate that lower-bounds the objective by pulling the receive side into
a trace factor, which reduces to the classic multi-user MISO iteration.

Both optimizers are pure functions of their inputs.  With DFT
initialization at fixed column indices they are bit-reproducible, which is
what lets transmitter and receivers regenerate the same pilot from shared
feedback indices without exchanging randomness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    complex_randn,
    eigh_descending,
    herm,
    phase_normalize,
    spectral_norm,
)

POWER_TOL = 1e-9


@dataclass(frozen=True)
class PilotMatrix:
    """An ``n_p x n_tx`` pilot with its power budget ``rho``.

    The total-power constraint ``tr(P P^H) <= rho * n_p`` is always
    enforced; sub-unitary pilots (orthonormal rows scaled by sqrt(rho))
    additionally satisfy it with equality.
    """

    p: np.ndarray
    rho: float = 1.0

    def __post_init__(self):
        if self.p.ndim != 2:
            raise ValueError("pilot must be a matrix")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        budget = self.rho * self.p.shape[0]
        if self.total_power > budget + POWER_TOL * max(1.0, budget):
            raise ValueError("pilot violates the total power budget")

    @property
    def n_pilots(self) -> int:
        return self.p.shape[0]

    @property
    def n_tx(self) -> int:
        return self.p.shape[1]

    @property
    def total_power(self) -> float:
        return float(np.sum(np.abs(self.p) ** 2))

    @property
    def row_norms(self) -> np.ndarray:
        return np.linalg.norm(self.p, axis=1)

    def is_sub_unitary(self, tol: float = 1e-9) -> bool:
        gram = self.p @ self.p.conj().T
        return bool(
            np.abs(gram - self.rho * np.eye(self.n_pilots)).max() <= tol
        )


@dataclass(frozen=True)
class PilotCodebook:
    """One pilot matrix per mixture component, shared by both link ends."""

    entries: tuple

    def __post_init__(self):
        for e in self.entries:
            if not e.is_sub_unitary(1e-9):
                raise ValueError("codebook entries must be sub-unitary")

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, k: int) -> PilotMatrix:
        return self.entries[k]


@dataclass(frozen=True)
class OptimizerOptions:
    """Knobs of the fixed-point optimizers.

    ``init_kind`` is "dft" (column selection from an oversampled DFT
    dictionary, evenly spaced indices unless ``dft_random_columns``) or
    "random" (seeded complex Gaussian scaled to the power budget).
    ``objective_kind`` selects between "full_cmi" and "lower_bound" where a
    caller dispatches on it.
    """

    init_kind: str = "dft"
    l_max: int = 500
    epsilon: float = 1e-3
    objective_kind: str = "full_cmi"
    dft_oversampling: int = 2
    dft_random_columns: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.l_max < 1:
            raise ValueError("l_max must be >= 1")
        if self.init_kind not in ("dft", "random"):
            raise ValueError("init_kind must be 'dft' or 'random'")
        if self.objective_kind not in ("full_cmi", "lower_bound"):
            raise ValueError("unknown objective_kind")


@dataclass
class OptimizerTrace:
    """Per-iteration record: objective, step size and transmit power."""

    objectives: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    powers: list = field(default_factory=list)
    n_iters: int = 0
    converged: bool = False
    stop_reason: str = ""
    pilots: list | None = None


class OptimizerDivergence(RuntimeError):
    """Raised when an iterate stops being finite; carries the trace."""

    def __init__(self, message: str, trace: OptimizerTrace):
        super().__init__(message)
        self.trace = trace


def _side_covs(stats) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(stats, "cov_tx"):
        return np.asarray(stats.cov_tx), np.asarray(stats.cov_rx)
    ctx, crx = stats
    return np.asarray(ctx), np.asarray(crx)


def genie_pilot_su(stats, n_p: int, rho: float) -> PilotMatrix:
    """Rows are the ``n_p`` dominant transmit-covariance eigenvectors.

    Eigenvectors are sorted by descending eigenvalue (ties fall back to the
    eigensolver's deterministic output order) and phase-normalized so the
    pilot is reproducible bit-for-bit; rows are scaled to norm sqrt(rho).
    """
    ctx = stats.cov_tx if hasattr(stats, "cov_tx") else np.asarray(stats)
    if n_p > ctx.shape[0]:
        raise ValueError("n_p must not exceed n_tx")
    _, u = eigh_descending(herm(ctx))
    u = phase_normalize(u[:, :n_p])
    return PilotMatrix(p=math.sqrt(rho) * u.conj().T, rho=rho)


def build_pilot_codebook(model, n_p: int, rho: float) -> PilotCodebook:
    """One sub-unitary pilot per mixture component (SNR-independent).

    Entry ``k`` stacks the dominant eigenvectors of component ``k``'s
    transmit-side covariance; components sharing a transmit factor share the
    pilot matrix object.
    """
    per_tx = [
        genie_pilot_su(ctx, n_p, rho) for ctx in model.cov_tx_components
    ]
    entries = tuple(per_tx[model.split_index(k)[0]] for k in range(model.k))
    return PilotCodebook(entries=entries)


def dft_pilot(
    n_tx: int,
    n_p: int,
    rho: float,
    oversampling: int = 1,
    rng: np.random.Generator | None = None,
    columns: bool = False,
) -> PilotMatrix:
    """DFT-based pilot.

    Row mode (default): the first ``n_p`` rows of the unitary ``n_tx``-point
    DFT, scaled to row norm sqrt(rho).  Column mode: ``n_p`` distinct
    columns of the ``oversampling * n_tx``-wide DFT dictionary, either
    seeded-random (``rng`` given) or at fixed evenly spaced indices, the
    deterministic choice both link ends can regenerate independently.
    """
    grid = oversampling * n_tx
    if n_p > grid:
        raise ValueError("n_p must not exceed oversampling * n_tx")
    if not columns:
        m = np.arange(n_tx)
        f = np.exp(-2j * np.pi * np.outer(np.arange(n_p), m) / n_tx)
        return PilotMatrix(p=math.sqrt(rho / n_tx) * f, rho=rho)
    if rng is not None:
        idx = np.sort(rng.choice(grid, size=n_p, replace=False))
    else:
        idx = (np.arange(n_p) * grid) // n_p
    atoms = np.exp(
        -2j * np.pi * np.outer(np.arange(n_tx), idx) / grid
    )
    return PilotMatrix(p=math.sqrt(rho / n_tx) * atoms.conj().T, rho=rho)


def random_pilot(
    n_tx: int, n_p: int, rho: float, rng: np.random.Generator
) -> PilotMatrix:
    """Random sub-unitary pilot: orthonormalized Gaussian rows times sqrt(rho)."""
    q, _ = np.linalg.qr(complex_randn(rng, (n_tx, n_p)))
    return PilotMatrix(p=math.sqrt(rho) * q.conj().T, rho=rho)


def sum_cmi(pilot, stats_list, noise_var: float) -> float:
    """Sum over users of log det(I + (P C_tx P^H) kron C_rx / noise_var).

    Evaluated through the per-side eigenvalues, so the lifted covariance is
    never formed; see :func:`sum_cmi_dense` for the explicit reference path.
    """
    p = np.asarray(getattr(pilot, "p", pilot))
    total = 0.0
    for stats in stats_list:
        ctx, crx = _side_covs(stats)
        s = np.clip(np.linalg.eigvalsh(herm(p @ ctx @ p.conj().T)), 0.0, None)
        t = np.clip(np.linalg.eigvalsh(herm(crx)), 0.0, None)
        total += float(np.log1p(np.outer(s, t) / noise_var).sum())
    return total


def sum_cmi_dense(pilot, stats_list, noise_var: float) -> float:
    """Reference evaluation through the explicit Kronecker lift."""
    p = np.asarray(getattr(pilot, "p", pilot))
    total = 0.0
    for stats in stats_list:
        ctx, crx = _side_covs(stats)
        lift = np.kron(p, np.eye(crx.shape[0]))
        cov = lift @ np.kron(ctx, crx) @ lift.conj().T
        dim = cov.shape[0]
        total += float(
            np.linalg.slogdet(np.eye(dim) + cov / noise_var)[1].real
        )
    return total


def lower_bound(pilot, stats_list, noise_var: float) -> float:
    """Trace surrogate: log det(I + tr(C_rx) * P C_tx P^H / noise_var) summed.

    Never exceeds :func:`sum_cmi`; coincides with it exactly when every
    receive covariance has rank one.
    """
    p = np.asarray(getattr(pilot, "p", pilot))
    total = 0.0
    for stats in stats_list:
        ctx, crx = _side_covs(stats)
        tau = float(np.real(np.trace(crx)))
        s = np.clip(np.linalg.eigvalsh(herm(p @ ctx @ p.conj().T)), 0.0, None)
        total += float(np.log1p(tau * s / noise_var).sum())
    return total


def kron_diag_svd(d, n_p: int, n_rx: int) -> list:
    """Decompose a positive diagonal into Kronecker products of diagonals.

    Reshapes the length ``n_p * n_rx`` diagonal (column-stacking) into an
    ``n_rx x n_p`` real matrix and takes its SVD, returning all
    ``min(n_p, n_rx)`` triples ``(alpha_i, beta_i, gamma_i)`` with
    ``sum_i alpha_i * kron(beta_i, gamma_i) == d``.
    """
    d = np.asarray(d, dtype=float)
    if d.size != n_p * n_rx:
        raise ValueError("diagonal length must equal n_p * n_rx")
    if not np.all(np.isfinite(d)):
        raise ValueError("diagonal entries must be finite")
    r = d.reshape(n_p, n_rx).T
    u, sv, vt = np.linalg.svd(r)
    return [(float(sv[i]), vt[i], u[:, i]) for i in range(min(n_p, n_rx))]


@dataclass
class CmiWorkspace:
    """Per-user spectral caches behind the objective's stationarity map.

    For each user: the eigenbasis ``(v, s)`` of ``P C_tx P^H``, the fixed
    eigenbasis ``(w, t)`` of ``C_rx``, the whitened inverse diagonal ``d``
    and its Kronecker-diagonal SVD triples.
    """

    v: list
    s: list
    w: list
    t: list
    d: list
    triples: list

    @classmethod
    def build(
        cls, p: np.ndarray, covs: list, noise_var: float, rx_eigs: list
    ) -> "CmiWorkspace":
        v, s, d, triples = [], [], [], []
        n_p = p.shape[0]
        for (ctx, _), (_, tj) in zip(covs, rx_eigs):
            sj, vj = np.linalg.eigh(herm(p @ ctx @ p.conj().T))
            sj = np.clip(sj, 0.0, None)
            dj = 1.0 / (1.0 + np.kron(sj, tj) / noise_var)
            v.append(vj)
            s.append(sj)
            d.append(dj)
            triples.append(kron_diag_svd(dj, n_p, tj.size))
        return cls(
            v=v,
            s=s,
            w=[w for w, _ in rx_eigs],
            t=[t for _, t in rx_eigs],
            d=d,
            triples=triples,
        )

    def reconstruction_error(self) -> float:
        """Max deviation of the triple sums from the stored diagonals."""
        err = 0.0
        for dj, trip in zip(self.d, self.triples):
            rec = sum(a * np.kron(b, g) for a, b, g in trip)
            err = max(err, float(np.abs(rec - dj).max()))
        return err


def _rx_eigs(covs: list) -> list:
    out = []
    for _, crx in covs:
        t, w = np.linalg.eigh(herm(crx))
        out.append((w, np.clip(t, 0.0, None)))
    return out


def _stationarity_map(
    p: np.ndarray, covs: list, noise_var: float, rx_eigs: list
) -> tuple[np.ndarray, CmiWorkspace]:
    """Left side of the full-objective fixed-point condition at ``p``.

    This is also the unnormalized iterate of the full optimizer and, up to
    the Wirtinger convention, the objective gradient.
    """
    ws = CmiWorkspace.build(p, covs, noise_var, rx_eigs)
    out = np.zeros_like(p)
    for j, (ctx, _) in enumerate(covs):
        m = np.zeros(p.shape[0])
        for alpha, beta, gamma in ws.triples[j]:
            m += alpha * beta * float(gamma @ ws.t[j])
        vj = ws.v[j]
        out += (vj * m) @ vj.conj().T @ p @ ctx / noise_var
    return out, ws


def cmi_gradient(pilot, stats_list, noise_var: float) -> np.ndarray:
    """Gradient of :func:`sum_cmi` with respect to the conjugate pilot.

    Wirtinger convention: for a real objective f and direction D, the
    directional derivative is ``2 Re <G, D>`` with ``<A, B> = tr(A^H B)``.
    Assembled from the per-user eigendecompositions and the
    Kronecker-diagonal SVD of the whitened inverse.
    """
    p = np.asarray(getattr(pilot, "p", pilot))
    covs = [_side_covs(s) for s in stats_list]
    grad, _ = _stationarity_map(p, covs, noise_var, _rx_eigs(covs))
    return grad


def _lb_map(p: np.ndarray, covs: list, taus: list, noise_var: float):
    """Fixed-point map of the lower-bound (MISO-style) iteration."""
    out = np.zeros_like(p)
    eye = np.eye(p.shape[0])
    for (ctx, _), tau in zip(covs, taus):
        scaled = tau * ctx
        a = herm(p @ scaled @ p.conj().T)
        out += np.linalg.solve(eye + a / noise_var, p @ scaled) / noise_var
    return out


def _initial_pilot(
    n_tx: int, n_p: int, rho: float, options: OptimizerOptions
) -> np.ndarray:
    if options.init_kind == "dft":
        rng = (
            np.random.default_rng(options.seed)
            if options.dft_random_columns
            else None
        )
        return dft_pilot(
            n_tx, n_p, rho, options.dft_oversampling, rng=rng, columns=True
        ).p
    g = complex_randn(np.random.default_rng(options.seed), (n_p, n_tx))
    return g * math.sqrt(rho * n_p / np.sum(np.abs(g) ** 2))


def _run_fixed_point(
    stats_list,
    noise_var: float,
    n_p: int,
    rho: float,
    options: OptimizerOptions,
    objective,
    update,
    record_iterates: bool,
) -> tuple[PilotMatrix, OptimizerTrace]:
    covs = [_side_covs(s) for s in stats_list]
    if not covs:
        raise ValueError("stats_list must be nonempty")
    n_tx = covs[0][0].shape[0]
    p = _initial_pilot(n_tx, n_p, rho, options)
    trace = OptimizerTrace(pilots=[p.copy()] if record_iterates else None)
    trace.objectives.append(objective(p))
    trace.powers.append(float(np.sum(np.abs(p) ** 2)))
    budget = rho * n_p
    for _ in range(options.l_max):
        p_tilde = update(p)
        norm2 = float(np.sum(np.abs(p_tilde) ** 2))
        if not np.isfinite(norm2) or norm2 <= 0:
            raise OptimizerDivergence(
                "fixed-point iterate is degenerate or non-finite", trace
            )
        p_new = math.sqrt(budget / norm2) * p_tilde
        step = spectral_norm(p_new - p)
        trace.n_iters += 1
        trace.objectives.append(objective(p_new))
        trace.step_norms.append(step)
        trace.powers.append(float(np.sum(np.abs(p_new) ** 2)))
        if record_iterates:
            trace.pilots.append(p_new.copy())
        p = p_new
        if step < options.epsilon:
            trace.converged = True
            trace.stop_reason = "epsilon"
            break
    else:
        trace.stop_reason = "l_max"
    return PilotMatrix(p=p, rho=rho), trace


def optimize_pilot_full(
    stats_list,
    noise_var: float,
    n_p: int,
    rho: float,
    options: OptimizerOptions | None = None,
    record_iterates: bool = False,
) -> tuple[PilotMatrix, OptimizerTrace]:
    """Fixed-point iteration on the full sum-CMI stationarity condition.

    Each pass recomputes the per-user transmit-side eigendecompositions and
    Kronecker-diagonal SVDs (the receive-side decompositions are fixed),
    applies the stationarity map and renormalizes to the exact power budget
    ``tr(P P^H) = rho * n_p``.  Stops once the spectral norm of the iterate
    difference falls below ``epsilon`` or after ``l_max`` updates.
    """
    options = options or OptimizerOptions()
    covs = [_side_covs(s) for s in stats_list]
    rx_eigs = _rx_eigs(covs)

    def update(p):
        return _stationarity_map(p, covs, noise_var, rx_eigs)[0]

    return _run_fixed_point(
        stats_list,
        noise_var,
        n_p,
        rho,
        options,
        lambda p: sum_cmi(p, stats_list, noise_var),
        update,
        record_iterates,
    )


def optimize_pilot_lower_bound(
    stats_list,
    noise_var: float,
    n_p: int,
    rho: float,
    options: OptimizerOptions | None = None,
    record_iterates: bool = False,
) -> tuple[PilotMatrix, OptimizerTrace]:
    """Fixed-point iteration on the lower-bound surrogate.

    Equivalent to the multi-user MISO iteration with each transmit
    covariance scaled by the trace of its receive-side partner; shares the
    normalization and stopping rule of the full optimizer.  For single
    receive antennas the iterates coincide with the full optimizer's.
    """
    options = options or OptimizerOptions()
    covs = [_side_covs(s) for s in stats_list]
    taus = [float(np.real(np.trace(crx))) for _, crx in covs]

    def update(p):
        return _lb_map(p, covs, taus, noise_var)

    return _run_fixed_point(
        stats_list,
        noise_var,
        n_p,
        rho,
        options,
        lambda p: lower_bound(p, stats_list, noise_var),
        update,
        record_iterates,
    )


def kkt_residual_full(pilot, stats_list, noise_var: float) -> float:
    """Relative stationarity residual of the full objective at ``pilot``.

    The multiplier is recovered by projection, ``lambda = <F(P), P> /
    |P|_F^2``; the residual is ``|F(P) - lambda P|_F / |lambda P|_F``.
    """
    p = np.asarray(getattr(pilot, "p", pilot))
    covs = [_side_covs(s) for s in stats_list]
    f, _ = _stationarity_map(p, covs, noise_var, _rx_eigs(covs))
    return _relative_residual(f, p)


def kkt_residual_lower_bound(pilot, stats_list, noise_var: float) -> float:
    """Relative stationarity residual of the lower-bound objective."""
    p = np.asarray(getattr(pilot, "p", pilot))
    covs = [_side_covs(s) for s in stats_list]
    taus = [float(np.real(np.trace(crx))) for _, crx in covs]
    return _relative_residual(_lb_map(p, covs, taus, noise_var), p)


def _relative_residual(f: np.ndarray, p: np.ndarray) -> float:
    lam = np.real(np.vdot(f, p)) / np.real(np.vdot(p, p))
    denom = abs(lam) * np.linalg.norm(p)
    return float(np.linalg.norm(f - lam * p) / denom)
