"""Zero-mean Gaussian mixtures with Kronecker-factored covariances.

The mixture is fit offline on vectorized channels.  For MIMO data one
mixture is fit per link end (transmit side on the matrix rows, receive side
on the matrix columns) and the two are combined component-wise by Kronecker
products, giving ``K = k_tx * k_rx`` components with product weights.  All
component means are pinned to zero; there is no mean field anywhere.

Online, the mixture of the observations ``y = (P kron I) h + n`` has
component covariances ``(P C_tx P^H) kron C_rx + noise_var * I``.  Component
posteriors ("responsibilities") are computed in the log domain, the MAP
component index is the feedback message, and the channel estimate is the
responsibility-weighted combination of per-component LMMSE filters.  All of
this runs in the Kronecker-factored form; the lifted covariances are never
materialized.
"""

from __future__ import annotations

import hashlib
import math
import warnings
import weakref
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from .linalg import cholesky_psd, herm, unvec, vec

LOG_PI = math.log(math.pi)
_ESTIMATE_CHUNK = 256


@dataclass(frozen=True, eq=False)
class GmmModel:
    """Fitted mixture: weights plus per-side component covariances.

    The combined component index is ``k = k_tx * K_rx + k_rx``; weights are
    stored combined (length ``K``).  Instances are immutable and safe to
    share across workers.
    """

    weights: np.ndarray
    cov_tx_components: np.ndarray  # (K_tx, n_tx, n_tx)
    cov_rx_components: np.ndarray  # (K_rx, n_rx, n_rx)
    fit_log: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 within 1e-12")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if len(self.weights) != self.k_tx * self.k_rx:
            raise ValueError("weight count must equal k_tx * k_rx")

    @property
    def k_tx(self) -> int:
        return self.cov_tx_components.shape[0]

    @property
    def k_rx(self) -> int:
        return self.cov_rx_components.shape[0]

    @property
    def k(self) -> int:
        return self.k_tx * self.k_rx

    @property
    def n_tx(self) -> int:
        return self.cov_tx_components.shape[1]

    @property
    def n_rx(self) -> int:
        return self.cov_rx_components.shape[1]

    @property
    def dim(self) -> int:
        return self.n_tx * self.n_rx

    def split_index(self, k: int) -> tuple[int, int]:
        return divmod(k, self.k_rx)

    def combined_index(self, k_tx: int, k_rx: int) -> int:
        return k_tx * self.k_rx + k_rx

    def component_pair(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Transmit/receive covariance factors of combined component ``k``."""
        a, b = self.split_index(k)
        return self.cov_tx_components[a], self.cov_rx_components[b]

    def component_cov(self, k: int) -> np.ndarray:
        """Materialized Kronecker covariance of combined component ``k``."""
        ctx, crx = self.component_pair(k)
        return np.kron(ctx, crx)


@dataclass(frozen=True)
class Responsibilities:
    """Component posteriors; rows sum to one."""

    probs: np.ndarray

    def __post_init__(self):
        s = self.probs.sum(axis=-1)
        if np.any(np.abs(s - 1.0) > 1e-9) or np.any(self.probs < -1e-15):
            raise ValueError("responsibilities must lie on the simplex")


@dataclass(frozen=True)
class FeedbackIndex:
    """MAP component index, the over-the-air feedback message."""

    k_star: int
    bit_width: int | None = None


@dataclass(frozen=True)
class EmFitResult:
    covariances: np.ndarray  # (k, d, d)
    weights: np.ndarray  # (k,)
    log_likelihood: tuple  # per-iteration average log-likelihood


def _log_gauss_zero_mean(data: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Log densities of zero-mean complex Gaussians, shape (m, k)."""
    m, d = data.shape
    out = np.empty((m, len(covs)))
    for k, c in enumerate(covs):
        low = cholesky_psd(c)
        x = scipy.linalg.solve_triangular(low, data.T, lower=True)
        q = np.einsum("dm,dm->m", x.conj(), x).real
        logdet = 2.0 * np.log(np.diag(low).real).sum()
        out[:, k] = -d * LOG_PI - logdet - q
    return out


def zero_mean_log_likelihood(
    data: np.ndarray, covs: np.ndarray, weights: np.ndarray
) -> float:
    """Per-sample average mixture log-likelihood."""
    logj = _log_gauss_zero_mean(data, covs) + np.log(weights)
    return float(logsumexp(logj, axis=1).mean())


def _m_step(data: np.ndarray, resp: np.ndarray):
    m, d = data.shape
    nk = resp.sum(axis=0)
    covs = np.empty((resp.shape[1], d, d), dtype=complex)
    for k in range(resp.shape[1]):
        c = (data.T * resp[:, k]) @ data.conj() / max(nk[k], np.finfo(float).tiny)
        covs[k] = herm(c)
        if nk[k] < d:
            # Component collapse: fewer effective samples than dimensions.
            eps = 1e-6 * np.real(np.trace(covs[k])) / d
            covs[k] += eps * np.eye(d)
            warnings.warn(
                f"mixture component {k} collapsed (effective count "
                f"{nk[k]:.1f} < {d}); covariance regularized",
                RuntimeWarning,
                stacklevel=3,
            )
    return covs, nk / m


def fit_em_zero_mean(
    rng: np.random.Generator,
    data: np.ndarray,
    k: int,
    max_iters: int = 300,
    tol: float = 1e-5,
) -> EmFitResult:
    """EM for a complex Gaussian mixture with all means pinned at zero.

    The E-step uses zero-mean densities; the M-step sets each covariance to
    the responsibility-weighted outer-product average and each weight to the
    average responsibility.  Initialization applies one M-step to uniform
    Dirichlet responsibilities.  Iteration stops when the per-sample average
    log-likelihood improves by less than ``tol`` or after ``max_iters``.
    """
    data = np.ascontiguousarray(data)
    m, d = data.shape
    if m < k:
        raise ValueError("need at least k samples")
    covs, _ = _m_step(data, rng.dirichlet(np.ones(k), size=m))
    weights = np.full(k, 1.0 / k)
    trace = []
    prev = None
    for _ in range(max_iters):
        logj = _log_gauss_zero_mean(data, covs) + np.log(weights)
        lse = logsumexp(logj, axis=1)
        ll = float(lse.mean())
        if not np.isfinite(ll):
            raise FloatingPointError("EM log-likelihood became non-finite")
        trace.append(ll)
        resp = np.exp(logj - lse[:, None])
        covs, weights = _m_step(data, resp)
        if prev is not None and ll - prev < tol:
            break
        prev = ll
    return EmFitResult(
        covariances=covs, weights=weights, log_likelihood=tuple(trace)
    )


def fit_kronecker_gmm(
    rng: np.random.Generator,
    dataset,
    k_tx: int,
    k_rx: int,
    max_iters: int = 300,
    tol: float = 1e-5,
    n_rx: int | None = None,
) -> GmmModel:
    """Fit per-side mixtures and combine them into a Kronecker mixture.

    ``dataset`` is a ChannelDataset or an ``(m, n_tx * n_rx)`` array (pass
    ``n_rx`` in the latter case).  The transmit-side mixture is fit on the
    rows of each channel matrix (as column vectors), the receive-side
    mixture on the columns; for ``n_rx = 1`` the receive side degenerates to
    a single unit component and the transmit fit sees the raw vectors.
    Combined weights are the products of the per-side weights.
    """
    h = np.asarray(getattr(dataset, "h", dataset))
    if n_rx is None:
        n_rx = getattr(dataset, "n_rx", None)
        if n_rx is None:
            raise ValueError("n_rx required when passing a bare array")
    m, n = h.shape
    n_tx = n // n_rx
    h_mat = unvec(h, n_rx, n_tx)
    if n_rx == 1:
        tx_fit = fit_em_zero_mean(rng, h, k_tx, max_iters, tol)
        rx_fit = None
        k_rx = 1
        cov_rx = np.ones((1, 1, 1), dtype=complex)
        weights = tx_fit.weights.copy()
    else:
        rng_tx, rng_rx = rng.spawn(2)
        tx_data = h_mat.reshape(m * n_rx, n_tx)
        rx_data = h_mat.transpose(0, 2, 1).reshape(m * n_tx, n_rx)
        tx_fit = fit_em_zero_mean(rng_tx, tx_data, k_tx, max_iters, tol)
        rx_fit = fit_em_zero_mean(rng_rx, rx_data, k_rx, max_iters, tol)
        cov_rx = rx_fit.covariances
        weights = np.outer(tx_fit.weights, rx_fit.weights).ravel()
    weights = weights / weights.sum()
    fit_log = {
        "k_tx": k_tx,
        "k_rx": k_rx,
        "max_iters": max_iters,
        "tol": tol,
        "log_likelihood_tx": list(tx_fit.log_likelihood),
        "log_likelihood_rx": list(rx_fit.log_likelihood) if rx_fit else [],
    }
    return GmmModel(
        weights=weights,
        cov_tx_components=tx_fit.covariances,
        cov_rx_components=cov_rx,
        fit_log=fit_log,
    )


class ObservationParams:
    """Per-component observation statistics for one (pilot, noise) pair.

    Holds the eigendecompositions of ``P C_tx P^H`` and ``C_rx`` per side
    component, the diagonal of the lifted observation covariance in that
    eigenbasis, log-determinants, and the per-component LMMSE filter
    factors.  Everything downstream (densities, responsibilities, MAP
    feedback, channel estimates) is evaluated through these factors.
    """

    def __init__(self, model: GmmModel, pilot: np.ndarray, noise_var: float):
        if noise_var <= 0:
            raise ValueError("noise_var must be positive")
        self.model = model
        self.pilot = pilot
        self.noise_var = noise_var
        n_p = pilot.shape[0]
        ktx, krx = model.k_tx, model.k_rx
        self.n_p, self.n_rx = n_p, model.n_rx
        self.obs_dim = n_p * model.n_rx

        self.v = np.empty((ktx, n_p, n_p), dtype=complex)
        self.s = np.empty((ktx, n_p))
        self.ftx = np.empty((ktx, model.n_tx, n_p), dtype=complex)
        for a, ctx in enumerate(model.cov_tx_components):
            sa, va = np.linalg.eigh(herm(pilot @ ctx @ pilot.conj().T))
            self.s[a] = np.clip(sa, 0.0, None)
            self.v[a] = va
            self.ftx[a] = ctx @ pilot.conj().T @ va

        self.w = np.empty((krx, model.n_rx, model.n_rx), dtype=complex)
        self.t = np.empty((krx, model.n_rx))
        self.frx = np.empty_like(self.w)
        for b, crx in enumerate(model.cov_rx_components):
            tb, wb = np.linalg.eigh(herm(crx))
            self.t[b] = np.clip(tb, 0.0, None)
            self.w[b] = wb
            self.frx[b] = crx @ wb

        # dmat[a, b, r, p] = t_b[r] * s_a[p] + noise_var, the diagonal of the
        # observation covariance in the (v_a kron w_b) basis, as a matrix.
        self.dmat = (
            self.t[None, :, :, None] * self.s[:, None, None, :] + noise_var
        )
        self.logdet = np.log(self.dmat).sum(axis=(2, 3)).reshape(-1)
        self.log_weights = np.log(model.weights)

    def component_cov_dense(self, k: int) -> np.ndarray:
        """Dense observation covariance of component ``k`` (for testing)."""
        ctx, crx = self.model.component_pair(k)
        a = self.pilot @ ctx @ self.pilot.conj().T
        return np.kron(a, crx) + self.noise_var * np.eye(self.obs_dim)

    def _whiten(self, y_mat: np.ndarray) -> np.ndarray:
        # (V_a kron W_b)^H y as matrices: W^H Y V*, shape (a, b, m, r, p).
        x = np.einsum("bsr,msp->bmrp", self.w.conj(), y_mat)
        return np.einsum("bmrp,apq->abmrq", x, self.v.conj())

    def log_densities(self, y: np.ndarray) -> np.ndarray:
        """Per-component log observation densities, shape (m, K)."""
        y2 = np.atleast_2d(y)
        m = y2.shape[0]
        out = np.empty((m, self.model.k))
        for lo in range(0, m, _ESTIMATE_CHUNK):
            hi = min(lo + _ESTIMATE_CHUNK, m)
            t1 = self._whiten(unvec(y2[lo:hi], self.n_rx, self.n_p))
            q = np.einsum(
                "abmrp,abrp->abm", t1.real**2 + t1.imag**2, 1.0 / self.dmat
            )
            out[lo:hi] = (
                -self.obs_dim * LOG_PI
                - self.logdet[None, :]
                - q.reshape(self.model.k, hi - lo).T
            )
        return out

    def responsibilities(self, y: np.ndarray) -> np.ndarray:
        """Posterior component probabilities, shape (m, K) (or (K,))."""
        logj = self.log_densities(y) + self.log_weights
        probs = np.exp(logj - logsumexp(logj, axis=-1, keepdims=True))
        return probs if np.ndim(y) > 1 else probs[0]

    def estimate(
        self, y: np.ndarray, responsibilities: np.ndarray | None = None
    ) -> np.ndarray:
        """Responsibility-weighted combination of per-component LMMSE filters."""
        y2 = np.atleast_2d(y)
        m = y2.shape[0]
        resp = responsibilities
        if resp is None:
            resp = self.responsibilities(y2)
        resp2 = np.atleast_2d(resp).reshape(m, self.model.k_tx, self.model.k_rx)
        out = np.empty((m, self.model.dim), dtype=complex)
        for lo in range(0, m, _ESTIMATE_CHUNK):
            hi = min(lo + _ESTIMATE_CHUNK, m)
            t1 = self._whiten(unvec(y2[lo:hi], self.n_rx, self.n_p))
            zw = (t1 / self.dmat[:, :, None]) * np.transpose(
                resp2[lo:hi], (1, 2, 0)
            )[:, :, :, None, None]
            e2 = np.einsum("brs,abmsp->amrp", self.frx, zw)
            h_mat = np.einsum("amrp,anp->mrn", e2, self.ftx)
            out[lo:hi] = vec(h_mat)
        return out if np.ndim(y) > 1 else out[0]


_OBS_CACHE: "weakref.WeakKeyDictionary[GmmModel, OrderedDict]" = (
    weakref.WeakKeyDictionary()
)
_OBS_CACHE_MAX = 128


def observation_component_params(
    model: GmmModel, pilot, noise_var: float
) -> ObservationParams:
    """Cached :class:`ObservationParams`, keyed by (pilot hash, noise_var)."""
    p = np.ascontiguousarray(getattr(pilot, "p", pilot))
    key = (
        hashlib.blake2b(p.tobytes(), digest_size=16).digest(),
        p.shape,
        float(noise_var),
    )
    per_model = _OBS_CACHE.get(model)
    if per_model is None:
        per_model = OrderedDict()
        _OBS_CACHE[model] = per_model
    params = per_model.get(key)
    if params is None:
        params = ObservationParams(model, p, float(noise_var))
        per_model[key] = params
        if len(per_model) > _OBS_CACHE_MAX:
            per_model.popitem(last=False)
    return params


def responsibilities_observation(
    model: GmmModel, y, pilot, noise_var: float
) -> Responsibilities:
    """Component posteriors given observation(s) ``y``."""
    y_arr = np.asarray(getattr(y, "y", y))
    params = observation_component_params(model, pilot, noise_var)
    return Responsibilities(probs=params.responsibilities(y_arr))


_CHANNEL_CACHE: "weakref.WeakKeyDictionary[GmmModel, tuple]" = (
    weakref.WeakKeyDictionary()
)


def _channel_factors(model: GmmModel):
    cached = _CHANNEL_CACHE.get(model)
    if cached is None:
        lows, logdets = [], np.empty(model.k)
        for k in range(model.k):
            low = cholesky_psd(model.component_cov(k))
            lows.append(low)
            logdets[k] = 2.0 * np.log(np.diag(low).real).sum()
        cached = (lows, logdets)
        _CHANNEL_CACHE[model] = cached
    return cached


def responsibilities_channel(model: GmmModel, h) -> Responsibilities:
    """Component posteriors given true channel(s) ``h``."""
    h2 = np.atleast_2d(np.asarray(getattr(h, "h", h)))
    lows, logdets = _channel_factors(model)
    logj = np.empty((h2.shape[0], model.k))
    for k, low in enumerate(lows):
        x = scipy.linalg.solve_triangular(low, h2.T, lower=True)
        q = np.einsum("dm,dm->m", x.conj(), x).real
        logj[:, k] = np.log(model.weights[k]) - logdets[k] - q
    probs = np.exp(logj - logsumexp(logj, axis=-1, keepdims=True))
    return Responsibilities(probs=probs if np.ndim(h) > 1 else probs[0])


def map_feedback(
    model: GmmModel, y, pilot, noise_var: float
) -> FeedbackIndex:
    """MAP component index for one observation; ties take the lowest index."""
    probs = responsibilities_observation(model, y, pilot, noise_var).probs
    if probs.ndim != 1:
        raise ValueError("map_feedback expects a single observation")
    b = math.log2(model.k)
    return FeedbackIndex(
        k_star=int(np.argmax(probs)),
        bit_width=int(b) if b.is_integer() else None,
    )


def map_feedback_batch(
    model: GmmModel, y, pilot, noise_var: float
) -> np.ndarray:
    """MAP component indices for a batch of observations."""
    params = observation_component_params(model, pilot, noise_var)
    logj = params.log_densities(np.atleast_2d(np.asarray(getattr(y, "y", y))))
    return np.argmax(logj + params.log_weights, axis=1)


def gmm_estimate(
    model: GmmModel,
    y,
    pilot,
    noise_var: float,
    responsibilities: np.ndarray | None = None,
) -> np.ndarray:
    """Mixture channel estimate from observation(s) ``y``.

    Precomputed responsibilities may be passed to reuse the ones already
    obtained for feedback inference.
    """
    y_arr = np.asarray(getattr(y, "y", y))
    params = observation_component_params(model, pilot, noise_var)
    if responsibilities is not None:
        responsibilities = np.asarray(
            getattr(responsibilities, "probs", responsibilities)
        )
    return params.estimate(y_arr, responsibilities)
