"""Spatial channel statistics, channel realizations and pilot observations.

The model is a uniform linear array on both link ends.  Per user the
transmit- and receive-side covariances come from integrating steering-vector
outer products against a Laplacian power density over the angle domain, and
the full channel covariance is their Kronecker product ``C = C_tx kron C_rx``
(never materialized unless explicitly requested).  Channels are
vectorized by column-stacking the ``n_rx x n_tx`` matrix, so a pilot matrix
``P`` acts on the vectorized channel as ``P kron I_rx``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from .linalg import complex_randn, herm, is_hermitian, psd_sqrt, unvec, vec

DEFAULT_SPREAD_TX_DEG = 2.0
DEFAULT_SPREAD_RX_DEG = 35.0
DEFAULT_QUAD_POINTS = 2048


@dataclass(frozen=True)
class ScenarioConfig:
    """System-level knobs shared by generation, protocols and experiments.

    ``snr_db`` is the per-pilot transmit power over noise power, i.e. equals
    ``1/noise_var`` when ``rho=1``.  ``n_blocks`` is the horizon ``T``; a
    protocol run covers blocks ``0..T`` inclusive.
    """

    n_tx: int
    n_rx: int
    n_pilots: int
    n_users: int = 1
    snr_db: float = 10.0
    rho: float = 1.0
    n_blocks: int = 5
    seed: int = 0
    spread_tx_deg: float = DEFAULT_SPREAD_TX_DEG
    spread_rx_deg: float = DEFAULT_SPREAD_RX_DEG
    n_clusters: int = 1
    quad_points: int = DEFAULT_QUAD_POINTS

    def __post_init__(self):
        if self.n_tx < 1 or self.n_rx < 1:
            raise ValueError("antenna counts must be >= 1")
        if not 1 <= self.n_pilots <= self.n_tx:
            raise ValueError("need 1 <= n_pilots <= n_tx")
        if self.n_users < 1:
            raise ValueError("n_users must be >= 1")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")

    @property
    def dim(self) -> int:
        return self.n_tx * self.n_rx

    @property
    def noise_var(self) -> float:
        return self.rho * 10.0 ** (-self.snr_db / 10.0)


@dataclass(frozen=True)
class ChannelStats:
    """Per-user second-order statistics: one covariance per link end.

    Both factors have unit diagonal (trace equal to the antenna count), so
    the Kronecker-lifted covariance has trace ``n_tx * n_rx`` and channels
    drawn from it satisfy ``E[|h|^2] = n_tx * n_rx`` without rescaling.
    ``delta`` records the cluster center angles, one ``(tx, rx)`` pair per
    cluster.
    """

    cov_tx: np.ndarray
    cov_rx: np.ndarray
    delta: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        for name, c, n in (
            ("cov_tx", self.cov_tx, self.n_tx),
            ("cov_rx", self.cov_rx, self.n_rx),
        ):
            if c.shape != (n, n):
                raise ValueError(f"{name} must be square")
            if not is_hermitian(c, 1e-12):
                raise ValueError(f"{name} is not Hermitian within 1e-12")
            if abs(np.real(np.trace(c)) - n) > 1e-8:
                raise ValueError(f"{name} trace must equal its dimension")

    @property
    def n_tx(self) -> int:
        return self.cov_tx.shape[0]

    @property
    def n_rx(self) -> int:
        return self.cov_rx.shape[0]

    @property
    def dim(self) -> int:
        return self.n_tx * self.n_rx

    def full_cov(self) -> np.ndarray:
        """Materialize the Kronecker lift ``cov_tx kron cov_rx``."""
        return np.kron(self.cov_tx, self.cov_rx)

    def validate(self, neg_tol: float = 1e-10) -> None:
        """Full invariant check, including the PSD spectrum."""
        for c in (self.cov_tx, self.cov_rx):
            w = np.linalg.eigvalsh(c)
            if w[0] < -neg_tol:
                raise ValueError(f"covariance has eigenvalue {w[0]:.3e}")

    @cached_property
    def _factors(self) -> tuple[np.ndarray, np.ndarray]:
        # (B_rx, B_tx) with B B^H = C; raises on indefinite input.
        return psd_sqrt(self.cov_rx), psd_sqrt(self.cov_tx)


@dataclass(frozen=True)
class ChannelSample:
    """One vectorized channel draw (column-stacked ``n_rx x n_tx`` matrix)."""

    h: np.ndarray
    block_index: int = 0
    user_index: int = 0

    def matrix(self, n_rx: int) -> np.ndarray:
        return unvec(self.h, n_rx, self.h.size // n_rx)


@dataclass(frozen=True)
class ObservationBatch:
    """Vectorized received pilot signals ``y = (P kron I) h + n``."""

    y: np.ndarray
    pilot: object
    noise_var: float

    def __post_init__(self):
        if self.noise_var < 0:
            raise ValueError("noise_var must be nonnegative")


@dataclass(frozen=True)
class ChannelDataset:
    """A batch of vectorized channels plus (optionally) per-sample stats."""

    h: np.ndarray  # (m, n_tx * n_rx)
    n_tx: int
    n_rx: int
    stats: tuple | None = None

    def __len__(self) -> int:
        return self.h.shape[0]

    def __getitem__(self, m: int) -> ChannelSample:
        return ChannelSample(self.h[m])


def steering_vector(theta: float, n: int) -> np.ndarray:
    """Array response of an n-element half-wavelength ULA at angle ``theta``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.exp(1j * np.pi * np.arange(n) * np.sin(theta))


# Quadrature tables keyed by (n, quad_points): angle grid, trapezoid
# weights and the lag-phase matrix exp(i*pi*lag*sin(theta)).  The steering
# outer products depend on the antenna index difference only, so one row per
# lag suffices to rebuild the full (Hermitian Toeplitz) covariance.
_QUAD_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _quad_table(n: int, quad_points: int):
    key = (n, quad_points)
    tab = _QUAD_CACHE.get(key)
    if tab is None:
        theta = np.linspace(-np.pi, np.pi, quad_points)
        w = np.full(quad_points, theta[1] - theta[0])
        w[0] *= 0.5
        w[-1] *= 0.5
        lagphase = np.exp(
            1j * np.pi * np.outer(np.arange(n), np.sin(theta))
        )
        tab = (theta, w, lagphase)
        if len(_QUAD_CACHE) > 64:
            _QUAD_CACHE.clear()
        _QUAD_CACHE[key] = tab
    return tab


def _laplacian_density(theta: np.ndarray, centers: np.ndarray, spread_rad: float):
    # Scale parameter of a Laplacian with standard deviation spread_rad.
    b = spread_rad / math.sqrt(2.0)
    g = np.zeros_like(theta)
    for mu in centers:
        g += np.exp(-np.abs(theta - mu) / b)
    return g


def side_covariance(
    center_angles,
    spread_deg: float,
    n: int,
    quad_points: int = DEFAULT_QUAD_POINTS,
) -> np.ndarray:
    """One-sided ULA covariance for a Laplacian angular power density.

    The density is truncated to ``[-pi, pi]`` and renormalized against the
    trapezoid weights so it integrates to exactly one; the resulting matrix
    then has unit diagonal and trace ``n`` to machine precision.  Multiple
    cluster centers are summed with equal weights before normalization.
    """
    if spread_deg <= 0:
        raise ValueError("spread_deg must be positive")
    if quad_points < 64:
        raise ValueError("quad_points must be >= 64")
    centers = np.atleast_1d(np.asarray(center_angles, dtype=float))
    theta, w, lagphase = _quad_table(n, quad_points)
    g = _laplacian_density(theta, centers, math.radians(spread_deg))
    mass = float(w @ g)
    if not np.isfinite(mass) or mass <= 0:
        raise FloatingPointError("angular density quadrature failed")
    wg = w * g / mass
    first_col = lagphase @ wg  # entry l = integral of g * exp(i pi l sin)
    if not np.all(np.isfinite(first_col)):
        raise FloatingPointError("covariance quadrature produced non-finite values")
    # Entries depend on the antenna lag only: Hermitian Toeplitz.
    c = scipy.linalg.toeplitz(first_col, first_col.conj())
    return herm(c)


def sample_scenario_stats(
    rng: np.random.Generator, config: ScenarioConfig
) -> ChannelStats:
    """Draw per-user statistics: uniform cluster centers on [-pi/2, pi/2]."""
    delta = rng.uniform(-np.pi / 2, np.pi / 2, size=(config.n_clusters, 2))
    cov_tx = side_covariance(
        delta[:, 0], config.spread_tx_deg, config.n_tx, config.quad_points
    )
    if config.n_rx == 1:
        cov_rx = np.ones((1, 1), dtype=complex)
    else:
        cov_rx = side_covariance(
            delta[:, 1], config.spread_rx_deg, config.n_rx, config.quad_points
        )
    return ChannelStats(cov_tx=cov_tx, cov_rx=cov_rx, delta=delta)


def draw_channels(
    rng: np.random.Generator, stats: ChannelStats, m: int
) -> np.ndarray:
    """Draw ``m`` channels with covariance ``cov_tx kron cov_rx``, shape (m, N).

    Sampling goes through the matrix-normal factorization
    ``H = B_rx G B_tx^T`` with ``G`` i.i.d. CN(0, 1); the Kronecker-lifted
    covariance is never formed.
    """
    b_rx, b_tx = stats._factors
    g = complex_randn(rng, (m, stats.n_rx, stats.n_tx))
    h_mat = b_rx @ g @ b_tx.T
    return vec(h_mat)


def draw_channel(
    rng: np.random.Generator,
    stats: ChannelStats,
    block_index: int = 0,
    user_index: int = 0,
) -> ChannelSample:
    """Single channel draw; see :func:`draw_channels`."""
    h = draw_channels(rng, stats, 1)[0]
    return ChannelSample(h=h, block_index=block_index, user_index=user_index)


def generate_dataset(
    rng: np.random.Generator,
    config: ScenarioConfig,
    m: int,
    keep_stats: bool = True,
) -> ChannelDataset:
    """Generate ``m`` channels, each with freshly drawn cluster angles.

    Every per-sample covariance is trace-normalized to ``N = n_tx * n_rx``,
    so ``E[|h|^2] = N`` holds analytically and no empirical rescaling is
    applied.  Set ``keep_stats=False`` for large training sets to avoid
    retaining ``m`` covariance pairs.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    h = np.empty((m, config.dim), dtype=complex)
    stats_list = [] if keep_stats else None
    for i in range(m):
        stats = sample_scenario_stats(rng, config)
        h[i] = draw_channels(rng, stats, 1)[0]
        if keep_stats:
            stats_list.append(stats)
    return ChannelDataset(
        h=h,
        n_tx=config.n_tx,
        n_rx=config.n_rx,
        stats=tuple(stats_list) if keep_stats else None,
    )


def observe(
    rng: np.random.Generator | None,
    h,
    pilot,
    noise_var: float,
) -> ObservationBatch:
    """Apply the pilot to channel(s) and add noise: ``y = (P kron I) h + n``.

    Works on a single vector or any batch shape ``(..., N)``.  The pilot is
    applied in matrix form ``Y = H P^T + N`` so the Kronecker lift is never
    materialized.  Pass ``rng=None`` for a noiseless observation.
    """
    p = np.asarray(getattr(pilot, "p", pilot))
    h_arr = np.asarray(getattr(h, "h", h))
    n_p, n_tx = p.shape
    if h_arr.shape[-1] % n_tx != 0:
        raise ValueError("channel length is not a multiple of n_tx")
    n_rx = h_arr.shape[-1] // n_tx
    h_mat = unvec(h_arr, n_rx, n_tx)
    y = vec(h_mat @ p.T)
    if rng is not None and noise_var > 0:
        y = y + math.sqrt(noise_var) * complex_randn(rng, y.shape)
    return ObservationBatch(y=y, pilot=pilot, noise_var=noise_var)
