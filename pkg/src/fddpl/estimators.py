"""Baseline channel estimators: genie LMMSE, sample-covariance LMMSE and
genie-aided orthogonal matching pursuit.

These form the comparison suite around the mixture estimator.  The LMMSE
paths here deliberately assemble the explicit Kronecker lift ``P kron I``;
they double as dense reference implementations for the factored mixture
machinery.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import herm


def lmmse_filter(cov, pilot, noise_var: float) -> np.ndarray:
    """Dense LMMSE filter W with ``h_hat = W y`` for covariance ``cov``.

    ``W = C A^H (A C A^H + noise_var I)^{-1}`` with ``A = P kron I_rx``.
    """
    p = np.asarray(getattr(pilot, "p", pilot))
    cov = np.asarray(cov)
    n = cov.shape[0]
    n_rx = n // p.shape[1]
    a = np.kron(p, np.eye(n_rx))
    gram = herm(a @ cov @ a.conj().T) + noise_var * np.eye(a.shape[0])
    # W = C A^H G^-1, via G^-1 A C and Hermitian symmetry of C and G.
    return np.linalg.solve(gram, a @ cov).conj().T


def genie_lmmse(y, pilot, stats, noise_var: float) -> np.ndarray:
    """Conditional-mean estimate under the true per-user covariance."""
    cov = stats.full_cov() if hasattr(stats, "full_cov") else np.asarray(stats)
    w = lmmse_filter(cov, pilot, noise_var)
    y_arr = np.asarray(getattr(y, "y", y))
    return y_arr @ w.T


def sample_cov_lmmse(y, pilot, sample_cov, noise_var: float) -> np.ndarray:
    """LMMSE with the global training-set sample covariance as the prior."""
    w = lmmse_filter(np.asarray(sample_cov), pilot, noise_var)
    y_arr = np.asarray(getattr(y, "y", y))
    return y_arr @ w.T


def omp_dictionary(
    n_tx: int, n_rx: int = 1, oversampling: int = 2
) -> np.ndarray:
    """Oversampled DFT dictionary with unit-norm columns.

    For multiple receive antennas the dictionary is the Kronecker product
    of per-side dictionaries, matching the channel vectorization.
    """

    def side(n):
        grid = oversampling * n
        d = np.exp(-2j * np.pi * np.outer(np.arange(n), np.arange(grid)) / grid)
        return d / np.sqrt(n)

    d_tx = side(n_tx)
    if n_rx == 1:
        return d_tx
    return np.kron(d_tx, side(n_rx))


def omp_genie_estimate(
    y, pilot, dictionary, noise_var: float, true_h
) -> np.ndarray:
    """Orthogonal matching pursuit with genie-selected sparsity order.

    Greedily grows the support on the effective sensing matrix
    ``(P kron I) D``, re-solving least squares (minimum-norm) on the support
    each step up to the observation dimension, and returns the intermediate
    reconstruction closest to the true channel, which bounds achievable OMP
    performance without a sparsity-order heuristic.
    """
    p = np.asarray(getattr(pilot, "p", pilot))
    y_arr = np.asarray(getattr(y, "y", y))
    true_h = np.asarray(getattr(true_h, "h", true_h))
    n_rx = true_h.size // p.shape[1]
    a = np.kron(p, np.eye(n_rx)) @ dictionary
    s_max = min(y_arr.size, dictionary.shape[1])

    best = np.zeros_like(true_h)
    best_err = float(np.linalg.norm(best - true_h))
    support: list[int] = []
    residual = y_arr.astype(complex)
    for _ in range(s_max):
        scores = np.abs(a.conj().T @ residual)
        scores[support] = -1.0
        support.append(int(np.argmax(scores)))
        coef = np.linalg.lstsq(a[:, support], y_arr, rcond=None)[0]
        residual = y_arr - a[:, support] @ coef
        h_s = dictionary[:, support] @ coef
        err = float(np.linalg.norm(h_s - true_h))
        if err < best_err:
            best, best_err = h_s, err
    return best


@dataclass
class EstimatorContext:
    """Bundle of exactly the inputs one estimator kind needs.

    ``kind`` is one of "gmm", "genie_lmmse", "sample_lmmse", "omp".  The
    corresponding optional field must be set and the others left unset;
    ``validate`` enforces this.  Filters are cached per context, so reuse
    one context per (pilot, noise) pair.
    """

    kind: str
    pilot: object
    noise_var: float
    stats: object | None = None
    sample_cov: np.ndarray | None = None
    dictionary: np.ndarray | None = None
    model: object | None = None
    _filter: np.ndarray | None = field(default=None, repr=False)

    _REQUIRED = {
        "gmm": "model",
        "genie_lmmse": "stats",
        "sample_lmmse": "sample_cov",
        "omp": "dictionary",
    }

    def validate(self) -> None:
        if self.kind not in self._REQUIRED:
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        for name in ("stats", "sample_cov", "dictionary", "model"):
            have = getattr(self, name) is not None
            if have != (self._REQUIRED[self.kind] == name):
                raise ValueError(
                    f"estimator {self.kind!r} and field {name!r} mismatch"
                )
        if self.sample_cov is not None:
            c = np.asarray(self.sample_cov)
            if not np.allclose(c, c.conj().T, atol=1e-10):
                raise ValueError("sample covariance must be Hermitian")

    def estimate(self, y, true_h=None) -> np.ndarray:
        """Apply the configured estimator to observation(s) ``y``."""
        self.validate()
        y_arr = np.asarray(getattr(y, "y", y))
        if self.kind == "gmm":
            from .gmm import gmm_estimate

            return gmm_estimate(self.model, y_arr, self.pilot, self.noise_var)
        if self.kind == "omp":
            if true_h is None:
                raise ValueError("omp needs the true channel (bound mode)")
            true_arr = np.asarray(getattr(true_h, "h", true_h))
            if y_arr.ndim == 1:
                return omp_genie_estimate(
                    y_arr, self.pilot, self.dictionary, self.noise_var, true_arr
                )
            return np.stack(
                [
                    omp_genie_estimate(
                        yi, self.pilot, self.dictionary, self.noise_var, hi
                    )
                    for yi, hi in zip(y_arr, true_arr)
                ]
            )
        if self._filter is None:
            cov = (
                self.stats.full_cov()
                if self.kind == "genie_lmmse"
                else np.asarray(self.sample_cov)
            )
            self._filter = lmmse_filter(cov, self.pilot, self.noise_var)
        return y_arr @ self._filter.T
