"""Experiment orchestration: offline fitting, online feedback protocols
over fading blocks, Monte-Carlo NMSE evaluation and CSV result tables.

Randomness discipline: every (sweep point, user, block) tuple owns derived
RNG streams, so channel draws are identical across schemes (paired
comparisons), results do not depend on worker count, and truncating the
block horizon reproduces the surviving prefix bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .channel_model import (
    ScenarioConfig,
    draw_channels,
    generate_dataset,
    observe,
    sample_scenario_stats,
)
from .estimators import EstimatorContext, omp_dictionary
from .gmm import GmmModel, fit_kronecker_gmm, observation_component_params
from .linalg import herm
from .pilot_design import (
    OptimizerOptions,
    PilotCodebook,
    build_pilot_codebook,
    dft_pilot,
    genie_pilot_su,
    optimize_pilot_full,
    optimize_pilot_lower_bound,
    random_pilot,
)

logger = logging.getLogger(__name__)

PILOT_SCHEMES = ("gmm_pilot", "dft_pilot", "random_pilot", "genie_pilot")
ESTIMATORS = ("gmm_est", "genie_lmmse", "sample_lmmse", "omp")
SWEEPS = ("snr_db", "block_index", "component_counts", "l_max")

CSV_COLUMNS = (
    "sweep_name",
    "sweep_value",
    "pilot_scheme",
    "estimator",
    "mean_nmse",
    "nmse_db",
    "ci_lo",
    "ci_hi",
    "n_samples",
    "seed",
    "wall_ms",
)


class ProtocolError(RuntimeError):
    """Hard protocol failure, e.g. diverging pilots across link ends."""


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything one experiment needs: scenario, sweep, schemes, budgets."""

    scenario: ScenarioConfig
    sweep_name: str = "snr_db"
    sweep_values: tuple = (0.0, 10.0, 20.0)
    schemes: tuple = (("gmm_pilot", "gmm_est"),)
    mode: str = "su"
    m_train: int = 20_000
    m_eval: int = 2_000
    m_con: int = 100
    k_tx: int = 16
    k_rx: int = 4
    em_max_iters: int = 100
    em_tol: float = 1e-5
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)
    oversampling: int = 2
    target_block: int | None = None
    output_path: str | None = None

    def __post_init__(self):
        if not self.sweep_values:
            raise ValueError("sweep must be nonempty")
        if self.sweep_name not in SWEEPS:
            raise ValueError(f"unknown sweep {self.sweep_name!r}")
        if self.mode not in ("su", "mu"):
            raise ValueError("mode must be 'su' or 'mu'")
        for pilot_scheme, estimator in self.schemes:
            if pilot_scheme not in PILOT_SCHEMES:
                raise ValueError(f"unknown pilot scheme {pilot_scheme!r}")
            if estimator not in ESTIMATORS:
                raise ValueError(f"unknown estimator {estimator!r}")
        if self.sweep_name == "l_max" and self.mode != "mu":
            raise ValueError("l_max sweeps apply to multi-user mode")

    @property
    def eval_block(self) -> int:
        t = (
            self.scenario.n_blocks
            if self.target_block is None
            else self.target_block
        )
        if not 0 <= t <= self.scenario.n_blocks:
            raise ValueError("target block outside the horizon")
        return t


@dataclass(frozen=True)
class ProtocolState:
    """Snapshot of one protocol round: the information block t acts on."""

    block_index: int
    pilot: object
    k_star_prev: tuple | None


@dataclass
class SuProtocolResult:
    """Single-user protocol outcome over blocks 0..T."""

    nmse: np.ndarray  # (T+1,)
    k_stars: np.ndarray  # (T+1,)
    states: list  # ProtocolState per block


@dataclass
class MuProtocolResult:
    """Multi-user protocol outcome; NMSE per block averaged over users."""

    nmse: np.ndarray  # (T+1,)
    nmse_per_user: np.ndarray  # (T+1, J)
    k_stars: np.ndarray  # (T+1, J)
    states: list
    rounds_checked: int
    mismatches: int


def _hash_part(part) -> int:
    digest = hashlib.blake2b(repr(part).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_rng(*parts) -> np.random.Generator:
    """Deterministic RNG stream addressed by an arbitrary key tuple."""
    return np.random.default_rng(
        np.random.SeedSequence([_hash_part(p) for p in parts])
    )


def evaluate_nmse(truths, estimates) -> float:
    """Mean squared error normalized by channel dimension and sample count."""
    t = np.atleast_2d(np.asarray(truths))
    e = np.atleast_2d(np.asarray(estimates))
    if t.shape != e.shape:
        raise ValueError("truths and estimates must have equal shapes")
    if t.size == 0:
        raise ValueError("empty input")
    return float(np.sum(np.abs(t - e) ** 2) / (t.shape[1] * t.shape[0]))


def bootstrap_ci(
    values,
    rng: np.random.Generator,
    n_boot: int = 1000,
    alpha: float = 0.05,
) -> tuple[float, float]:
    """Percentile bootstrap confidence interval for the mean."""
    v = np.asarray(values, dtype=float)
    idx = rng.integers(0, v.size, size=(n_boot, v.size))
    means = v[idx].mean(axis=1)
    return (
        float(np.quantile(means, alpha / 2)),
        float(np.quantile(means, 1 - alpha / 2)),
    )


def ordering_confidence(
    a, b, rng: np.random.Generator, n_boot: int = 1000
) -> float:
    """Paired-bootstrap estimate of P(mean(a) < mean(b))."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired comparison needs equal shapes")
    idx = rng.integers(0, a.size, size=(n_boot, a.size))
    return float(np.mean(a[idx].mean(axis=1) < b[idx].mean(axis=1)))


def _scenario(spec_or_scenario) -> ScenarioConfig:
    return getattr(spec_or_scenario, "scenario", spec_or_scenario)


def _sequential_draw(rng):
    return lambda block, tag: rng


# ----------------------------------------------------------------------
# Single-user protocol


def run_single_user_protocol(
    rng, model: GmmModel, codebook: PilotCodebook, stats, spec
) -> SuProtocolResult:
    """Adaptive single-user rounds: observe, feed back, switch codebook pilot.

    Block 0 transmits the DFT-row pilot; every later block transmits the
    codebook entry selected by the previous block's MAP feedback index.
    The channel is redrawn per block from the same user statistics.
    ``rng`` is either a Generator or a callable ``(block, tag) -> Generator``.
    """
    scenario = _scenario(spec)
    draw = rng if callable(rng) else _sequential_draw(rng)
    horizon = scenario.n_blocks
    noise_var = scenario.noise_var
    pilot = dft_pilot(scenario.n_tx, scenario.n_pilots, scenario.rho)
    nmse = np.empty(horizon + 1)
    k_stars = np.empty(horizon + 1, dtype=int)
    states = []
    k_prev = None
    for t in range(horizon + 1):
        states.append(
            ProtocolState(
                block_index=t,
                pilot=pilot,
                k_star_prev=None if k_prev is None else (k_prev,),
            )
        )
        h = draw_channels(draw(t, "h"), stats, 1)[0]
        y = observe(draw(t, "noise"), h, pilot, noise_var).y
        params = observation_component_params(model, pilot, noise_var)
        resp = params.responsibilities(y)
        k_star = int(np.argmax(resp))
        h_hat = params.estimate(y, resp)
        nmse[t] = float(np.sum(np.abs(h - h_hat) ** 2)) / scenario.dim
        k_stars[t] = k_star
        k_prev = k_star
        pilot = codebook[k_star]
    return SuProtocolResult(nmse=nmse, k_stars=k_stars, states=states)


def _su_scheme_blocks(
    scenario: ScenarioConfig,
    stats,
    scheme,
    model,
    codebook,
    sample_cov,
    dictionary,
    draw,
) -> np.ndarray:
    """Per-block NMSE of one (pilot scheme, estimator) pair for one user."""
    pilot_scheme, est_kind = scheme
    horizon = scenario.n_blocks
    noise_var = scenario.noise_var
    n_p, rho = scenario.n_pilots, scenario.rho

    if pilot_scheme == "random_pilot":
        pilot = random_pilot(scenario.n_tx, n_p, rho, draw("init", "pilot"))
    elif pilot_scheme == "genie_pilot":
        pilot = genie_pilot_su(stats, n_p, rho)
    else:  # dft static, or the adaptive scheme's block-0 pilot
        pilot = dft_pilot(scenario.n_tx, n_p, rho)

    contexts: dict[int, EstimatorContext] = {}

    def context_for(pilot_now):
        ctx = contexts.get(id(pilot_now))
        if ctx is None:
            kind = {
                "gmm_est": "gmm",
                "genie_lmmse": "genie_lmmse",
                "sample_lmmse": "sample_lmmse",
                "omp": "omp",
            }[est_kind]
            ctx = EstimatorContext(
                kind=kind,
                pilot=pilot_now,
                noise_var=noise_var,
                stats=stats if kind == "genie_lmmse" else None,
                sample_cov=sample_cov if kind == "sample_lmmse" else None,
                dictionary=dictionary if kind == "omp" else None,
                model=model if kind == "gmm" else None,
            )
            contexts[id(pilot_now)] = ctx
        return ctx

    nmse = np.empty(horizon + 1)
    for t in range(horizon + 1):
        h = draw_channels(draw(t, "h"), stats, 1)[0]
        y = observe(draw(t, "noise"), h, pilot, noise_var).y
        resp = None
        if est_kind == "gmm_est":
            params = observation_component_params(model, pilot, noise_var)
            resp = params.responsibilities(y)
            h_hat = params.estimate(y, resp)
        else:
            h_hat = context_for(pilot).estimate(y, true_h=h)
        nmse[t] = float(np.sum(np.abs(h - h_hat) ** 2)) / scenario.dim
        if pilot_scheme == "gmm_pilot":
            if resp is None:
                params = observation_component_params(model, pilot, noise_var)
                resp = params.responsibilities(y)
            pilot = codebook[int(np.argmax(resp))]
    return nmse


# ----------------------------------------------------------------------
# Multi-user protocol


def _mu_optimizer(options: OptimizerOptions):
    if options.objective_kind == "lower_bound":
        return optimize_pilot_lower_bound
    return optimize_pilot_full


def _mu_blocks(
    scenario: ScenarioConfig,
    stats_list,
    scheme,
    model,
    options: OptimizerOptions,
    sample_cov,
    dictionary,
    draw,
):
    """Per-block, per-user NMSE for one multi-user scheme.

    For adaptive pilots the optimizer runs twice per round, once for the
    transmitter and once simulating a terminal recomputing the pilot from
    the broadcast indices; any bit mismatch is a hard failure.
    """
    pilot_scheme, est_kind = scheme
    n_users = len(stats_list)
    horizon = scenario.n_blocks
    noise_var = scenario.noise_var
    n_p, rho = scenario.n_pilots, scenario.rho
    optimizer = _mu_optimizer(options)

    pilot = dft_pilot(
        scenario.n_tx,
        n_p,
        rho,
        oversampling=options.dft_oversampling,
        columns=True,
    )
    if pilot_scheme == "random_pilot":
        pilot = random_pilot(scenario.n_tx, n_p, rho, draw("init", "pilot"))
    elif pilot_scheme == "genie_pilot":
        # Fixed statistics give one optimal pilot for the whole horizon.
        pilot = optimizer(stats_list, noise_var, n_p, rho, options)[0]

    nmse = np.empty((horizon + 1, n_users))
    k_stars = np.full((horizon + 1, n_users), -1, dtype=int)
    states = []
    rounds_checked = 0
    mismatches = 0
    k_prev = None
    adaptive = pilot_scheme == "gmm_pilot"

    for t in range(horizon + 1):
        states.append(
            ProtocolState(
                block_index=t,
                pilot=pilot,
                k_star_prev=None if k_prev is None else tuple(k_prev),
            )
        )
        h = np.stack(
            [
                draw_channels(draw((j, t), "h"), stats_list[j], 1)[0]
                for j in range(n_users)
            ]
        )
        y = np.stack(
            [
                observe(draw((j, t), "noise"), h[j], pilot, noise_var).y
                for j in range(n_users)
            ]
        )
        need_gmm = est_kind == "gmm_est" or adaptive
        resp = None
        if need_gmm:
            params = observation_component_params(model, pilot, noise_var)
            resp = params.responsibilities(y)
        if est_kind == "gmm_est":
            h_hat = params.estimate(y, resp)
        elif est_kind == "genie_lmmse":
            h_hat = np.stack(
                [
                    EstimatorContext(
                        kind="genie_lmmse",
                        pilot=pilot,
                        noise_var=noise_var,
                        stats=stats_list[j],
                    ).estimate(y[j])
                    for j in range(n_users)
                ]
            )
        else:
            ctx = EstimatorContext(
                kind={"sample_lmmse": "sample_lmmse", "omp": "omp"}[est_kind],
                pilot=pilot,
                noise_var=noise_var,
                sample_cov=sample_cov if est_kind == "sample_lmmse" else None,
                dictionary=dictionary if est_kind == "omp" else None,
            )
            h_hat = ctx.estimate(y, true_h=h)
        nmse[t] = np.sum(np.abs(h - h_hat) ** 2, axis=1) / scenario.dim
        if resp is not None:
            k_stars[t] = np.argmax(resp, axis=1)

        if adaptive and t < horizon:
            component_covs = [model.component_pair(k) for k in k_stars[t]]
            p_bs = optimizer(component_covs, noise_var, n_p, rho, options)[0]
            p_mt = optimizer(component_covs, noise_var, n_p, rho, options)[0]
            rounds_checked += 1
            if not np.array_equal(p_bs.p, p_mt.p):
                mismatches += 1
                raise ProtocolError(
                    f"pilot mismatch between link ends at block {t}"
                )
            pilot = p_bs
            k_prev = k_stars[t]
    return nmse, k_stars, states, rounds_checked, mismatches


def run_multi_user_protocol(
    rng,
    model: GmmModel,
    stats_list,
    spec,
    options: OptimizerOptions | None = None,
    use_genie_covs: bool = False,
) -> MuProtocolResult:
    """Feedback/feedforward rounds for ``J`` users sharing one model.

    Block 0 transmits the deterministic oversampled-DFT column pilot; each
    later block's pilot is optimized from the mixture components selected by
    all users in the previous block (or from the true covariances when
    ``use_genie_covs``).  Transmitter- and terminal-side optimizer runs must
    agree bitwise; divergence raises :class:`ProtocolError`.
    """
    scenario = _scenario(spec)
    options = options or getattr(spec, "optimizer", None) or OptimizerOptions()
    draw = rng if callable(rng) else _sequential_draw(rng)
    scheme = ("genie_pilot" if use_genie_covs else "gmm_pilot", "gmm_est")
    nmse, k_stars, states, checked, mismatches = _mu_blocks(
        scenario, stats_list, scheme, model, options, None, None, draw
    )
    return MuProtocolResult(
        nmse=nmse.mean(axis=1),
        nmse_per_user=nmse,
        k_stars=k_stars,
        states=states,
        rounds_checked=checked,
        mismatches=mismatches,
    )


# ----------------------------------------------------------------------
# Experiment runner


def fit_model_for_spec(
    spec: ExperimentSpec,
    k_tx: int | None = None,
    k_rx: int | None = None,
    training=None,
) -> GmmModel:
    """Fit the mixture used by an experiment (training seed stream)."""
    scenario = spec.scenario
    if training is None:
        training = training_dataset(spec)
    k_tx = spec.k_tx if k_tx is None else k_tx
    k_rx = spec.k_rx if k_rx is None else k_rx
    if scenario.n_rx == 1:
        k_rx = 1
    return fit_kronecker_gmm(
        derive_rng(scenario.seed, "fit", k_tx, k_rx),
        training,
        k_tx,
        k_rx,
        max_iters=spec.em_max_iters,
        tol=spec.em_tol,
    )


def training_dataset(spec: ExperimentSpec):
    return generate_dataset(
        derive_rng(spec.scenario.seed, "train"),
        spec.scenario,
        spec.m_train,
        keep_stats=False,
    )


def sample_covariance(h: np.ndarray) -> np.ndarray:
    """Zero-mean sample covariance of vectorized channels (m, N)."""
    m = h.shape[0]
    return herm(h.T @ h.conj() / m)


def eval_stats_pool(spec: ExperimentSpec) -> list:
    """Evaluation users: fresh statistics, disjoint from the training stream."""
    scenario = spec.scenario
    return [
        sample_scenario_stats(
            derive_rng(scenario.seed, "eval-stats", i), scenario
        )
        for i in range(spec.m_eval)
    ]


def _needs(spec: ExperimentSpec, estimator: str) -> bool:
    return any(est == estimator for _, est in spec.schemes)


def _point_scenario(spec: ExperimentSpec, value) -> ScenarioConfig:
    if spec.sweep_name == "snr_db":
        return dataclasses.replace(spec.scenario, snr_db=float(value))
    return spec.scenario


def _point_options(spec: ExperimentSpec, value) -> OptimizerOptions:
    if spec.sweep_name == "l_max":
        return dataclasses.replace(spec.optimizer, l_max=int(value))
    return spec.optimizer


def _su_samples(spec, scenario, scheme, model, codebook, aux, point_key):
    """NMSE per (user, block) for one single-user scheme: (m_eval, T+1)."""
    sample_cov, dictionary, pool = aux
    out = np.empty((spec.m_eval, scenario.n_blocks + 1))
    seed = spec.scenario.seed
    for u, stats in enumerate(pool):
        def draw(block, tag, _u=u):
            return derive_rng(seed, "su", point_key, _u, block, tag)

        out[u] = _su_scheme_blocks(
            scenario, stats, scheme, model, codebook, sample_cov, dictionary, draw
        )
    return out


def _mu_samples(spec, scenario, scheme, model, options, aux, point_key):
    """NMSE per (constellation, block, user): (m_con, T+1, J)."""
    sample_cov, dictionary, pool = aux
    seed = spec.scenario.seed
    n_users = scenario.n_users
    out = np.empty((spec.m_con, scenario.n_blocks + 1, n_users))
    for c in range(spec.m_con):
        members = derive_rng(seed, "con", point_key, c).choice(
            len(pool), size=n_users, replace=False
        )
        stats_list = [pool[i] for i in members]

        def draw(user_block, tag, _c=c):
            return derive_rng(seed, "mu", point_key, _c, user_block, tag)

        nmse, _, _, _, _ = _mu_blocks(
            scenario,
            stats_list,
            scheme,
            model,
            options,
            sample_cov,
            dictionary,
            draw,
        )
        out[c] = nmse
    return out


def _run_task(payload) -> list[dict]:
    """Worker: all rows for one (sweep point, scheme) pair."""
    spec: ExperimentSpec = payload["spec"]
    value = payload["value"]
    scheme = payload["scheme"]
    model: GmmModel = payload["model"]
    sample_cov = payload["sample_cov"]
    started = time.perf_counter()

    scenario = _point_scenario(spec, value)
    options = _point_options(spec, value)
    dictionary = (
        omp_dictionary(scenario.n_tx, scenario.n_rx, spec.oversampling)
        if scheme[1] == "omp"
        else None
    )
    pool = eval_stats_pool(spec)
    codebook = (
        build_pilot_codebook(model, scenario.n_pilots, scenario.rho)
        if model is not None and spec.mode == "su"
        else None
    )
    aux = (sample_cov, dictionary, pool)
    point_key = (spec.sweep_name, repr(value))

    if spec.mode == "su":
        samples = _su_samples(
            spec, scenario, scheme, model, codebook, aux, point_key
        )
        per_block = {t: samples[:, t] for t in range(scenario.n_blocks + 1)}
    else:
        samples = _mu_samples(
            spec, scenario, scheme, model, options, aux, point_key
        )
        per_block = {
            t: samples[:, t, :].reshape(-1)
            for t in range(scenario.n_blocks + 1)
        }
    wall_ms = (time.perf_counter() - started) * 1000.0

    def row(sweep_value, values) -> dict:
        ci = bootstrap_ci(
            values,
            derive_rng(spec.scenario.seed, "boot", point_key, scheme, sweep_value),
        )
        mean = float(np.mean(values))
        return {
            "sweep_name": spec.sweep_name,
            "sweep_value": sweep_value,
            "pilot_scheme": scheme[0],
            "estimator": scheme[1],
            "mean_nmse": mean,
            "nmse_db": 10.0 * np.log10(mean) if mean > 0 else float("-inf"),
            "ci_lo": ci[0],
            "ci_hi": ci[1],
            "n_samples": int(np.size(values)),
            "seed": spec.scenario.seed,
            "wall_ms": wall_ms,
        }

    if spec.sweep_name == "block_index":
        return [row(int(t), per_block[int(t)]) for t in payload["block_values"]]
    return [row(value, per_block[spec.eval_block])]


def _safe_run_task(payload) -> list[dict]:
    """Run one task, flagging failures as NaN rows so the sweep continues."""
    try:
        return _run_task(payload)
    except Exception:
        spec: ExperimentSpec = payload["spec"]
        logger.exception(
            "task failed: %s %s", payload["value"], payload["scheme"]
        )
        return [
            {
                "sweep_name": spec.sweep_name,
                "sweep_value": payload["value"],
                "pilot_scheme": payload["scheme"][0],
                "estimator": payload["scheme"][1],
                "mean_nmse": float("nan"),
                "nmse_db": float("nan"),
                "ci_lo": float("nan"),
                "ci_hi": float("nan"),
                "n_samples": 0,
                "seed": spec.scenario.seed,
                "wall_ms": 0.0,
            }
        ]


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FDDPL_THREADS", "1")))
    except ValueError:
        return 1


def run_experiment(spec: ExperimentSpec) -> list[dict]:
    """Run all sweep points and schemes; returns (and optionally writes) rows.

    Failures of individual (point, scheme) tasks are flagged as NaN rows and
    the run continues.  With ``FDDPL_THREADS > 1`` tasks run in a process
    pool; results are identical to the serial path.
    """
    training = None
    sample_cov = None
    if _needs(spec, "sample_lmmse"):
        training = training_dataset(spec)
        sample_cov = sample_covariance(training.h)

    models: dict = {}
    if spec.sweep_name == "component_counts":
        for value in spec.sweep_values:
            total_k = int(value)
            k_rx = 1 if spec.scenario.n_rx == 1 else spec.k_rx
            if total_k % k_rx:
                raise ValueError(
                    f"component count {total_k} not divisible by k_rx={k_rx}"
                )
            if training is None:
                training = training_dataset(spec)
            models[value] = fit_model_for_spec(
                spec, k_tx=total_k // k_rx, k_rx=k_rx, training=training
            )
    elif any(
        pilot == "gmm_pilot" or est == "gmm_est"
        for pilot, est in spec.schemes
    ):
        if training is None:
            training = training_dataset(spec)
        shared = fit_model_for_spec(spec, training=training)
        models = {value: shared for value in spec.sweep_values}
    else:
        models = {value: None for value in spec.sweep_values}

    if spec.sweep_name == "block_index":
        points = [spec.sweep_values[0]]
        block_values = tuple(int(t) for t in spec.sweep_values)
    else:
        points = list(spec.sweep_values)
        block_values = ()

    tasks = [
        {
            "spec": spec,
            "value": value,
            "scheme": scheme,
            "model": models.get(value, models.get(points[0])),
            "sample_cov": sample_cov,
            "block_values": block_values,
        }
        for value in points
        for scheme in spec.schemes
    ]

    rows: list[dict] = []
    n_workers = worker_count()
    if n_workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_safe_run_task, tasks))
    else:
        results = [_safe_run_task(task) for task in tasks]
    for chunk in results:
        rows.extend(chunk)

    if spec.output_path:
        write_rows_csv(spec.output_path, rows)
    return rows


def write_rows_csv(path, rows) -> None:
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(CSV_COLUMNS))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in CSV_COLUMNS})
