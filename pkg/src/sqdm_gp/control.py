"""Two-degree-of-freedom scan orchestrator.

Per line: the forward pass applies Vb = Vb_ff + Vb_fb, with the
feedforward taken from the current line prediction and the feedback from
the extremum seeking controller; the backward pass (the compute slot,
half the line period) runs hyperparameter adaptation, refits the model on
its active window and predicts the next line. Compute is charged on a
simulated clock from measured wall time; exceeding the budget delays the
scan and is recorded, it does not change the data path. Loss of dip lock
aborts the scan, mirroring the interrupted runs in the reference study.

The first line bootstraps feedback-only with a slow spectroscopic sweep
per pixel; no model exists yet. Model "none" reproduces the pre-learning
baseline: the feedforward for line j+1 is line j's tracked values.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .core import Dataset, GridSpec, NEGATIVE, POLARITIES, ScanResult, _frozen_array
from . import gp_exact, hyperopt, plant, sparse_fitc, sparse_kron, sparse_sod, sparse_ssgpr
from .hyperopt import OptimizerConfig
from .kernels import SE_ARD, SE_ISO, HyperParams, kernel_matrix
from .plant import EscConfig, EscState, Phantom

MODEL_NONE = "none"
MODEL_SOD_SW = "sod-sw"
MODEL_SOD_EGP = "sod-egp"
MODEL_SOD_CLUSTER = "sod-cluster"
MODEL_KRON = "kron"
MODEL_FITC = "fitc"
MODEL_SSGPR = "ssgpr"
MODEL_KINDS = (MODEL_NONE, MODEL_SOD_SW, MODEL_SOD_EGP, MODEL_SOD_CLUSTER,
               MODEL_KRON, MODEL_FITC, MODEL_SSGPR)

#: active window in complete scan lines: five for the inducing/spectral
#: methods, two for subset-of-data and the Kronecker method
WINDOW_LINES = {
    MODEL_SOD_SW: 2, MODEL_SOD_EGP: 2, MODEL_SOD_CLUSTER: 2, MODEL_KRON: 2,
    MODEL_FITC: 5, MODEL_SSGPR: 5,
}

M_FRACTION = 1.0 / 3.0


def active_window_lines(model: str) -> int:
    return WINDOW_LINES.get(model, 0)


def m_for(n: int, fraction: float = M_FRACTION) -> int:
    """Inducing-input / spectral-point count: one third of the active data."""
    return max(1, math.ceil(n * fraction))


@dataclass(frozen=True)
class ScanConfig:
    total_time_s: float
    polarity: str = NEGATIVE
    model: str = MODEL_NONE
    window_lines: Optional[int] = None          # None: per-model default
    m_fraction: float = M_FRACTION
    optimizer: OptimizerConfig = field(
        # three CG iterations per line keep the compute slot well under its
        # budget and make scans deterministic (no wall-clock dependence)
        default_factory=lambda: OptimizerConfig(max_cg_iters=3))
    esc: EscConfig = field(default_factory=EscConfig)
    egp_err_threshold: float = 0.005
    egp_var_threshold: float = 2.5e-5
    k_clusters: int = 4
    adapt_wall_budget_s: Optional[float] = None  # optional hard wall cap
    #: fraction of the backward period the tip sits parked at the next
    #: line's start with the loop closed (turnaround settle)
    settle_fraction: float = 0.5

    def __post_init__(self):
        if self.total_time_s <= 0:
            raise ValueError("total scan time must be positive")
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}")
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}")

    def line_time_s(self, ny: int) -> float:
        return self.total_time_s / ny

    def backward_budget_s(self, ny: int) -> float:
        """Half the line period: forward half acquires, backward half computes."""
        return self.line_time_s(ny) / 2.0

    @property
    def effective_window(self) -> int:
        if self.window_lines is not None:
            return self.window_lines
        return active_window_lines(self.model)


@dataclass(frozen=True)
class LinePrediction:
    line_index: int
    ff: np.ndarray    # per-column feedforward voltages, length nx
    var: np.ndarray   # predictive variances, length nx

    def __post_init__(self):
        ff = _frozen_array(self.ff, ndim=1)
        var = _frozen_array(self.var, ndim=1)
        if ff.shape != var.shape:
            raise ValueError("ff and var lengths differ")
        if not (np.isfinite(ff).all() and np.isfinite(var).all()):
            raise ValueError("line prediction must be finite")
        object.__setattr__(self, "ff", ff)
        object.__setattr__(self, "var", var)


@dataclass(frozen=True)
class _ClusterFit:
    """Per-cluster exact GP models plus centroids for routing."""

    kind: str
    hyper: HyperParams
    centroids: np.ndarray
    models: tuple


def window_dataset(rows: list[np.ndarray], grid: GridSpec, j: int,
                   n_lines: int, polarity: str) -> Dataset:
    """Training data of the last n_lines complete lines ending at line j,
    in raster (acquisition) order."""
    first = max(0, j - n_lines + 1)
    inputs = np.vstack([grid.line_positions(line) for line in range(first, j + 1)])
    targets = np.concatenate([rows[line] for line in range(first, j + 1)])
    return Dataset(inputs, targets, polarity)


def predict_next_line(model: str, fitted, grid: GridSpec, j: int,
                      prev_line: Optional[np.ndarray] = None) -> LinePrediction:
    """Feedforward for line j+1 from a model fitted on the active window.

    Model "none" copies line j's tracked values (zero variance); everything
    else evaluates its posterior mean at the nx inputs of line j+1.
    """
    if j + 1 >= grid.ny:
        raise ValueError("no next line to predict")
    if model == MODEL_NONE:
        if prev_line is None:
            raise ValueError("baseline prediction needs the previous line")
        return LinePrediction(j + 1, np.array(prev_line, dtype=float),
                              np.zeros(grid.nx))
    if fitted is None:
        raise ValueError("model not fitted on the active window")
    test = grid.line_positions(j + 1)
    if model == MODEL_KRON:
        post = sparse_kron.kron_predict(fitted, test)
    elif model == MODEL_FITC:
        post = sparse_fitc.fitc_predict(fitted, test)
    elif model == MODEL_SSGPR:
        post = sparse_ssgpr.ssgpr_predict(fitted, test)
    elif model == MODEL_SOD_CLUSTER:
        post = _cluster_predict(fitted, test)
    else:
        post = gp_exact.predict(fitted, test)
    return LinePrediction(j + 1, post.mean, post.variance)


def _cluster_predict(fit: _ClusterFit, test: np.ndarray):
    sim = kernel_matrix(fit.kind, fit.hyper, test, fit.centroids)
    route = np.argmax(sim, axis=1)
    mean = np.empty(test.shape[0])
    var = np.empty(test.shape[0])
    for c, model in enumerate(fit.models):
        mask = route == c
        if mask.any():
            post = gp_exact.predict(model, test[mask])
            mean[mask] = post.mean
            var[mask] = post.variance
    return gp_exact.GpPosterior(mean, np.diag(var))


class _ModelDriver:
    """Owns the per-scan model state: hyperparameters, method extras and
    the fitted predictor, refreshed once per completed line."""

    def __init__(self, cfg: ScanConfig, grid: GridSpec, seed: int):
        self.cfg = cfg
        self.grid = grid
        self.seed = seed
        self.hyper: Optional[HyperParams] = None
        self.fitted = None
        self.prev_row: Optional[np.ndarray] = None
        self.egp_active: Optional[sparse_sod.ActiveSet] = None
        self.kernel_kind = SE_ISO if cfg.model in (MODEL_FITC, MODEL_SSGPR) \
            else SE_ARD

    def _init_hyper(self, first_row: np.ndarray) -> None:
        pitches = (self.grid.pitch_x, self.grid.pitch_y)
        self.hyper = hyperopt.initial_hyperparams(
            first_row, pitches, kind=self.kernel_kind)

    def _window(self, rows, j) -> Dataset:
        return window_dataset(rows, self.grid, j, self.cfg.effective_window,
                              self.cfg.polarity)

    def _adapt_kind(self) -> str:
        return {MODEL_FITC: "fitc", MODEL_SSGPR: "ssgpr",
                MODEL_KRON: "kron"}.get(self.cfg.model, "exact")

    def _refresh_extras(self, window: Dataset) -> None:
        model = self.cfg.model
        if model == MODEL_FITC:
            m = m_for(len(window), self.cfg.m_fraction)
            if self.hyper.extras is None or self.hyper.extras.shape[0] != m:
                ind = sparse_fitc.inducing_subgrid(window.inputs,
                                                   self.cfg.m_fraction)
                self.hyper = self.hyper.replace(extras=ind)
        elif model == MODEL_SSGPR:
            m = m_for(len(window), self.cfg.m_fraction)
            if self.hyper.extras is None or self.hyper.extras.shape[0] != m:
                freqs = sparse_ssgpr.init_frequencies(
                    m, self.hyper.lengths, seed=self.seed)
                self.hyper = self.hyper.replace(extras=freqs)

    def update(self, rows: list[np.ndarray], j: int) -> dict:
        """Backward-pass work after line j: adapt theta, refit, and leave
        the driver ready to predict line j+1. Returns diagnostics."""
        info: dict = {"line": j, "objective_trace": []}
        if self.cfg.model == MODEL_NONE:
            self.prev_row = rows[j]
            return info
        if self.hyper is None:
            self._init_hyper(rows[0])
        window = self._window(rows, j)
        self._refresh_extras(window)
        adapt_data = window
        if self.cfg.model == MODEL_SOD_EGP:
            adapt_data = self._egp_ingest(rows, j)
        trace: list[float] = []
        self.hyper = hyperopt.per_line_adapt(
            self._adapt_kind(), self.hyper, adapt_data, self.cfg.optimizer,
            budget_s=self.cfg.adapt_wall_budget_s, callback=trace.append)
        info["objective_trace"] = trace
        info["window_n"] = len(adapt_data)
        self._fit(adapt_data)
        self.prev_row = rows[j]
        return info

    def _egp_ingest(self, rows, j) -> Dataset:
        """Stream new points through the evolving-GP acceptance rule."""
        capacity = 2 * self.grid.nx
        if self.egp_active is None:
            self.egp_active = sparse_sod.ActiveSet.empty(
                capacity, self.cfg.polarity)
            model = None
        else:
            model = self.fitted
        positions = self.grid.line_positions(j)
        cfg = self.cfg
        for i in range(self.grid.nx):
            point = sparse_sod.SamplePoint(
                (float(positions[i, 0]), float(positions[i, 1])),
                float(rows[j][i]))
            self.egp_active, accepted = sparse_sod.update_evolving(
                self.egp_active, model, point,
                cfg.egp_err_threshold, cfg.egp_var_threshold)
            if accepted:
                model = gp_exact.fit(SE_ARD, self.hyper,
                                     self.egp_active.points)
        return self.egp_active.points

    def _fit(self, data: Dataset) -> None:
        model = self.cfg.model
        if model == MODEL_FITC:
            self.fitted = sparse_fitc.fitc_fit(self.hyper, data)
        elif model == MODEL_SSGPR:
            self.fitted = sparse_ssgpr.ssgpr_fit(self.hyper, data)
        elif model == MODEL_KRON:
            self.fitted = sparse_kron.kron_fit(self.hyper, data)
        elif model == MODEL_SOD_CLUSTER:
            k = min(self.cfg.k_clusters, len(data))
            sets = sparse_sod.cluster_kmeans(
                data, k, SE_ARD, self.hyper,
                rng=np.random.default_rng(self.seed + 7919))
            models = tuple(gp_exact.fit(SE_ARD, self.hyper, s.points)
                           for s in sets)
            cents = np.array([s.points.inputs.mean(axis=0) for s in sets])
            self.fitted = _ClusterFit(SE_ARD, self.hyper, cents, models)
        else:
            self.fitted = gp_exact.fit(SE_ARD, self.hyper, data)

    def predict_line(self, j: int) -> LinePrediction:
        return predict_next_line(self.cfg.model, self.fitted, self.grid,
                                 j - 1, prev_line=self.prev_row)


def run_scan(phantom: Phantom, cfg: ScanConfig, seed: int = 0,
             on_line: Optional[Callable] = None,
             log_samples: bool = False) -> ScanResult:
    """Simulate one full raster scan. Deterministic given (phantom, cfg,
    seed); aborts (never raises) when the dip lock is lost."""
    grid = phantom.grid
    ny, nx = grid.shape
    if ny < 2:
        raise ValueError("scanning needs at least two lines")
    cfg.esc.validate_against(phantom)
    t_forward = cfg.line_time_s(ny) / 2.0
    x_path, pixel_of_step = plant.line_scan_plan(grid, t_forward, cfg.esc.dt)

    rng = np.random.default_rng(seed)
    image = np.zeros(grid.shape)
    lock = np.zeros(grid.shape, dtype=bool)
    compute = np.zeros(ny)
    sample_log: Optional[dict] = {"vb_applied": [], "vb_ff": [], "vb_fb": []} \
        if log_samples else None

    # line 0: feedback-only bootstrap with a slow per-pixel sweep
    xs = grid.x_coords()
    image[0] = [plant.sweep_dip_minimum(phantom, cfg.polarity, (x, 0.0), rng)
                for x in xs]
    lock[0] = True

    driver = _ModelDriver(cfg, grid, seed)
    t0 = time.perf_counter()
    info = driver.update([image[0]], 0)
    compute[0] = time.perf_counter() - t0
    if on_line is not None:
        on_line(info)

    aborted = False
    abort_line: Optional[int] = None
    esc_t = 0.0
    for j in range(1, ny):
        try:
            pred = driver.predict_line(j)
        except (gp_exact.FitError, ValueError):
            # a diverged or degenerate model cannot drive the bias; the
            # physical consequence is loss of lock, so the scan aborts
            aborted = True
            abort_line = j
            break
        vd_path = phantom.dip_voltage(cfg.polarity, x_path,
                                      np.full(x_path.shape[0], j * grid.pitch_y))
        state = EscState(t=esc_t)
        trace = plant.integrate_line(cfg.esc, state, pred.ff, vd_path,
                                     pixel_of_step, phantom, rng=rng,
                                     log_samples=log_samples)
        esc_t = trace.state.t
        image[j] = trace.tracked
        lock[j] = trace.locked
        if sample_log is not None:
            sample_log["vb_applied"].append(trace.vb_applied)
            sample_log["vb_ff"].append(trace.vb_ff)
            sample_log["vb_fb"].append(trace.vb_fb)
        if trace.lost_at is not None:
            aborted = True
            abort_line = j
            image[j, trace.lost_at:] = 0.0
            break
        if j + 1 < ny:
            t0 = time.perf_counter()
            try:
                info = driver.update([image[k] for k in range(j + 1)], j)
            except (gp_exact.FitError, ValueError):
                aborted = True
                abort_line = j + 1
                break
            compute[j] = time.perf_counter() - t0
            if on_line is not None:
                on_line(info)
    return ScanResult(image, lock, compute, aborted=aborted,
                      abort_line=abort_line, sample_log=sample_log)


@dataclass(frozen=True)
class BudgetReport:
    """Per-line compute durations against the backward-scan budget."""

    budget_s: float
    compute_s: np.ndarray
    locked: np.ndarray

    @property
    def fraction(self) -> np.ndarray:
        return self.compute_s / self.budget_s

    @property
    def avg_compute_s(self) -> float:
        return float(np.mean(self.compute_s))

    @property
    def max_compute_s(self) -> float:
        return float(np.max(self.compute_s))

    @property
    def avg_fraction(self) -> float:
        return self.avg_compute_s / self.budget_s

    @property
    def max_fraction(self) -> float:
        return self.max_compute_s / self.budget_s

    def to_csv(self) -> str:
        lines = ["line,compute_s,budget_s,fraction,locked"]
        for i in range(self.compute_s.shape[0]):
            lines.append(f"{i},{self.compute_s[i]:.6f},{self.budget_s:.6f},"
                         f"{self.fraction[i]:.6f},{int(self.locked[i])}")
        return "\n".join(lines) + "\n"


def compute_budget_report(result: ScanResult, cfg: ScanConfig) -> BudgetReport:
    ny = result.shape[0]
    return BudgetReport(budget_s=cfg.backward_budget_s(ny),
                        compute_s=result.line_compute_s.copy(),
                        locked=result.lock_map.all(axis=1))
