"""Simulated microscope: synthetic surface phantoms, the dip-shaped
frequency spectrum, and the dither-demodulation extremum seeking controller.

The spectrum at tip position r and bias Vb is

    df(Vb, r) = slope * Vb^2 - depth * exp(-(Vb - Vd(r))^2 / (2 w^2)) + noise

an inverted Gaussian dip of depth (Hz) and width w (V) riding on a
locally flat quadratic background, so the minimizer over Vb coincides
with the ground-truth dip voltage Vd(r) up to a negligible bias. Vd is
the V- or V+ map sampled bilinearly for continuous tip motion.

The ESC injects a sin(omega t) onto the applied bias, demodulates the
measured frequency shift with the same sinusoid through a first-order
low pass, and integrates the result with negative gain, descending the
dip. Tracking holds only while the applied bias stays inside the dip;
leaving it clears the lock flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import (GridSpec, NEGATIVE, POLARITIES, POSITIVE, _frozen_array,
                   format_matrix, parse_matrix)

#: default dip and controller scales; chosen so a feedback-only scan fails
#: at fast scan rates but succeeds at slow ones
DIP_DEPTH = 2.0          # Hz
DIP_WIDTH = 0.1          # V
BACKGROUND_SLOPE = 5e-4  # Hz/V^2, locally flat relative to the dip
NOISE_STD = 0.05         # Hz

R1 = "r1"
R2 = "r2"
PHANTOM_KINDS = (R1, R2)
_DEFAULT_GRIDS = {R1: (63, 63), R2: (200, 200)}


@dataclass(frozen=True)
class Phantom:
    """Ground-truth V-(x, y) and V+(x, y) maps plus dip-shape parameters."""

    grid: GridSpec
    v_minus: np.ndarray
    v_plus: np.ndarray
    dip_depth: float = DIP_DEPTH
    dip_width: float = DIP_WIDTH
    background_slope: float = BACKGROUND_SLOPE
    noise_std: float = NOISE_STD

    def __post_init__(self):
        vm = _frozen_array(self.v_minus, ndim=2)
        vp = _frozen_array(self.v_plus, ndim=2)
        if vm.shape != self.grid.shape or vp.shape != self.grid.shape:
            raise ValueError("map dimensions must equal the grid shape")
        if not (vm < 0).all() or not (vp > 0).all():
            raise ValueError("need v_minus < 0 < v_plus everywhere")
        object.__setattr__(self, "v_minus", vm)
        object.__setattr__(self, "v_plus", vp)

    def truth(self, polarity: str) -> np.ndarray:
        if polarity == NEGATIVE:
            return self.v_minus
        if polarity == POSITIVE:
            return self.v_plus
        raise ValueError(f"unknown polarity {polarity!r}")

    def dip_voltage(self, polarity: str, x, y):
        """Vd at continuous tip positions by bilinear interpolation,
        clamped to the grid. Accepts scalars or arrays."""
        vmap = self.truth(polarity)
        gx = np.clip(np.asarray(x, dtype=float) / self.grid.pitch_x,
                     0.0, self.grid.nx - 1.0)
        gy = np.clip(np.asarray(y, dtype=float) / self.grid.pitch_y,
                     0.0, self.grid.ny - 1.0)
        i0 = np.minimum(gx.astype(int), self.grid.nx - 2) \
            if self.grid.nx > 1 else np.zeros_like(gx, dtype=int)
        j0 = np.minimum(gy.astype(int), self.grid.ny - 2) \
            if self.grid.ny > 1 else np.zeros_like(gy, dtype=int)
        fx = gx - i0
        fy = gy - j0
        i1 = np.minimum(i0 + 1, self.grid.nx - 1)
        j1 = np.minimum(j0 + 1, self.grid.ny - 1)
        return ((1 - fy) * ((1 - fx) * vmap[j0, i0] + fx * vmap[j0, i1])
                + fy * ((1 - fx) * vmap[j1, i0] + fx * vmap[j1, i1]))


def _bump_field(grid: GridSpec, n_bumps: int, rng, max_step: float) -> np.ndarray:
    """Sum of smooth radial Gaussian bumps, rescaled so the per-pixel first
    difference never exceeds max_step and the total excursion stays small."""
    xs = grid.x_coords()
    ys = grid.y_coords()
    XX, YY = np.meshgrid(xs, ys)
    field = np.zeros(grid.shape)
    for _ in range(n_bumps):
        amp = rng.uniform(-0.15, 0.15)
        cx = rng.uniform(xs[0], xs[-1]) if grid.nx > 1 else 0.0
        cy = rng.uniform(ys[0], ys[-1]) if grid.ny > 1 else 0.0
        width = rng.uniform(5.0, 12.0) * max(grid.pitch_x, grid.pitch_y)
        field += amp * np.exp(-((XX - cx) ** 2 + (YY - cy) ** 2)
                              / (2.0 * width ** 2))
    if n_bumps == 0:
        return field
    step = 0.0
    if grid.nx > 1:
        step = max(step, float(np.max(np.abs(np.diff(field, axis=1)))))
    if grid.ny > 1:
        step = max(step, float(np.max(np.abs(np.diff(field, axis=0)))))
    if step > 0.95 * max_step:
        field *= 0.95 * max_step / step
    peak = float(np.max(np.abs(field)))
    if peak > 0.25:
        field *= 0.25 / peak
    return field


def make_phantom(kind: str = R1, grid: Optional[GridSpec] = None,
                 seed: int = 0, n_bumps: Optional[int] = None,
                 **dip_kw) -> Phantom:
    """Seeded synthetic surface: molecule-like radial bumps on flat offsets
    (-0.6 V and +0.6 V). R2 uses the larger grid with more features.
    n_bumps overrides the seeded count (0 gives constant maps)."""
    if kind not in PHANTOM_KINDS:
        raise ValueError(f"phantom kind must be one of {PHANTOM_KINDS}")
    if grid is None:
        nx, ny = _DEFAULT_GRIDS[kind]
        grid = GridSpec(nx, ny)
    rng = np.random.default_rng(seed)
    lo, hi = (3, 5) if kind == R1 else (6, 8)
    count = int(rng.integers(lo, hi + 1)) if n_bumps is None else int(n_bumps)
    width = dip_kw.get("dip_width", DIP_WIDTH)
    v_minus = -0.6 + _bump_field(grid, count, rng, max_step=width / 4.0)
    v_plus = 0.6 + _bump_field(grid, count, rng, max_step=width / 4.0)
    return Phantom(grid, v_minus, v_plus, **dip_kw)


def spectrum_eval(phantom: Phantom, polarity: str, vb: float, r,
                  rng=None) -> float:
    """One noisy frequency-shift sample df(Vb, r) in Hz. Noise is drawn
    from rng when given; omit rng for the noise-free spectrum."""
    x, y = r
    vd = float(phantom.dip_voltage(polarity, x, y))
    df = (phantom.background_slope * vb * vb
          - phantom.dip_depth * math.exp(-(vb - vd) ** 2
                                         / (2.0 * phantom.dip_width ** 2)))
    if rng is not None and phantom.noise_std > 0.0:
        df += phantom.noise_std * rng.standard_normal()
    return df


# ---------------------------------------------------------------------------
# Extremum seeking controller
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EscConfig:
    dither_amp: float = 0.02            # a, V
    dither_omega: float = 2.0 * math.pi * 200.0  # rad/s
    gain: float = 15.0                  # integrator gain k_i
    lowpass_tau: float = 0.02           # demodulation low-pass, s
    dt: float = 5e-5                    # sample step, s

    def __post_init__(self):
        if min(self.dither_amp, self.dither_omega, self.gain,
               self.lowpass_tau, self.dt) <= 0:
            raise ValueError("ESC parameters must be positive")
        period = 2.0 * math.pi / self.dither_omega
        if self.dt > period / 20.0:
            raise ValueError("need at least 20 samples per dither period")

    def validate_against(self, phantom: Phantom) -> None:
        if self.dither_amp >= phantom.dip_width / 2.0:
            raise ValueError("dither amplitude must stay below half the dip width")


@dataclass(frozen=True)
class EscState:
    t: float = 0.0
    integrator: float = 0.0   # Vb_fb minus the dither
    lowpass: float = 0.0
    locked: bool = True

    @property
    def vb_feedback(self) -> float:
        return self.integrator


def esc_step(cfg: EscConfig, state: EscState, vb_ff: float,
             phantom: Phantom, polarity: str, r, rng=None) -> EscState:
    """One dither-demodulate-integrate step; reference semantics for the
    vectorized line integration. Applied bias is vb_ff + integrator +
    dither; the lock flag latches false once the bias leaves the dip."""
    s = math.sin(cfg.dither_omega * state.t)
    vb = vb_ff + state.integrator + cfg.dither_amp * s
    df = spectrum_eval(phantom, polarity, vb, r, rng=rng)
    z = state.lowpass + (cfg.dt / cfg.lowpass_tau) * (df * s - state.lowpass)
    v = state.integrator - cfg.gain * cfg.dt * z
    x, y = r
    vd = float(phantom.dip_voltage(polarity, x, y))
    locked = state.locked and abs(vb - vd) <= phantom.dip_width
    return EscState(t=state.t + cfg.dt, integrator=v, lowpass=z, locked=locked)


@dataclass
class LineTrace:
    """Per-pixel outcome of one forward line pass."""

    tracked: np.ndarray        # dwell-averaged dither-free bias per pixel
    locked: np.ndarray         # bool per pixel
    state: EscState            # controller state after the line
    lost_at: Optional[int]     # first pixel where the lock broke, or None
    vb_applied: Optional[np.ndarray] = None
    vb_ff: Optional[np.ndarray] = None
    vb_fb: Optional[np.ndarray] = None


def integrate_line(cfg: EscConfig, state: EscState, ff_per_pixel: np.ndarray,
                   vd_path: np.ndarray, pixel_of_step: np.ndarray,
                   phantom: Phantom, rng=None, log_samples: bool = False,
                   ) -> LineTrace:
    """Fast forward pass over one line.

    vd_path holds the ground-truth dip voltage at each sample along the
    continuous tip path, pixel_of_step maps samples to pixels, and
    ff_per_pixel is the feedforward bias applied while inside each pixel.
    Arithmetic is step-for-step identical to esc_step.
    """
    nsteps = vd_path.shape[0]
    nx = ff_per_pixel.shape[0]
    omega, a = cfg.dither_omega, cfg.dither_amp
    dt = cfg.dt
    c_lp = dt / cfg.lowpass_tau
    c_int = cfg.gain * dt
    slope = phantom.background_slope
    depth = phantom.dip_depth
    inv2w2 = 1.0 / (2.0 * phantom.dip_width ** 2)

    sinw = np.sin(omega * (state.t + dt * np.arange(nsteps)))
    if rng is not None and phantom.noise_std > 0.0:
        noise = phantom.noise_std * rng.standard_normal(nsteps)
    else:
        noise = np.zeros(nsteps)
    ff_steps = ff_per_pixel[pixel_of_step]

    v = state.integrator
    z = state.lowpass
    v_arr = np.empty(nsteps)
    exp = math.exp
    ffs = ff_steps.tolist()
    vds = vd_path.tolist()
    sws = sinw.tolist()
    nss = noise.tolist()
    for k in range(nsteps):
        v_arr[k] = v
        s = sws[k]
        vb = ffs[k] + v + a * s
        u = vb - vds[k]
        df = slope * vb * vb - depth * exp(-u * u * inv2w2) + nss[k]
        z += c_lp * (df * s - z)
        v -= c_int * z
    vb_fb = v_arr + a * sinw
    vb_applied = ff_steps + vb_fb   # the 2DOF sum, exact by construction
    in_dip = np.abs(vb_applied - vd_path) <= phantom.dip_width
    dither_free = ff_steps + v_arr

    tracked = np.zeros(nx)
    locked = np.zeros(nx, dtype=bool)
    counts = np.bincount(pixel_of_step, minlength=nx)
    sums = np.bincount(pixel_of_step, weights=dither_free, minlength=nx)
    ok = counts > 0
    tracked[ok] = sums[ok] / counts[ok]
    locked[ok] = np.bincount(pixel_of_step, weights=~in_dip,
                             minlength=nx)[ok] == 0
    locked &= state.locked
    lost = None
    if not locked.all():
        lost = int(np.argmin(locked))
        locked[lost:] = False
    new_state = EscState(t=state.t + nsteps * dt, integrator=v, lowpass=z,
                         locked=state.locked and lost is None)
    trace = LineTrace(tracked, locked, new_state, lost)
    if log_samples:
        trace.vb_applied = vb_applied
        trace.vb_ff = ff_steps
        trace.vb_fb = vb_fb
    return trace


def line_scan_plan(grid: GridSpec, forward_time_s: float, dt: float):
    """Sample positions and pixel assignment for one forward line pass.

    The tip moves at constant speed from x = 0 to x = (nx-1) pitch; pixel
    windows are centered on the pixel positions so each dwell average is
    unbiased. Returns (x_path, pixel_of_step).
    """
    nsteps = int(round(forward_time_s / dt))
    if nsteps < 2 * grid.nx:
        raise ValueError(
            f"forward pass of {forward_time_s:.3g} s gives fewer than two "
            f"ESC samples per pixel at dt={dt:g}")
    tau = (np.arange(nsteps) + 0.5) * dt
    span = (grid.nx - 1) * grid.pitch_x
    x_path = span * tau / forward_time_s
    if grid.nx == 1:
        return np.zeros(nsteps), np.zeros(nsteps, dtype=int)
    pixel = np.rint(x_path / grid.pitch_x).astype(int)
    return x_path, np.clip(pixel, 0, grid.nx - 1)


def sweep_dip_minimum(phantom: Phantom, polarity: str, r, rng=None,
                      coarse_step: float = 5e-3, fine_step: float = 1e-4,
                      ) -> float:
    """Spectroscopic bootstrap: coarse sweep over the polarity's bias range,
    then a fine sweep around the best candidate. Returns the argmin bias."""
    lo, hi = (-1.5, -0.05) if polarity == NEGATIVE else (0.05, 1.5)

    def noisy(vbs: np.ndarray) -> np.ndarray:
        x, y = r
        vd = float(phantom.dip_voltage(polarity, x, y))
        df = (phantom.background_slope * vbs ** 2
              - phantom.dip_depth * np.exp(-(vbs - vd) ** 2
                                           / (2.0 * phantom.dip_width ** 2)))
        if rng is not None and phantom.noise_std > 0.0:
            df = df + phantom.noise_std * rng.standard_normal(vbs.shape[0])
        return df

    coarse = np.arange(lo, hi + coarse_step, coarse_step)
    v0 = coarse[int(np.argmin(noisy(coarse)))]
    w = 2.0 * phantom.dip_width
    fine = np.arange(v0 - w, v0 + w + fine_step, fine_step)
    return float(fine[int(np.argmin(noisy(fine)))])


# ---------------------------------------------------------------------------
# Phantom file format: key = value header, then the two maps in the shared
# plain-text matrix format.
# ---------------------------------------------------------------------------

def phantom_to_text(phantom: Phantom) -> str:
    g = phantom.grid
    head = [
        "# sqdm phantom v1",
        f"nx = {g.nx}",
        f"ny = {g.ny}",
        f"pitch_x = {g.pitch_x!r}",
        f"pitch_y = {g.pitch_y!r}",
        f"dip_depth = {phantom.dip_depth!r}",
        f"dip_width = {phantom.dip_width!r}",
        f"background_slope = {phantom.background_slope!r}",
        f"noise_std = {phantom.noise_std!r}",
        "[v_minus]",
    ]
    return ("\n".join(head) + "\n" + format_matrix(phantom.v_minus)
            + "[v_plus]\n" + format_matrix(phantom.v_plus))


def phantom_from_text(text: str) -> Phantom:
    head, _, rest = text.partition("[v_minus]")
    vm_text, _, vp_text = rest.partition("[v_plus]")
    kv = {}
    for line in head.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        kv[key.strip()] = val.strip()
    grid = GridSpec(int(kv["nx"]), int(kv["ny"]),
                    float(kv["pitch_x"]), float(kv["pitch_y"]))
    return Phantom(grid, parse_matrix(vm_text), parse_matrix(vp_text),
                   dip_depth=float(kv["dip_depth"]),
                   dip_width=float(kv["dip_width"]),
                   background_slope=float(kv["background_slope"]),
                   noise_std=float(kv["noise_std"]))


def save_phantom(path, phantom: Phantom) -> None:
    with open(path, "w") as fh:
        fh.write(phantom_to_text(phantom))


def load_phantom(path) -> Phantom:
    with open(path) as fh:
        return phantom_from_text(fh.read())
