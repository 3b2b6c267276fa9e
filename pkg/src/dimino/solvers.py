"""Reference pseudo-spectral solvers and dataset generation.

All solvers run in double precision on periodic grids.  Nonlinear products
are 2/3-rule dealiased; advection-dominated systems use an integrating-factor
RK4 (diffusion exact in spectral space), the stiff diffusion-reaction system
uses Strang splitting with an RK4 reaction step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .data import Dataset, Grid, Sample
from .dims import Quantity, SCALE_DIMS


class StepUnstable(Exception):
    def __init__(self, step: int):
        super().__init__(f"solution became non-finite at step {step}")
        self.step = step


class NonZeroMeanInput(Exception):
    pass


@dataclass
class SolverConfig:
    stepper: str = "rk4"
    steps: Optional[int] = None
    cfl: float = 0.25
    dealias_frac: float = 2.0 / 3.0

    def __post_init__(self):
        if not 0 < self.dealias_frac <= 1:
            raise ValueError("dealias_frac must be in (0, 1]")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")


def _val(q) -> float:
    return q.value if isinstance(q, Quantity) else float(q)


def _wavenumbers_1d(n: int, extent: float) -> np.ndarray:
    return 2 * np.pi * np.fft.rfftfreq(n, d=extent / n)


def _wavenumbers_2d(grid_shape, extent):
    nx, ny = grid_shape
    kx = 2 * np.pi * np.fft.fftfreq(nx, d=extent[0] / nx)
    ky = 2 * np.pi * np.fft.rfftfreq(ny, d=extent[1] / ny)
    return kx[:, None], ky[None, :]


def _dealias_mask_1d(n: int, frac: float) -> np.ndarray:
    m = np.arange(n // 2 + 1)
    return m <= frac * (n // 2)


def _dealias_mask_2d(shape, frac):
    nx, ny = shape
    mx = np.abs(np.fft.fftfreq(nx) * nx) <= frac * (nx // 2)
    my = np.arange(ny // 2 + 1) <= frac * (ny // 2)
    return mx[:, None] & my[None, :]


def _check_finite(arr, step):
    if not np.all(np.isfinite(arr)):
        raise StepUnstable(step)


def solve_advection_analytic(u0: np.ndarray, beta, t, extent: float = 1.0) -> np.ndarray:
    """Shift u0 by beta*t with spectral interpolation (exact if band-limited)."""
    k = _wavenumbers_1d(u0.shape[0], extent)
    shift = np.exp(-1j * k * _val(beta) * _val(t))
    return np.fft.irfft(np.fft.rfft(u0) * shift, n=u0.shape[0])


def _ifrk4(v, n_steps, dt, lin, nonlin):
    """Integrating-factor RK4: exact linear part, RK4 on the nonlinearity."""
    e_full = np.exp(lin * dt)
    e_half = np.exp(lin * dt / 2)
    for step in range(n_steps):
        k1 = nonlin(v)
        k2 = nonlin(e_half * (v + dt / 2 * k1))
        k3 = nonlin(e_half * v + dt / 2 * k2)
        k4 = nonlin(e_full * v + dt * e_half * k3)
        v = e_full * v + dt / 6 * (e_full * k1 + 2 * e_half * (k2 + k3) + k4)
        if step % 16 == 15:
            _check_finite(v, step)
    _check_finite(v, n_steps - 1)
    return v


def solve_burgers_1d(u0: np.ndarray, nu, t, cfg: SolverConfig = None,
                     extent: float = 1.0) -> np.ndarray:
    """Viscous Burgers on a periodic interval, conservative form."""
    cfg = cfg or SolverConfig()
    nu, t = _val(nu), _val(t)
    n = u0.shape[0]
    k = _wavenumbers_1d(n, extent)
    mask = _dealias_mask_1d(n, cfg.dealias_frac)
    if cfg.steps is not None:
        n_steps = cfg.steps
    else:
        umax = max(float(np.max(np.abs(u0))), 1e-6)
        dt_cfl = cfg.cfl * (extent / n) / umax
        n_steps = max(int(math.ceil(t / dt_cfl)), 16)
    dt = t / n_steps

    def nonlin(v):
        u = np.fft.irfft(v * mask, n=n)
        return -0.5j * k * (np.fft.rfft(u * u) * mask)

    v = _ifrk4(np.fft.rfft(u0), n_steps, dt, -nu * k**2, nonlin)
    return np.fft.irfft(v, n=n)


def solve_diffreact_2d(u0, v0, Du, Dv, k_const, t, cfg: SolverConfig = None,
                       extent=(1.0, 1.0), reaction: bool = True):
    """FitzHugh-Nagumo diffusion-reaction, Strang splitting.

    Diffusion is integrated exactly in spectral space; the pointwise reaction
    (Ru = u - u^3 - k - v, Rv = u - v) takes an RK4 step.  ``reaction=False``
    is a test hook for the pure-diffusion probe.
    """
    cfg = cfg or SolverConfig()
    Du, Dv, k_const, t = _val(Du), _val(Dv), _val(k_const), _val(t)
    kx, ky = _wavenumbers_2d(u0.shape, extent)
    k2 = kx**2 + ky**2
    n_steps = cfg.steps if cfg.steps is not None else max(int(math.ceil(t / 0.01)), 16)
    dt = t / n_steps
    eu = np.exp(-Du * k2 * dt / 2)
    ev = np.exp(-Dv * k2 * dt / 2)

    def react(state):
        u, v = state
        return u - u**3 - k_const - v, u - v

    u, v = u0.astype(np.float64), v0.astype(np.float64)
    for step in range(n_steps):
        u = np.fft.irfft2(np.fft.rfft2(u) * eu, s=u0.shape)
        v = np.fft.irfft2(np.fft.rfft2(v) * ev, s=u0.shape)
        if reaction:
            r1u, r1v = react((u, v))
            r2u, r2v = react((u + dt / 2 * r1u, v + dt / 2 * r1v))
            r3u, r3v = react((u + dt / 2 * r2u, v + dt / 2 * r2v))
            r4u, r4v = react((u + dt * r3u, v + dt * r3v))
            u = u + dt / 6 * (r1u + 2 * r2u + 2 * r3u + r4u)
            v = v + dt / 6 * (r1v + 2 * r2v + 2 * r3v + r4v)
        u = np.fft.irfft2(np.fft.rfft2(u) * eu, s=u0.shape)
        v = np.fft.irfft2(np.fft.rfft2(v) * ev, s=u0.shape)
        if step % 16 == 15:
            _check_finite(u, step)
    _check_finite(u, n_steps - 1)
    _check_finite(v, n_steps - 1)
    return u, v


def _ns_velocity(omega_hat, kx, ky, k2_inv, shape):
    psi_hat = omega_hat * k2_inv
    ux = np.fft.irfft2(1j * ky * psi_hat, s=shape)
    uy = np.fft.irfft2(-1j * kx * psi_hat, s=shape)
    return ux, uy


def solve_ns_vorticity_2d(omega0, nu, f, t, cfg: SolverConfig = None,
                          extent=(1.0, 1.0), subtract_mean: bool = True):
    """2D incompressible Navier-Stokes in vorticity form on the torus.

    Velocity is recovered through the spectral streamfunction; the viscous
    term is handled by the integrating factor, so nu=0 is a valid test mode.
    """
    cfg = cfg or SolverConfig()
    nu, t = _val(nu), _val(t)
    shape = omega0.shape
    kx, ky = _wavenumbers_2d(shape, extent)
    k2 = kx**2 + ky**2
    k2_inv = np.zeros_like(k2)
    k2_inv[k2 > 0] = 1.0 / k2[k2 > 0]
    mask = _dealias_mask_2d(shape, cfg.dealias_frac)

    scale = max(float(np.max(np.abs(omega0))), 1e-12)
    if abs(float(np.mean(omega0))) > 1e-10 * scale:
        if not subtract_mean:
            raise NonZeroMeanInput("omega0 must be mean-zero")
        omega0 = omega0 - np.mean(omega0)
    f = f - np.mean(f)

    w_hat = np.fft.rfft2(omega0)
    f_hat = np.fft.rfft2(f) * mask

    if cfg.steps is not None:
        n_steps = cfg.steps
    else:
        ux, uy = _ns_velocity(w_hat, kx, ky, k2_inv, shape)
        umax = max(float(np.max(np.hypot(ux, uy))), 1e-6)
        dt_cfl = cfg.cfl * (extent[0] / shape[0]) / umax
        n_steps = max(int(math.ceil(t / dt_cfl)), 32)
    dt = t / n_steps

    def nonlin(v):
        vm = v * mask
        ux, uy = _ns_velocity(vm, kx, ky, k2_inv, shape)
        wx = np.fft.irfft2(1j * kx * vm, s=shape)
        wy = np.fft.irfft2(1j * ky * vm, s=shape)
        adv = np.fft.rfft2(ux * wx + uy * wy) * mask
        return -adv + f_hat

    w_hat = _ifrk4(w_hat, n_steps, dt, -nu * k2, nonlin)
    return np.fft.irfft2(w_hat, s=shape)


def solve_sample(sample: Sample, cfg: SolverConfig = None, t: float = None
                 ) -> Dict[str, np.ndarray]:
    """Run the reference solver for a sample; returns target-field dict."""
    t = sample.t_final if t is None else t
    if sample.system == "advection1d":
        u = solve_advection_analytic(
            sample.fields["u"], sample.constants["beta"], t, sample.grid.extent[0]
        )
        return {"u": u}
    if sample.system == "burgers1d":
        u = solve_burgers_1d(
            sample.fields["u"], sample.constants["nu"], t, cfg, sample.grid.extent[0]
        )
        return {"u": u}
    if sample.system == "diffreact2d":
        u, v = solve_diffreact_2d(
            sample.fields["u"], sample.fields["v"], sample.constants["Du"],
            sample.constants["Dv"], sample.constants["k"], t, cfg,
            sample.grid.extent,
        )
        return {"u": u, "v": v}
    if sample.system == "ns-vorticity2d":
        w = solve_ns_vorticity_2d(
            sample.fields["omega"], sample.constants["nu"], sample.fields["f"],
            t, cfg, sample.grid.extent,
        )
        return {"omega": w}
    raise ValueError(f"unknown system {sample.system!r}")


def random_fourier_field(rng, grid: Grid, k_max: int = None, decay: float = 2.5,
                         amplitude: float = 1.0) -> np.ndarray:
    """Mean-zero random field with spectrum ~ |k|^-decay up to k_max."""
    if k_max is None:
        k_max = max(grid.points[0] // 8, 2)
    if grid.rank == 1:
        n = grid.points[0]
        coef = np.zeros(n // 2 + 1, dtype=np.complex128)
        m = np.arange(1, k_max + 1)
        coef[1:k_max + 1] = (
            rng.standard_normal(k_max) + 1j * rng.standard_normal(k_max)
        ) * m**-decay
        u = np.fft.irfft(coef, n=n) * n
    else:
        nx, ny = grid.points
        mx = np.fft.fftfreq(nx) * nx
        my = np.arange(ny // 2 + 1)
        kk = np.sqrt(mx[:, None] ** 2 + my[None, :] ** 2)
        keep = (kk > 0) & (kk <= k_max)
        coef = np.where(
            keep,
            (rng.standard_normal(kk.shape) + 1j * rng.standard_normal(kk.shape))
            * np.where(kk > 0, kk, 1.0) ** -decay,
            0.0,
        )
        u = np.fft.irfft2(coef, s=(nx, ny)) * nx * ny
    u -= u.mean()
    peak = max(float(np.max(np.abs(u))), 1e-12)
    return u * (amplitude / peak)


DEFAULT_PARAM_RANGES = {
    "advection1d": {"beta": (0.2, 2.0), "amp": (0.5, 2.0)},
    "burgers1d": {"nu": (1e-3, 1e-1), "amp": (0.5, 2.0)},
    "diffreact2d": {
        "Du": (1e-3, 1e-2),
        "Dv": (1e-3, 1e-2),
        "k": (1e-3, 1e-2),
        "amp": (0.1, 1.0),
    },
    "ns-vorticity2d": {"nu": (1e-3, 1e-2), "amp": (1.0, 4.0), "f_amp": (0.05, 0.5)},
}

DEFAULT_GRIDS = {
    "advection1d": Grid((256,), (1.0,)),
    "burgers1d": Grid((128,), (1.0,)),
    "diffreact2d": Grid((64, 64), (1.0, 1.0)),
    "ns-vorticity2d": Grid((64, 64), (1.0, 1.0)),
}


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def _make_sample(system, rng, grid, t_final, ranges, cfg, k_max=None,
                 decay=2.5) -> Sample:
    dims = SCALE_DIMS[system]
    amp = _log_uniform(rng, *ranges["amp"])

    def random_field(amplitude):
        return random_fourier_field(rng, grid, k_max=k_max, decay=decay,
                                    amplitude=amplitude)
    if system == "advection1d":
        fields = {"u": random_field(amp)}
        constants = {"beta": Quantity(_log_uniform(rng, *ranges["beta"]), dims["beta"])}
    elif system == "burgers1d":
        fields = {"u": random_field(amp)}
        constants = {"nu": Quantity(_log_uniform(rng, *ranges["nu"]), dims["nu"])}
    elif system == "diffreact2d":
        fields = {"u": random_field(amp), "v": random_field(amp)}
        constants = {
            name: Quantity(_log_uniform(rng, *ranges[name]), dims[name])
            for name in ("Du", "Dv", "k")
        }
    elif system == "ns-vorticity2d":
        f_amp = _log_uniform(rng, *ranges["f_amp"])
        fields = {"omega": random_field(amp), "f": random_field(f_amp)}
        constants = {"nu": Quantity(_log_uniform(rng, *ranges["nu"]), dims["nu"])}
    else:
        raise ValueError(f"unknown system {system!r}")
    sample = Sample(system, grid, fields, constants, t_final)
    sample.targets = solve_sample(sample, cfg)
    return sample


def generate_dataset(system: str, param_ranges: dict = None, n_samples: int = 64,
                     seed: int = 0, grid: Grid = None, t_final: float = 1.0,
                     cfg: SolverConfig = None, split: str = "train",
                     max_retries: int = 3, k_max: int = None,
                     decay: float = 2.5) -> Dataset:
    """Deterministic dataset generation; failed samples retry on a sub-seed."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    grid = grid or DEFAULT_GRIDS[system]
    ranges = dict(DEFAULT_PARAM_RANGES[system])
    if param_ranges:
        ranges.update(param_ranges)
    samples = []
    for i in range(n_samples):
        for attempt in range(max_retries + 1):
            rng = np.random.default_rng([seed, i, attempt])
            try:
                samples.append(_make_sample(system, rng, grid, t_final, ranges,
                                            cfg, k_max=k_max, decay=decay))
                break
            except StepUnstable:
                if attempt == max_retries:
                    raise
    meta = {
        "seed": seed,
        "t_final": t_final,
        "param_ranges": {k: list(v) for k, v in ranges.items()},
        "ic_spectrum": {
            "decay": decay,
            "k_max": k_max if k_max is not None else max(grid.points[0] // 8, 2),
        },
    }
    return Dataset(system, grid, {split: samples}, meta)
