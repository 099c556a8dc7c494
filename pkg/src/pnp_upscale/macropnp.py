"""Time stepper for the upscaled porous-medium PNP system.

Per time step the nonlinear coupling is resolved by a fixed-point (Picard)
loop: given the current density iterates, solve the homogenized Poisson
equation for the potential, then advance each species with an implicit
diffusion solve whose drift flux is evaluated at the lagged iterate,

    p (u_r - u_r_old)/dt - p Lap u_r = -div( z_r v_r (Hhat - M) grad v3 ).

The loop contracts for small enough dt; hitting the iteration cap is
reported as advice to reduce the step.  Boundary conditions follow the
academic set (homogeneous Dirichlet densities, homogeneous Neumann
potential) with an all-no-flux variant for conservation studies.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from ._fv import (
    FactorizedSolver,
    PinnedNeumannSolver,
    assemble_diffusion_matrix,
    assemble_neumann_operator,
    cell_gradients,
)
from .cellcorrect import SolverError
from .upscale import EffectiveTensors

logger = logging.getLogger(__name__)

Z_CHARGES = (1.0, -1.0)

NEGATIVE_DENSITY_TOL = -1e-12


@dataclass(eq=False)
class MacroState:
    """Macroscopic fields on the homogenized domain at time t."""

    u1: np.ndarray
    u2: np.ndarray
    u3: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.u1 = np.asarray(self.u1, dtype=float)
        self.u2 = np.asarray(self.u2, dtype=float)
        self.u3 = np.asarray(self.u3, dtype=float)
        if not (self.u1.shape == self.u2.shape == self.u3.shape):
            raise ValueError("u1, u2, u3 must share one grid")
        for f in (self.u1, self.u2, self.u3):
            if not np.isfinite(f).all():
                raise ValueError("macro state contains non-finite values")

    @classmethod
    def zero(cls, shape) -> "MacroState":
        z = np.zeros(shape)
        return cls(u1=z.copy(), u2=z.copy(), u3=z.copy(), t=0.0)


@dataclass
class MacroConfig:
    resolution: int
    dt: float
    t_end: float
    picard_tol: float = 1e-9
    picard_cap: int = 50
    drift: str = "upwind"  # or "central"
    bc: str = "dirichlet"  # academic set; "noflux" conserves mass
    lin_tol: float = 1e-10
    lam2: float = 1.0  # scalar coefficient in the free-energy diagnostic
    loceq_window: int = 4

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.t_end < self.dt:
            raise ValueError("t_end must be at least one step")
        if self.drift not in ("upwind", "central"):
            raise ValueError(f"unknown drift scheme {self.drift!r}")
        if self.bc not in ("dirichlet", "noflux"):
            raise ValueError(f"unknown bc {self.bc!r}")


@dataclass
class DiagnosticsRow:
    t: float
    mass1: float
    mass2: float
    charge: float
    free_energy: float
    picard_iters: int
    loceq_dev: float


@dataclass
class StepInfo:
    picard_iters: int
    increments: list = field(default_factory=list)
    min_density: float = 0.0


# ---------------------------------------------------------------------------
# cached operators


_POISSON_CACHE: dict = {}
_DIFFUSION_CACHE: dict = {}


def _poisson_solver(shape, eps0) -> PinnedNeumannSolver:
    key = (shape, eps0.tobytes())
    solver = _POISSON_CACHE.get(key)
    if solver is None:
        h = 1.0 / shape[0]
        A = assemble_neumann_operator(shape, h, tensor=eps0)
        solver = PinnedNeumannSolver(A)
        if len(_POISSON_CACHE) > 16:
            _POISSON_CACHE.clear()
        _POISSON_CACHE[key] = solver
    return solver


def _diffusion_solver(shape, dt, p, bc) -> FactorizedSolver:
    key = (shape, float(dt), float(p), bc)
    solver = _DIFFUSION_CACHE.get(key)
    if solver is None:
        h = 1.0 / shape[0]
        A = assemble_diffusion_matrix(shape, h, dt, p, bc)
        solver = FactorizedSolver(A)
        if len(_DIFFUSION_CACHE) > 16:
            _DIFFUSION_CACHE.clear()
        _DIFFUSION_CACHE[key] = solver
    return solver


def _check_square(shape):
    if len(set(shape)) != 1:
        raise ValueError(f"macro grids must be square, got shape {shape}")


# ---------------------------------------------------------------------------
# operations


def solve_macro_poisson(u1: np.ndarray, u2: np.ndarray, eps0: np.ndarray,
                        p: float, tol: float = 1e-10) -> np.ndarray:
    """Homogenized Poisson solve: -div(eps0 grad u3) = p (u1 - u2).

    Homogeneous Neumann potential; the source is projected to mean zero for
    compatibility (the removed mean charge is logged) and the solution is the
    mean-zero representative.
    """
    eps0 = np.asarray(eps0, dtype=float)
    u1 = np.asarray(u1, dtype=float)
    N = u1.ndim
    _check_square(u1.shape)
    if eps0.shape != (N, N):
        raise ValueError(f"eps0 must be {N}x{N} for a {N}D grid")
    asym = np.abs(eps0 - eps0.T).max()
    if asym > 1e-8 * max(np.abs(eps0).max(), 1e-300):
        raise ValueError("eps0 is not symmetric")
    eigs = np.linalg.eigvalsh(0.5 * (eps0 + eps0.T))
    if eigs.min() <= 0.0:
        raise ValueError(f"eps0 is not positive definite (eigenvalues {eigs})")
    solver = _poisson_solver(u1.shape, eps0)
    q = p * (u1 - np.asarray(u2, dtype=float))
    x, imbalance = solver.solve(q.ravel(), tol)
    if imbalance != 0.0:
        logger.debug("macro Poisson: removed mean charge %.3e", imbalance)
    return x.reshape(u1.shape)


def _drift_divergence(v: np.ndarray, u3: np.ndarray, A: np.ndarray, h: float,
                      z: float, bc: str, scheme: str) -> np.ndarray:
    """div of the advective flux z * v * (A grad u3), face-based.

    Upwinding follows the sign of the face velocity z * (A grad u3).n; the
    central option averages the two cell densities.  Dirichlet boundaries see
    exterior density zero, the no-flux variant zeroes all boundary fluxes.
    """
    N = v.ndim
    div = np.zeros_like(v)
    offdiag = any(
        A[d, d2] != 0.0 for d in range(N) for d2 in range(N) if d2 != d
    )
    grads = cell_gradients(u3, h) if offdiag else None
    for d in range(N):
        lo = [slice(None)] * N
        hi = [slice(None)] * N
        lo[d] = slice(0, -1)
        hi[d] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        vel = z * A[d, d] * (u3[hi] - u3[lo]) / h
        if offdiag:
            for d2 in range(N):
                if d2 == d or A[d, d2] == 0.0:
                    continue
                vel = vel + z * A[d, d2] * 0.5 * (grads[d2][lo] + grads[d2][hi])
        if scheme == "upwind":
            vup = np.where(vel > 0.0, v[lo], v[hi])
        else:
            vup = 0.5 * (v[lo] + v[hi])
        F = vel * vup
        div[lo] += F / h
        div[hi] -= F / h
        if bc == "dirichlet" and offdiag:
            # normal potential gradient vanishes (Neumann), so only the
            # tangential cross-terms drive flux through the domain boundary
            for side, sign in ((0, -1.0), (v.shape[d] - 1, +1.0)):
                face = [slice(None)] * N
                face[d] = side
                face = tuple(face)
                velb = np.zeros_like(v[face], dtype=float)
                for d2 in range(N):
                    if d2 == d or A[d, d2] == 0.0:
                        continue
                    velb = velb + z * A[d, d2] * grads[d2][face]
                outflow = velb * sign > 0.0  # leaving the domain
                if scheme == "upwind":
                    F_b = np.where(outflow, velb * v[face], 0.0)
                else:
                    F_b = velb * 0.5 * v[face]
                div[face] += sign * F_b / h
    return div


def step_macro_pnp(state: MacroState, tensors: EffectiveTensors,
                   cfg: MacroConfig):
    """One accepted time step; returns (new_state, StepInfo).

    The Picard loop alternates the Poisson solve with the two linear
    parabolic species solves until the max L2 increment drops below
    cfg.picard_tol.  Reaching the cap raises with advice to reduce dt.
    """
    shape = state.u1.shape
    _check_square(shape)
    h = 1.0 / shape[0]
    p = tensors.p
    A_drift = np.asarray(tensors.Hhat, dtype=float) - np.asarray(tensors.M, dtype=float)
    dsolve = _diffusion_solver(shape, cfg.dt, p, cfg.bc)
    base = [p / cfg.dt * state.u1, p / cfg.dt * state.u2]
    v = [state.u1, state.u2]
    increments: list[float] = []
    u3 = state.u3
    iters = 0
    for iters in range(1, cfg.picard_cap + 1):
        u3 = solve_macro_poisson(v[0], v[1], tensors.eps0, p, tol=cfg.lin_tol)
        new = []
        for r, z in enumerate(Z_CHARGES):
            rhs = base[r] - _drift_divergence(v[r], u3, A_drift, h, z, cfg.bc, cfg.drift)
            new.append(dsolve.solve(rhs.ravel()).reshape(shape))
        inc = max(
            float(np.sqrt(np.mean((new[r] - v[r]) ** 2))) for r in range(2)
        )
        increments.append(inc)
        v = new
        if inc <= cfg.picard_tol:
            break
    else:
        raise SolverError(
            f"Picard loop did not contract within {cfg.picard_cap} iterations "
            f"(last increment {increments[-1]:.3e}); reduce dt"
        )
    u3 = solve_macro_poisson(v[0], v[1], tensors.eps0, p, tol=cfg.lin_tol)
    min_density = float(min(v[0].min(), v[1].min()))
    if cfg.drift == "upwind" and min_density < NEGATIVE_DENSITY_TOL:
        raise SolverError(
            f"negative density {min_density:.3e} under the upwind scheme"
        )
    new_state = MacroState(u1=v[0], u2=v[1], u3=u3, t=state.t + cfg.dt)
    return new_state, StepInfo(picard_iters=iters, increments=increments,
                               min_density=min_density)


def free_energy(state: MacroState, lam2: float) -> float:
    """Classical free-energy diagnostic by voxel quadrature.

    F = int( sum_r u_r (log u_r - 1) + (u1 - u2) u3 - lam2 |grad u3|^2 ),
    with the 0 log 0 = 0 convention.  The gradient term uses face
    differences over interior faces.
    """
    if (state.u1 < 0).any() or (state.u2 < 0).any():
        raise ValueError("free energy needs nonnegative densities")
    vol = 1.0 / state.u1.size
    ent = xlogy(state.u1, state.u1) - state.u1 + xlogy(state.u2, state.u2) - state.u2
    inter = (state.u1 - state.u2) * state.u3
    total = float((ent + inter).sum()) * vol
    total -= lam2 * _gradient_quadrature(state.u3)
    return total


def free_energy_effective(state: MacroState, eps0: np.ndarray) -> float:
    """Variant with the anisotropic field energy (grad u3).eps0 (grad u3)."""
    if (state.u1 < 0).any() or (state.u2 < 0).any():
        raise ValueError("free energy needs nonnegative densities")
    vol = 1.0 / state.u1.size
    h = 1.0 / state.u1.shape[0]
    ent = xlogy(state.u1, state.u1) - state.u1 + xlogy(state.u2, state.u2) - state.u2
    inter = (state.u1 - state.u2) * state.u3
    total = float((ent + inter).sum()) * vol
    grads = cell_gradients(state.u3, h)
    eps0 = np.asarray(eps0, dtype=float)
    quad = sum(
        float((grads[i] * eps0[i, k] * grads[k]).sum()) * vol
        for i in range(state.u3.ndim)
        for k in range(state.u3.ndim)
    )
    return total - quad


def _gradient_quadrature(u3: np.ndarray) -> float:
    h = 1.0 / u3.shape[0]
    vol = 1.0 / u3.size
    total = 0.0
    for d in range(u3.ndim):
        lo = [slice(None)] * u3.ndim
        hi = [slice(None)] * u3.ndim
        lo[d] = slice(0, -1)
        hi[d] = slice(1, None)
        g = (u3[tuple(hi)] - u3[tuple(lo)]) / h
        total += float((g * g).sum()) * vol
    return total


def check_local_equilibrium(state: MacroState, window: int) -> float:
    """Max spread of the chemical potential log u_r + z_r u3 over voxel blocks.

    Quantifies how badly the per-cell equilibrium assumption behind the
    upscaled model is violated.  Blocks containing nonpositive density are
    skipped; the skipped count is reported through the module logger.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    dev = 0.0
    skipped = 0
    shape = state.u1.shape
    ranges = [range(0, s, window) for s in shape]
    for r, (z, u) in enumerate(zip(Z_CHARGES, (state.u1, state.u2))):
        for corner in itertools.product(*ranges):
            blk = tuple(slice(c, min(c + window, s)) for c, s in zip(corner, shape))
            ub = u[blk]
            if (ub <= 0.0).any():
                skipped += 1
                continue
            mu = np.log(ub) + z * state.u3[blk]
            dev = max(dev, float(mu.max() - mu.min()))
    if skipped:
        logger.warning(
            "local-equilibrium check skipped %d blocks with nonpositive density",
            skipped,
        )
    return dev


def run_macro(cfg: MacroConfig, tensors: EffectiveTensors, init: MacroState,
              snapshot_times=()):
    """March from t=0 to t_end, one diagnostics row per accepted step.

    Returns (snapshots, rows) where snapshots is a list of (t, MacroState)
    at the configured times plus the final state.
    """
    n_steps = int(round(cfg.t_end / cfg.dt))
    if n_steps < 1:
        raise ValueError("t_end shorter than one step")
    vol = 1.0 / init.u1.size
    state = init
    rows: list[DiagnosticsRow] = []
    snapshots: list[tuple[float, MacroState]] = []
    pending = sorted(snapshot_times)
    for _ in range(n_steps):
        state, info = step_macro_pnp(state, tensors, cfg)
        rows.append(
            DiagnosticsRow(
                t=state.t,
                mass1=float(state.u1.sum()) * vol,
                mass2=float(state.u2.sum()) * vol,
                charge=float((state.u1 - state.u2).sum()) * vol,
                free_energy=free_energy(state, cfg.lam2),
                picard_iters=info.picard_iters,
                loceq_dev=check_local_equilibrium(state, cfg.loceq_window),
            )
        )
        while pending and state.t >= pending[0] - 0.5 * cfg.dt:
            snapshots.append((state.t, state))
            pending.pop(0)
    snapshots.append((state.t, state))
    return snapshots, rows
