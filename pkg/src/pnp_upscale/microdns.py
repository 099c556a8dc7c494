"""Direct numerical simulation of the oscillating-coefficient PNP system.

The microscopic domain tiles the reference cell s^-1 times per axis, so the
fine voxel grid lines up exactly with the cell voxel grid and the composite
mask equals the periodic tiling bit for bit.  The potential is solved on the
whole box with the high-contrast coefficient (interface continuity holds
weakly through the conservative discretization); the densities live on the
fluid voxels with no-flux on the solid interface.

Also here: two-scale reconstruction of fine fields from a macroscopic state
plus the cell correctors, and the field comparison report used by the
validation sweep.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.ndimage import map_coordinates

from ._fv import (
    FactorizedSolver,
    PinnedNeumannSolver,
    assemble_diffusion_matrix,
    assemble_neumann_operator,
)
from .cellcorrect import CorrectorSet, SolverError
from .macropnp import NEGATIVE_DENSITY_TOL, MacroState, Z_CHARGES
from .unitcell import PermittivityParams, UnitCell
from .upscale import EffectiveTensors

logger = logging.getLogger(__name__)

DEFAULT_CELL_BUDGET = 1 << 20  # 1024**2 fine voxels


@dataclass(eq=False)
class MicroDomain:
    """Perforated fine grid at scale ratio s (s^-1 an integer)."""

    s: float
    tiles: int
    cell: UnitCell
    mask: np.ndarray
    eps: np.ndarray
    _poisson: PinnedNeumannSolver | None = field(default=None, repr=False)
    _diffusion: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.cell.dim

    @property
    def resolution(self) -> int:
        return self.mask.shape[0]

    @property
    def h(self) -> float:
        return 1.0 / self.resolution

    def poisson_solver(self) -> PinnedNeumannSolver:
        if self._poisson is None:
            A = assemble_neumann_operator(self.mask.shape, self.h, coef=self.eps)
            self._poisson = PinnedNeumannSolver(A)
        return self._poisson

    def diffusion_solver(self, dt: float, bc: str) -> FactorizedSolver:
        key = (float(dt), bc)
        solver = self._diffusion.get(key)
        if solver is None:
            A = assemble_diffusion_matrix(
                self.mask.shape, self.h, dt, 1.0, bc, mask=self.mask
            )
            solver = FactorizedSolver(A)
            self._diffusion[key] = solver
        return solver


@dataclass(eq=False)
class MicroState:
    """Fine-grid fields: densities on fluid voxels (zero on solid), mean-zero potential."""

    nplus: np.ndarray
    nminus: np.ndarray
    phi: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.nplus = np.asarray(self.nplus, dtype=float)
        self.nminus = np.asarray(self.nminus, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if not (self.nplus.shape == self.nminus.shape == self.phi.shape):
            raise ValueError("micro fields must share one grid")


@dataclass
class MicroConfig:
    picard_tol: float = 1e-9
    picard_cap: int = 50
    drift: str = "upwind"
    bc: str = "dirichlet"
    lin_tol: float = 1e-10

    def __post_init__(self):
        if self.drift not in ("upwind", "central"):
            raise ValueError(f"unknown drift scheme {self.drift!r}")
        if self.bc not in ("dirichlet", "noflux"):
            raise ValueError(f"unknown bc {self.bc!r}")


class BudgetError(MemoryError):
    """Requested fine grid exceeds the configured budget."""


def assemble_micro_domain(cell: UnitCell, params: PermittivityParams, s,
                          max_cells: int = DEFAULT_CELL_BUDGET) -> MicroDomain:
    """Tile the cell mask s^-1 times per axis and build the fine coefficient."""
    frac = Fraction(s).limit_denominator(10**9)
    if frac.numerator != 1 or frac.denominator < 1:
        raise ValueError(f"scale ratio must be 1/integer, got {s}")
    tiles = frac.denominator
    fine_res = tiles * cell.resolution
    n = fine_res**cell.dim
    if n > max_cells:
        raise BudgetError(
            f"fine grid needs {n} voxels ({fine_res} per axis), budget is {max_cells}"
        )
    mask = np.tile(cell.fluid_mask, (tiles,) * cell.dim)
    eps = np.where(mask, params.fluid_value, params.alpha).astype(float)
    return MicroDomain(s=float(frac), tiles=tiles, cell=cell, mask=mask, eps=eps)


def solve_micro_poisson(dom: MicroDomain, nplus: np.ndarray, nminus: np.ndarray,
                        tol: float = 1e-10) -> np.ndarray:
    """-div(eps(x/s) grad phi) = nplus - nminus, homogeneous Neumann, mean zero."""
    q = np.asarray(nplus, dtype=float) - np.asarray(nminus, dtype=float)
    if q.shape != dom.mask.shape:
        raise ValueError("charge grid does not match the micro domain")
    x, imbalance = dom.poisson_solver().solve(q.ravel(), tol)
    if imbalance != 0.0:
        logger.debug("micro Poisson: removed mean charge %.3e", imbalance)
    return x.reshape(dom.mask.shape)


def _micro_drift_divergence(v: np.ndarray, phi: np.ndarray, mask: np.ndarray,
                            h: float, z: float, scheme: str) -> np.ndarray:
    """div of the physical advective flux (velocity -z grad phi) on fluid faces.

    Boundary faces carry no advective flux: the potential is Neumann there,
    so the normal velocity vanishes.
    """
    div = np.zeros_like(v)
    N = v.ndim
    for d in range(N):
        lo = [slice(None)] * N
        hi = [slice(None)] * N
        lo[d] = slice(0, -1)
        hi[d] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        open_face = mask[lo] & mask[hi]
        vel = -z * (phi[hi] - phi[lo]) / h
        if scheme == "upwind":
            vup = np.where(vel > 0.0, v[lo], v[hi])
        else:
            vup = 0.5 * (v[lo] + v[hi])
        F = np.where(open_face, vel * vup, 0.0)
        div[lo] += F / h
        div[hi] -= F / h
    return div


def step_micro_pnp(state: MicroState, dom: MicroDomain, dt: float,
                   cfg: MicroConfig):
    """One IMEX step of the microscopic system; returns (state, StepInfo-like dict).

    Identical fixed-point structure to the macroscopic stepper: solve the
    potential from the lagged densities, then implicit diffusion with the
    lagged upwinded drift, iterate to the fixed point.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    mask = dom.mask
    solid = ~mask
    h = dom.h
    dsolve = dom.diffusion_solver(dt, cfg.bc)
    base = [state.nplus / dt, state.nminus / dt]
    for b in base:
        b[solid] = 0.0
    v = [state.nplus, state.nminus]
    increments: list[float] = []
    iters = 0
    for iters in range(1, cfg.picard_cap + 1):
        phi = solve_micro_poisson(dom, v[0], v[1], tol=cfg.lin_tol)
        new = []
        for r, z in enumerate(Z_CHARGES):
            rhs = base[r] - _micro_drift_divergence(v[r], phi, mask, h, z, cfg.drift)
            rhs[solid] = 0.0
            u = dsolve.solve(rhs.ravel()).reshape(mask.shape)
            new.append(u)
        inc = max(
            float(np.sqrt(np.mean((new[r] - v[r]) ** 2))) for r in range(2)
        )
        increments.append(inc)
        v = new
        if inc <= cfg.picard_tol:
            break
    else:
        raise SolverError(
            f"micro Picard loop did not contract within {cfg.picard_cap} "
            f"iterations (last increment {increments[-1]:.3e}); reduce dt"
        )
    phi = solve_micro_poisson(dom, v[0], v[1], tol=cfg.lin_tol)
    min_density = float(min(v[0].min(), v[1].min()))
    if cfg.drift == "upwind" and min_density < NEGATIVE_DENSITY_TOL:
        raise SolverError(
            f"negative density {min_density:.3e} under the upwind scheme"
        )
    new_state = MicroState(nplus=v[0], nminus=v[1], phi=phi, t=state.t + dt)
    info = {"picard_iters": iters, "increments": increments, "min_density": min_density}
    return new_state, info


def run_micro(dom: MicroDomain, init: MicroState, dt: float, n_steps: int,
              cfg: MicroConfig):
    """March the DNS n_steps; returns (final state, diagnostics rows)."""
    vol = 1.0 / dom.mask.size
    state = init
    rows = []
    for _ in range(n_steps):
        state, info = step_micro_pnp(state, dom, dt, cfg)
        rows.append(
            {
                "t": state.t,
                "mass1": float(state.nplus.sum()) * vol,
                "mass2": float(state.nminus.sum()) * vol,
                "charge": float((state.nplus - state.nminus).sum()) * vol,
                "picard_iters": info["picard_iters"],
            }
        )
    return state, rows


# ---------------------------------------------------------------------------
# two-scale reconstruction and comparison


def interpolate_to_fine(field_c: np.ndarray, fine_shape) -> np.ndarray:
    """Bilinear/trilinear interpolation from macro cell centers to fine centers."""
    coarse_shape = field_c.shape
    axes = []
    for M, Mf in zip(coarse_shape, fine_shape):
        hf = 1.0 / Mf
        hc = 1.0 / M
        x = (np.arange(Mf) + 0.5) * hf
        axes.append(x / hc - 0.5)
    coords = np.meshgrid(*axes, indexing="ij")
    return map_coordinates(field_c, np.stack(coords), order=1, mode="nearest")


def reconstruct_two_scale(macro: MacroState, correctors: CorrectorSet,
                          tensors: EffectiveTensors, dom: MicroDomain) -> MicroState:
    """Fine-grid fields from the macro solution and the cell correctors.

    phi  = u3 - s sum_k xi_k(x/s) d_k u3 + s^2 sum_kl zeta_kl(x/s) d^2_kl u3
    n_r  = u_r - s z_r u_r sum_k eta_k(x/s) d_k u3        (zero on solid)

    Correctors are sampled at the wrapped fine coordinate, which is an exact
    index map because the fine grid tiles the cell grid; macro derivatives
    are central differences interpolated to the fine centers.
    """
    fine_shape = dom.mask.shape
    s = dom.s
    tiles = (dom.tiles,) * dom.dim
    hc = 1.0 / macro.u3.shape[0]

    if macro.u3.shape[0] < 2:
        raise ValueError("macro grid too coarse to differentiate")
    grads = [np.gradient(macro.u3, hc, axis=k, edge_order=1) for k in range(dom.dim)]
    gfine = [interpolate_to_fine(g, fine_shape) for g in grads]

    phi = interpolate_to_fine(macro.u3, fine_shape)
    for k in range(dom.dim):
        phi = phi - s * np.tile(correctors.xi3[k], tiles) * gfine[k]
    if correctors.zeta3 is not None:
        for k in range(dom.dim):
            for l in range(dom.dim):
                hess = np.gradient(grads[k], hc, axis=l, edge_order=1)
                phi = phi + s * s * np.tile(correctors.zeta3[k, l], tiles) * interpolate_to_fine(
                    hess, fine_shape
                )
    else:
        logger.warning("second-order corrector missing: s^2 term skipped")
    phi = phi - phi.mean()

    densities = []
    for z, u in zip(Z_CHARGES, (macro.u1, macro.u2)):
        uf = interpolate_to_fine(u, fine_shape)
        corr = np.zeros_like(uf)
        if correctors.eta is None:
            raise ValueError("density reconstruction needs the eta correctors")
        for k in range(dom.dim):
            corr += np.tile(correctors.eta[k], tiles) * gfine[k]
        nf = (uf - s * z * uf * corr) * dom.mask
        densities.append(nf)

    return MicroState(nplus=densities[0], nminus=densities[1], phi=phi, t=macro.t)


@dataclass
class FieldErrors:
    l2_abs: float
    l2_rel: float
    linf_abs: float
    linf_rel: float


def compare_fields(a: np.ndarray, b: np.ndarray,
                   mask: np.ndarray | None = None) -> FieldErrors:
    """L2 and Linf errors of a against the reference b over the masked region.

    The L2 norm carries the voxel volume weight, so a constant offset c on
    the unit domain reports an absolute L2 error of exactly |c|.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")
    if mask is not None:
        if mask.shape != a.shape:
            raise ValueError("mask grid mismatch")
        sel = np.asarray(mask, dtype=bool)
    else:
        sel = np.ones(a.shape, dtype=bool)
    vol = 1.0 / a.size
    diff = a[sel] - b[sel]
    ref = b[sel]
    l2_abs = float(np.sqrt((diff**2).sum() * vol))
    l2_ref = float(np.sqrt((ref**2).sum() * vol))
    linf_abs = float(np.abs(diff).max()) if diff.size else 0.0
    linf_ref = float(np.abs(ref).max()) if ref.size else 0.0
    return FieldErrors(
        l2_abs=l2_abs,
        l2_rel=l2_abs / l2_ref if l2_ref > 0 else (0.0 if l2_abs == 0.0 else np.inf),
        linf_abs=linf_abs,
        linf_rel=linf_abs / linf_ref if linf_ref > 0 else (0.0 if linf_abs == 0.0 else np.inf),
    )
