"""Effective tensors assembled from the cell correctors.

Quadrature is face-based and matches the finite-volume operator exactly:
the i-th row of a tensor averages face fluxes over the faces normal to
direction i.  This preserves, at the discrete level, the identity between
the flux form and the energy form of the effective permittivity, and puts
its eigenvalues inside the harmonic/arithmetic (Reuss/Voigt) bounds.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .cellcorrect import (
    CorrectorSet,
    SolverError,
    face_gradient,
    harmonic_face_coefficients,
    solve_density_corrector_shape,
    solve_potential_corrector,
    solve_second_order_potential_corrector,
)
from .unitcell import PermittivityParams, UnitCell, permittivity_field, porosity

logger = logging.getLogger(__name__)

FLUX_ENERGY_RTOL = 1e-8
SYMMETRY_RTOL = 1e-8
BOUNDS_SLACK = 1e-6


@dataclass(eq=False)
class EffectiveTensors:
    """Upscaled material data for the macroscopic model.

    eps0 is the effective permittivity, M the electro-convection tensor and
    Hhat the diffusion shape so that the concentration-proportional transport
    tensor of species r is z_r * u_r(t,x) * Hhat.
    """

    dim: int
    p: float
    eps0: np.ndarray
    M: np.ndarray
    Hhat: np.ndarray
    provenance: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        prov = dict(self.provenance)
        prov.setdefault("dim", self.dim)
        return {
            "p": self.p,
            "eps0": np.asarray(self.eps0).tolist(),
            "M": np.asarray(self.M).tolist(),
            "Hhat": np.asarray(self.Hhat).tolist(),
            "provenance": prov,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json_dict(cls, data: dict) -> "EffectiveTensors":
        eps0 = np.asarray(data["eps0"], dtype=float)
        return cls(
            dim=eps0.shape[0],
            p=float(data["p"]),
            eps0=eps0,
            M=np.asarray(data["M"], dtype=float),
            Hhat=np.asarray(data["Hhat"], dtype=float),
            provenance=dict(data.get("provenance", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "EffectiveTensors":
        return cls.from_json_dict(json.loads(text))


def effective_permittivity(cell: UnitCell, kappa: np.ndarray, xi3: np.ndarray,
                           consistency_rtol: float = FLUX_ENERGY_RTOL) -> np.ndarray:
    """Effective permittivity from the potential correctors (flux form).

    eps0[i,k] averages kappa * (delta_ik - d_i xi_k) over the faces normal to
    i.  The energy form, averaging kappa (e_i - grad xi_i).(e_k - grad xi_k)
    over all faces, agrees with it up to the corrector solve residual; a
    larger disagreement signals an inconsistent discretization and raises.
    """
    N = cell.dim
    h = cell.h
    faces = harmonic_face_coefficients(np.asarray(kappa, dtype=float))
    grad = [[face_gradient(xi3[k], d, h) for k in range(N)] for d in range(N)]

    def corrected(d, k):
        g = grad[d][k]
        return (1.0 - g) if d == k else -g

    flux = np.empty((N, N))
    energy = np.empty((N, N))
    for i in range(N):
        for k in range(N):
            flux[i, k] = float(np.mean(faces[i] * corrected(i, k)))
            energy[i, k] = sum(
                float(np.mean(faces[d] * corrected(d, i) * corrected(d, k)))
                for d in range(N)
            )
    scale = max(float(np.abs(flux).max()), 1e-300)
    defect = float(np.abs(flux - energy).max()) / scale
    if defect > consistency_rtol:
        raise SolverError(
            f"flux-form vs energy-form disagreement {defect:.3e} exceeds "
            f"{consistency_rtol:.0e}: inconsistent discretization"
        )
    logger.debug("eps0 flux/energy agreement: %.3e", defect)
    return flux


def electro_convection_tensor(cell: UnitCell, xi3: np.ndarray) -> np.ndarray:
    """M[i,k] = (1/|Y|) int_{Y^s} (delta_ik - d_i xi_k); reduces to p*I when xi3 = 0."""
    N = cell.dim
    h = cell.h
    chi = cell.fluid_mask.astype(float)
    p = porosity(cell)
    M = np.zeros((N, N))
    for i in range(N):
        w = 0.5 * (chi + np.roll(chi, -1, axis=i))  # fluid volume carried by each face
        for k in range(N):
            g = face_gradient(xi3[k], i, h)
            M[i, k] = (p if i == k else 0.0) - float(np.mean(w * g))
    return M


def diffusion_shape_tensor(cell: UnitCell, eta: np.ndarray) -> np.ndarray:
    """Hhat[i,k] = (1/|Y|) int_{Y^s} d_i eta_k over fluid-fluid faces.

    The species transport tensor is recovered as z_r * u_r * Hhat; Hhat is
    reported unsymmetrized.
    """
    N = cell.dim
    h = cell.h
    mask = cell.fluid_mask
    H = np.zeros((N, N))
    for i in range(N):
        ff = (mask & np.roll(mask, -1, axis=i)).astype(float)
        for k in range(N):
            H[i, k] = float(np.mean(ff * face_gradient(eta[k], i, h)))
    return H


def permittivity_bounds(kappa: np.ndarray) -> tuple[float, float]:
    """(harmonic mean, arithmetic mean) of the coefficient over the cell."""
    kappa = np.asarray(kappa, dtype=float)
    return float(1.0 / np.mean(1.0 / kappa)), float(np.mean(kappa))


def check_spectral_bounds(eps0: np.ndarray, kappa: np.ndarray,
                          slack: float = BOUNDS_SLACK) -> tuple[float, float]:
    """Assert the eigenvalues of eps0 sit inside the Reuss/Voigt interval."""
    harm, arith = permittivity_bounds(kappa)
    sym = 0.5 * (eps0 + eps0.T)
    eigs = np.linalg.eigvalsh(sym)
    tol = slack * arith
    if eigs.min() < harm - tol or eigs.max() > arith + tol:
        raise SolverError(
            f"eps0 eigenvalues {eigs} violate the bounds [{harm:.6g}, {arith:.6g}]"
        )
    return float(eigs.min()), float(eigs.max())


def symmetry_defect(t: np.ndarray) -> float:
    scale = max(float(np.abs(t).max()), 1e-300)
    return float(np.abs(t - t.T).max()) / scale


def compute_effective_tensors(cell: UnitCell, params: PermittivityParams,
                              tol: float = 1e-10, second_order: bool = True,
                              threads: int = 1):
    """Full cell-problem pipeline: correctors, tensors and certificates.

    Returns (EffectiveTensors, CorrectorSet).  The second-order correctors
    need the assembled eps0, so the natural order is xi3 -> eps0 -> zeta3.
    """
    kappa = permittivity_field(cell, params)
    xi3, res_xi = solve_potential_corrector(cell, kappa, tol=tol, threads=threads)
    eps0 = effective_permittivity(cell, kappa, xi3)
    defect = symmetry_defect(eps0)
    if defect > SYMMETRY_RTOL:
        raise SolverError(f"eps0 symmetry defect {defect:.3e} exceeds {SYMMETRY_RTOL:.0e}")
    lo, hi = check_spectral_bounds(eps0, kappa)

    M = electro_convection_tensor(cell, xi3)
    eta, res_eta = solve_density_corrector_shape(cell, xi3, tol=tol, threads=threads)
    Hhat = diffusion_shape_tensor(cell, eta)

    residuals = {}
    for j in range(cell.dim):
        residuals[f"xi3_{j + 1}"] = res_xi[j]
        residuals[f"eta_{j + 1}"] = res_eta[j]

    zeta3 = None
    if second_order:
        zeta3, res_z = solve_second_order_potential_corrector(
            cell, kappa, xi3, eps0, tol=tol, threads=threads
        )
        for k in range(cell.dim):
            for l in range(cell.dim):
                residuals[f"zeta3_{k + 1}{l + 1}"] = res_z[k * cell.dim + l]

    correctors = CorrectorSet(xi3=xi3, eta=eta, zeta3=zeta3, residuals=residuals)
    provenance = {
        "cell_hash": cell.mask_hash,
        "geometry": cell.geometry_spec,
        "resolution": cell.resolution,
        "dim": cell.dim,
        "lambda": params.lam,
        "alpha": params.alpha,
        "solver_tol": tol,
        "max_residual": max(residuals.values()) if residuals else 0.0,
        "eps0_eig_range": [lo, hi],
    }
    tensors = EffectiveTensors(
        dim=cell.dim, p=porosity(cell), eps0=eps0, M=M, Hhat=Hhat,
        provenance=provenance,
    )
    return tensors, correctors


@dataclass(eq=False)
class MaterialTensorReport:
    """Block structure of the upscaled material tensor at a sampled state.

    The density rows carry p on the diagonal and the drift coupling blocks
    -D_r + z_r u_r M in the potential column, with D_r = z_r u_r Hhat; the
    potential row carries eps0.  Inputs are stored bit-exactly.
    """

    p: float
    u1: float
    u2: float
    eps0: np.ndarray
    M: np.ndarray
    Hhat: np.ndarray
    blocks: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)


def material_tensor_report(tensors: EffectiveTensors, u1: float, u2: float) -> MaterialTensorReport:
    N = tensors.dim
    eye = np.eye(N)
    M = np.asarray(tensors.M, dtype=float)
    Hhat = np.asarray(tensors.Hhat, dtype=float)
    eps0 = np.asarray(tensors.eps0, dtype=float)
    # z1 = +1, z2 = -1; D_r = z_r u_r Hhat
    drift1 = -u1 * Hhat + u1 * M
    drift2 = u2 * Hhat - u2 * M
    blocks = {
        "density_1": tensors.p * eye,
        "density_2": tensors.p * eye,
        "drift_1": drift1,
        "drift_2": drift2,
        "potential": eps0.copy(),
    }
    diagnostics = {
        "eps0_eigenvalues": np.linalg.eigvalsh(0.5 * (eps0 + eps0.T)).tolist(),
        "eps0_symmetry_defect": symmetry_defect(eps0),
        "hhat_asymmetry": float(np.abs(Hhat - Hhat.T).max()),
    }
    return MaterialTensorReport(
        p=tensors.p, u1=u1, u2=u2,
        eps0=eps0.copy(), M=M.copy(), Hhat=Hhat.copy(),
        blocks=blocks, diagnostics=diagnostics,
    )
