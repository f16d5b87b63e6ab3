"""Orthotropic plane-stress constitutive laws and angle-weighted interpolation.

Stiffness matrices are plain (3, 3) numpy arrays in Voigt order
(xx, yy, xy) with engineering shear strain.  Rotation helpers accept a
scalar angle or an array of angles and broadcast accordingly; angles are
radians everywhere inside the library, degrees only at I/O boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CandidateAngles",
    "constitutive_from_entries",
    "constitutive_from_engineering",
    "rotation_matrix",
    "rotation_matrix_derivative",
    "rotate_constitutive",
    "rotate_constitutive_derivative",
    "dmo_weights",
    "dmo_weight_gradient",
    "dmo_effective_constitutive",
]


def constitutive_from_entries(d11: float, d12: float, d22: float, d33: float) -> np.ndarray:
    """Assemble a plane-stress stiffness matrix from its four independent entries.

    The material axes are assumed aligned with the element axes, so the
    normal/shear coupling entries are zero.  Raises ``ValueError`` for a
    non-positive-definite matrix.
    """
    if min(d11, d22, d33) <= 0.0:
        raise ValueError(f"diagonal stiffness entries must be positive, got {(d11, d22, d33)}")
    if d11 * d22 - d12 * d12 <= 0.0:
        raise ValueError(f"stiffness not positive definite: D11*D22 - D12^2 = {d11 * d22 - d12 * d12:g} <= 0")
    return np.array([[d11, d12, 0.0], [d12, d22, 0.0], [0.0, 0.0, d33]])


def constitutive_from_engineering(ex: float, ey: float, gxy: float, nu_xy: float) -> np.ndarray:
    """Plane-stress stiffness from engineering constants of an orthotropic ply.

    Parameters
    ----------
    ex, ey:
        Young's moduli along the fibre (x) and transverse (y) directions.
    gxy:
        In-plane shear modulus.
    nu_xy:
        Major Poisson's ratio; the minor one follows from symmetry,
        ``nu_yx = nu_xy * ey / ex``.
    """
    if min(ex, ey, gxy) <= 0.0:
        raise ValueError(f"moduli must be positive, got Ex={ex}, Ey={ey}, Gxy={gxy}")
    nu_yx = nu_xy * ey / ex
    denom = 1.0 - nu_xy * nu_yx
    if denom <= 0.0:
        raise ValueError(f"non-physical Poisson coupling: 1 - nu_xy*nu_yx = {denom:g} <= 0")
    d11 = ex / denom
    d22 = ey / denom
    d12 = nu_xy * d22
    return constitutive_from_entries(d11, d12, d22, gxy)


def check_symmetric(matrix: np.ndarray, rel_tol: float = 1e-10) -> None:
    """Raise ``ValueError`` unless ``matrix`` is symmetric to ``rel_tol`` (relative)."""
    matrix = np.asarray(matrix, dtype=float)
    scale = max(1.0, float(np.abs(matrix).max()))
    skew = float(np.abs(matrix - matrix.T).max())
    if skew > rel_tol * scale:
        raise ValueError(f"matrix is not symmetric: max |D - D^T| = {skew:g} (scale {scale:g})")


def rotation_matrix(theta):
    """Stiffness rotation transform for a fibre angle ``theta`` (radians).

    Returns a (3, 3) array for scalar input, or a (..., 3, 3) stack for an
    array of angles.  The transform acts on stiffness matrices as
    ``D_rot = R @ D @ R.T``.
    """
    theta = np.asarray(theta, dtype=float)
    c = np.cos(theta)
    s = np.sin(theta)
    c2 = c * c
    s2 = s * s
    sc = s * c
    s2t = np.sin(2.0 * theta)
    out = np.empty(theta.shape + (3, 3))
    out[..., 0, 0] = c2
    out[..., 0, 1] = s2
    out[..., 0, 2] = -s2t
    out[..., 1, 0] = s2
    out[..., 1, 1] = c2
    out[..., 1, 2] = s2t
    out[..., 2, 0] = sc
    out[..., 2, 1] = -sc
    out[..., 2, 2] = c2 - s2
    return out


def rotation_matrix_derivative(theta):
    """Elementwise angle derivative of :func:`rotation_matrix`."""
    theta = np.asarray(theta, dtype=float)
    s2t = np.sin(2.0 * theta)
    c2t = np.cos(2.0 * theta)
    out = np.empty(theta.shape + (3, 3))
    out[..., 0, 0] = -s2t
    out[..., 0, 1] = s2t
    out[..., 0, 2] = -2.0 * c2t
    out[..., 1, 0] = s2t
    out[..., 1, 1] = -s2t
    out[..., 1, 2] = 2.0 * c2t
    out[..., 2, 0] = c2t
    out[..., 2, 1] = -c2t
    out[..., 2, 2] = -2.0 * s2t
    return out


def rotate_constitutive(D: np.ndarray, theta) -> np.ndarray:
    """Rotated stiffness ``R(theta) @ D @ R(theta).T``; broadcasts over angles."""
    lam = rotation_matrix(theta)
    out = np.einsum("...ij,jk,...lk->...il", lam, np.asarray(D, dtype=float), lam)
    return 0.5 * (out + out.swapaxes(-1, -2))  # exactly symmetric for symmetric D


def rotate_constitutive_derivative(D: np.ndarray, theta) -> np.ndarray:
    """Angle derivative of :func:`rotate_constitutive` (product rule on both factors)."""
    D = np.asarray(D, dtype=float)
    lam = rotation_matrix(theta)
    dlam = rotation_matrix_derivative(theta)
    left = np.einsum("...ij,jk,...lk->...il", dlam, D, lam)
    right = np.einsum("...ij,jk,...lk->...il", lam, D, dlam)
    return left + right


@dataclass(frozen=True)
class CandidateAngles:
    """Ordered set of candidate fibre angles, stored in degrees.

    Angles must be distinct modulo 180 degrees (a fibre at ``theta`` and
    ``theta + 180`` is the same fibre).
    """

    degrees: tuple

    def __init__(self, degrees):
        degrees = tuple(float(a) for a in degrees)
        if len(degrees) < 2:
            raise ValueError(f"need at least 2 candidate angles, got {len(degrees)}")
        for a in degrees:
            if not -90.0 <= a <= 90.0:
                raise ValueError(f"candidate angle {a} outside [-90, 90] degrees")
        reduced = [a % 180.0 for a in degrees]
        for i, ri in enumerate(reduced):
            for rj in reduced[i + 1:]:
                if abs(ri - rj) < 1e-12 or abs(abs(ri - rj) - 180.0) < 1e-12:
                    raise ValueError(f"candidate angles duplicate modulo 180 degrees: {degrees}")
        object.__setattr__(self, "degrees", degrees)

    def __len__(self) -> int:
        return len(self.degrees)

    @property
    def radians(self) -> np.ndarray:
        return np.deg2rad(np.array(self.degrees))

    def rotated_stack(self, D_base: np.ndarray) -> np.ndarray:
        """(n, 3, 3) stack of the base stiffness rotated to each candidate angle."""
        return rotate_constitutive(D_base, self.radians)


def _weight_factors(chi: np.ndarray, p: float, eps: float):
    """Shared pieces of the weight product: per-candidate gain and suppression terms."""
    chi = np.asarray(chi, dtype=float)
    if chi.shape[-1] < 2:
        raise ValueError("candidate-density rows need at least 2 entries")
    if p < 1.0:
        raise ValueError(f"penalty exponent must be >= 1, got {p}")
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must be a small positive number in (0, 1), got {eps}")
    if np.any(chi < -1e-12) or np.any(chi > 1.0 + 1e-12):
        raise ValueError("candidate densities must lie in [0, 1]")
    chi = np.clip(chi, 0.0, 1.0)
    gain = eps + chi ** p
    suppress = eps + (1.0 - chi ** p)
    return chi, gain, suppress


def dmo_weights(chi, p: float = 3.0, eps: float = 1e-9) -> np.ndarray:
    """Penalized selection weights for candidate densities ``chi``.

    ``w_j = (eps + chi_j^p) * prod_{k != j} (eps + 1 - chi_k^p)``, so a
    one-hot row yields one weight near 1 and the rest near 0.  The weights
    are deliberately not normalized.  Accepts a single row ``(n,)`` or a
    batch ``(N, n)``.
    """
    chi, gain, suppress = _weight_factors(chi, p, eps)
    n = chi.shape[-1]
    # products of the suppression terms excluding index j, without division
    left = np.ones_like(suppress)
    right = np.ones_like(suppress)
    for j in range(1, n):
        left[..., j] = left[..., j - 1] * suppress[..., j - 1]
        right[..., n - 1 - j] = right[..., n - j] * suppress[..., n - j]
    return gain * left * right


def dmo_weight_gradient(chi, p: float = 3.0, eps: float = 1e-9) -> np.ndarray:
    """Jacobian of :func:`dmo_weights`: ``out[..., k, j] = d w_k / d chi_j``."""
    chi, gain, suppress = _weight_factors(chi, p, eps)
    n = chi.shape[-1]
    dgain = p * chi ** (p - 1.0)  # d(chi^p)/dchi; 0^0 == 1 covers p == 1
    out = np.zeros(chi.shape + (n,))
    for k in range(n):
        others = [m for m in range(n) if m != k]
        prod_others = np.prod(suppress[..., others], axis=-1)
        out[..., k, k] = dgain[..., k] * prod_others
        for j in others:
            rest = [m for m in others if m != j]
            prod_rest = np.prod(suppress[..., rest], axis=-1) if rest else 1.0
            out[..., k, j] = -dgain[..., j] * gain[..., k] * prod_rest
    return out


def dmo_effective_constitutive(chi, candidates: CandidateAngles, D_base: np.ndarray,
                               p: float = 3.0, eps: float = 1e-9) -> np.ndarray:
    """Weighted-sum stiffness over the rotated candidate stiffnesses.

    Returns (3, 3) for a single row of densities or (N, 3, 3) for a batch.
    """
    w = dmo_weights(chi, p, eps)
    stack = candidates.rotated_stack(np.asarray(D_base, dtype=float))
    return np.einsum("...j,jab->...ab", w, stack)
