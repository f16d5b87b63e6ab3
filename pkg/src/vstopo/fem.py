"""Plane-stress finite elements on structured grids of unit-square Q4 cells.

Node numbering is row-major from the bottom-left corner: node ``(i, j)``
has index ``j * (nx + 1) + i`` for ``i in 0..nx``, ``j in 0..ny``.
Elements follow the same convention, element ``(i, j)`` has index
``j * nx + i`` and its corner nodes are listed counter-clockwise starting
at the bottom-left corner.  Each node carries DOFs ``(2 * node, 2 * node + 1)``
for the x and y displacement.  This numbering is fixed so that exported
CSV artifacts are reproducible byte for byte.

Elements are unit squares with unit thickness; the element stiffness is
integrated with 2x2 Gauss quadrature, which is exact for the bilinear Q4
integrand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .materials import check_symmetric

__all__ = [
    "Mesh",
    "BoundaryConditions",
    "LinearSystemResult",
    "SingularSystemError",
    "build_mesh",
    "element_stiffness",
    "element_stiffness_batch",
    "stiffness_basis",
    "assemble_global_stiffness",
    "assemble_and_solve",
    "element_compliance_sensitivity",
    "GridAssembler",
    "save_matrix_csv",
]

SOLVE_RESIDUAL_TOL = 1e-8


class SingularSystemError(RuntimeError):
    """Raised when the constrained stiffness matrix cannot be solved reliably."""


@dataclass(frozen=True)
class Mesh:
    """Structured grid of nx-by-ny unit-square Q4 elements."""

    nx: int
    ny: int
    node_coords: np.ndarray  # (n_nodes, 2)
    connectivity: np.ndarray  # (n_elements, 4), counter-clockwise
    dof_map: np.ndarray  # (n_nodes, 2) global DOF indices

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    def element_centroids(self) -> np.ndarray:
        """(N, 2) element centroid coordinates in element-size units."""
        i = np.arange(self.n_elements) % self.nx
        j = np.arange(self.n_elements) // self.nx
        return np.column_stack([i + 0.5, j + 0.5])

    def node_index(self, x: float, y: float) -> int:
        """Index of the grid node nearest to ``(x, y)`` (ties go down-left)."""
        i = int(np.clip(np.floor(x + 0.5), 0, self.nx))
        j = int(np.clip(np.floor(y + 0.5), 0, self.ny))
        return j * (self.nx + 1) + i


def build_mesh(nx: int, ny: int) -> Mesh:
    """Build the structured mesh for an ``nx`` by ``ny`` grid of unit squares."""
    if not (isinstance(nx, (int, np.integer)) and isinstance(ny, (int, np.integer))):
        raise ValueError(f"element counts must be integers, got nx={nx!r}, ny={ny!r}")
    if nx < 1 or ny < 1:
        raise ValueError(f"element counts must be >= 1, got nx={nx}, ny={ny}")
    nx = int(nx)
    ny = int(ny)
    xs, ys = np.meshgrid(np.arange(nx + 1, dtype=float), np.arange(ny + 1, dtype=float))
    node_coords = np.column_stack([xs.ravel(), ys.ravel()])
    ei = np.arange(nx * ny) % nx
    ej = np.arange(nx * ny) // nx
    n0 = ej * (nx + 1) + ei
    connectivity = np.column_stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1]).astype(np.int64)
    dof_map = np.column_stack([2 * np.arange((nx + 1) * (ny + 1)),
                               2 * np.arange((nx + 1) * (ny + 1)) + 1]).astype(np.int64)
    return Mesh(nx=nx, ny=ny, node_coords=node_coords, connectivity=connectivity, dof_map=dof_map)


@dataclass(frozen=True)
class BoundaryConditions:
    """Fixed DOFs and nodal point loads, optionally split into load cases.

    ``point_loads`` entries are ``(node_index, direction, magnitude)`` or
    ``(node_index, direction, magnitude, case)`` with direction ``"x"`` or
    ``"y"``; loads sharing a case index act simultaneously, distinct cases
    are solved separately and their compliances summed.  A load may not
    act on a DOF that is fixed in the same direction.
    """

    fixed_dofs: np.ndarray
    point_loads: tuple = field(default_factory=tuple)

    def __post_init__(self):
        fixed = np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        if fixed.size == 0:
            raise ValueError("fixed_dofs must be nonempty; an unconstrained structure is singular")
        object.__setattr__(self, "fixed_dofs", fixed)
        loads = []
        fixed_set = set(fixed.tolist())
        for entry in self.point_loads:
            if len(entry) == 3:
                node, direction, magnitude = entry
                case = 0
            else:
                node, direction, magnitude, case = entry
            if direction not in ("x", "y"):
                raise ValueError(f"load direction must be 'x' or 'y', got {direction!r}")
            magnitude = float(magnitude)
            if not np.isfinite(magnitude):
                raise ValueError(f"load magnitude must be finite, got {magnitude!r}")
            if not (isinstance(case, (int, np.integer)) and case >= 0):
                raise ValueError(f"load case must be a nonnegative integer, got {case!r}")
            dof = 2 * int(node) + (0 if direction == "x" else 1)
            if dof in fixed_set:
                raise ValueError(f"load on node {node} direction {direction} acts on a fixed DOF")
            loads.append((int(node), direction, magnitude, int(case)))
        cases = sorted({c for _, _, _, c in loads})
        if loads and cases != list(range(len(cases))):
            raise ValueError(f"load case indices must be contiguous from 0, got {cases}")
        object.__setattr__(self, "point_loads", tuple(loads))

    @property
    def n_load_cases(self) -> int:
        return max((c for _, _, _, c in self.point_loads), default=0) + 1

    def load_matrix(self, mesh: Mesh) -> np.ndarray:
        """(n_dofs, n_load_cases) load columns, one per case."""
        f = np.zeros((mesh.n_dofs, self.n_load_cases))
        for node, direction, magnitude, case in self.point_loads:
            if not 0 <= node < mesh.n_nodes:
                raise ValueError(f"load node {node} out of range for mesh with {mesh.n_nodes} nodes")
            f[2 * node + (0 if direction == "x" else 1), case] += magnitude
        return f

    def load_vector(self, mesh: Mesh) -> np.ndarray:
        """All cases accumulated into one vector (for single-case problems and debugging)."""
        return self.load_matrix(mesh).sum(axis=1)


@dataclass(frozen=True)
class LinearSystemResult:
    displacements: np.ndarray  # (n_dofs,) or (n_dofs, n_load_cases), zero at fixed DOFs
    compliance: float  # summed over load cases


def _gauss_basis() -> np.ndarray:
    """(3, 3, 8, 8) tensor T with k(D) = einsum('ab,abij->ij', D, T) for a unit square."""
    g = 1.0 / np.sqrt(3.0)
    T = np.zeros((3, 3, 8, 8))
    for xi in (-g, g):
        for eta in (-g, g):
            # bilinear shape-function derivatives on the parent square [-1, 1]^2,
            # mapped to the unit square (jacobian is diag(1/2, 1/2))
            dn_dxi = 0.25 * np.array([-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)])
            dn_deta = 0.25 * np.array([-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)])
            dn_dx = 2.0 * dn_dxi
            dn_dy = 2.0 * dn_deta
            B = np.zeros((3, 8))
            B[0, 0::2] = dn_dx
            B[1, 1::2] = dn_dy
            B[2, 0::2] = dn_dy
            B[2, 1::2] = dn_dx
            T += np.einsum("ai,bj->abij", B, B) * 0.25  # det J = 1/4
    return T


_BASIS: np.ndarray | None = None


def stiffness_basis() -> np.ndarray:
    """Cached quadrature tensor; contract a (3, 3) stiffness against it to get k_e."""
    global _BASIS
    if _BASIS is None:
        _BASIS = _gauss_basis()
        _BASIS.setflags(write=False)
    return _BASIS


def element_stiffness(D_bar: np.ndarray) -> np.ndarray:
    """8x8 stiffness of a unit-square Q4 element with constitutive matrix ``D_bar``."""
    D_bar = np.asarray(D_bar, dtype=float)
    if D_bar.shape != (3, 3):
        raise ValueError(f"expected a (3, 3) constitutive matrix, got shape {D_bar.shape}")
    if not np.isfinite(D_bar).all():
        raise ValueError("constitutive matrix contains NaN or Inf")
    check_symmetric(D_bar)
    k = np.einsum("ab,abij->ij", D_bar, stiffness_basis())
    return 0.5 * (k + k.T)  # exact symmetry regardless of summation order


def element_stiffness_batch(D_stack: np.ndarray) -> np.ndarray:
    """(N, 8, 8) stiffness batch from an (N, 3, 3) constitutive stack (no validation)."""
    k = np.einsum("eab,abij->eij", D_stack, stiffness_basis())
    return 0.5 * (k + k.swapaxes(-1, -2))


def element_dofs(mesh: Mesh) -> np.ndarray:
    """(N, 8) per-element global DOF indices, interleaved (x, y) per corner node."""
    conn = mesh.connectivity
    edof = np.empty((mesh.n_elements, 8), dtype=np.int64)
    edof[:, 0::2] = 2 * conn
    edof[:, 1::2] = 2 * conn + 1
    return edof


def assemble_global_stiffness(mesh: Mesh, k_batch: np.ndarray) -> sp.csr_matrix:
    """Assemble the unconstrained global stiffness from (N, 8, 8) element blocks."""
    edof = element_dofs(mesh)
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    K = sp.coo_matrix((k_batch.ravel(), (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs))
    return K.tocsr()


class GridAssembler:
    """Reusable assemble-and-solve engine for one mesh/BC combination.

    Precomputes the reduced sparsity pattern (fixed DOFs eliminated by
    row/column removal) so that repeated solves with changing element
    stiffness only pay for numeric assembly and factorization.
    """

    def __init__(self, mesh: Mesh, bc: BoundaryConditions):
        self.mesh = mesh
        self.bc = bc
        self.edof = element_dofs(mesh)
        fixed = bc.fixed_dofs
        if fixed.min() < 0 or fixed.max() >= mesh.n_dofs:
            raise ValueError("fixed DOF index out of range")
        mask = np.ones(mesh.n_dofs, dtype=bool)
        mask[fixed] = False
        self.free = np.nonzero(mask)[0]
        reduced = -np.ones(mesh.n_dofs, dtype=np.int64)
        reduced[self.free] = np.arange(self.free.size)
        rows = reduced[np.repeat(self.edof, 8, axis=1).ravel()]
        cols = reduced[np.tile(self.edof, (1, 8)).ravel()]
        self._keep = (rows >= 0) & (cols >= 0)
        self._rows = rows[self._keep]
        self._cols = cols[self._keep]
        self.n_load_cases = bc.n_load_cases
        self.f_full = bc.load_matrix(mesh)
        self._f = self.f_full[self.free]  # (n_free, n_cases)
        self._f_norms = np.linalg.norm(self._f, axis=0)

    def solve(self, k_batch: np.ndarray) -> LinearSystemResult:
        """Solve K U = F for every load case with one factorization.

        ``displacements`` is a vector for single-case problems and an
        ``(n_dofs, n_cases)`` matrix otherwise; the compliance is summed
        over cases.
        """
        data = k_batch.ravel()[self._keep]
        if not np.isfinite(data).all():
            raise ValueError("element stiffness contains NaN or Inf")
        n = self.free.size
        m = self._f.shape[1]
        K = sp.coo_matrix((data, (self._rows, self._cols)), shape=(n, n)).tocsc()
        u = np.zeros((self.mesh.n_dofs, m))
        if float(self._f_norms.max(initial=0.0)) == 0.0:
            return LinearSystemResult(displacements=u[:, 0] if m == 1 else u, compliance=0.0)
        try:
            lu = splu(K)
            uf = lu.solve(self._f)
        except RuntimeError as exc:  # SuperLU signals exact singularity this way
            raise SingularSystemError(
                "stiffness matrix is singular after applying supports; "
                "the structure is insufficiently constrained or fully void"
            ) from exc
        residual = np.linalg.norm(K @ uf - self._f, axis=0) / np.maximum(self._f_norms, 1e-300)
        worst = float(residual.max())
        if not np.isfinite(uf).all() or worst > SOLVE_RESIDUAL_TOL:
            raise SingularSystemError(
                f"linear solve failed (relative residual {worst:.3e} > {SOLVE_RESIDUAL_TOL:g}); "
                "the stiffness matrix is singular or severely ill-conditioned, "
                "check supports and void regions"
            )
        u[self.free] = uf
        compliance = float(np.sum(self._f * uf))
        return LinearSystemResult(displacements=u[:, 0] if m == 1 else u, compliance=compliance)

    def gather(self, u: np.ndarray) -> np.ndarray:
        """(N, 8, n_cases) element displacements gathered from global columns."""
        u = np.asarray(u)
        if u.ndim == 1:
            u = u[:, None]
        return u[self.edof]


def assemble_and_solve(mesh: Mesh, per_element_D, bc: BoundaryConditions) -> LinearSystemResult:
    """Assemble the global system for per-element constitutive matrices and solve it."""
    D_stack = np.asarray(per_element_D, dtype=float)
    if D_stack.shape != (mesh.n_elements, 3, 3):
        raise ValueError(
            f"need one (3, 3) constitutive matrix per element, "
            f"got shape {D_stack.shape} for {mesh.n_elements} elements")
    if not np.isfinite(D_stack).all():
        raise ValueError("constitutive input contains NaN or Inf")
    return GridAssembler(mesh, bc).solve(element_stiffness_batch(D_stack))


def element_compliance_sensitivity(u: np.ndarray, mesh: Mesh, e: int, dk_e: np.ndarray) -> float:
    """Compliance derivative ``-u_e^T dk_e u_e`` for element ``e`` (summed over load cases)."""
    if not 0 <= e < mesh.n_elements:
        raise IndexError(f"element index {e} out of range for {mesh.n_elements} elements")
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    ue = u[element_dofs(mesh)[e]]
    dk = np.asarray(dk_e, dtype=float)
    return float(-np.einsum("ak,ab,bk->", ue, dk, ue))


def save_matrix_csv(path, matrix) -> None:
    """Debug dump of a dense or sparse matrix/vector as plain CSV."""
    arr = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix)
    np.savetxt(path, np.atleast_2d(arr), delimiter=",", fmt="%.12g")
