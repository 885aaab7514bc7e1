"""Forward maps y = G(u) and their adjoint-gradient actions.

Three flavors:

* ``LinearMap``: y = A u with compact SVD bookkeeping and the orthonormal
  null-space basis used by the well-posedness diagnostics.
* ``Elliptic1D``: the analytic solution of -(e^{u1} p')' = 1 on (0,1),
  p(0)=0, p'(1)=u2/e^{u1}... reduced to its closed form
  p(x) = u2 x + e^{-u1}(-x^2/2 + x/2), measured at two points.
* ``Elliptic2D``: -div(a grad p) = f on the unit square with Dirichlet
  data, a = exp(u1 phi1 + u2 phi2), discretized by a 5-point finite-volume
  scheme; gradients come from a discrete adjoint solve and are exact for
  the discrete forward map.

Every map exposes ``apply``/``grad_adjoint`` plus batched ``apply_many``/
``grad_adjoint_many``; grad_adjoint(u, xi) returns nabla_u G(u)^T xi.
"""

import numpy as np
from scipy.linalg import solveh_banded

from .errors import NumericsError

__all__ = [
    "ForwardMap",
    "LinearMap",
    "augment",
    "Elliptic1D",
    "elliptic1d_solve",
    "EllipticGrid2D",
    "Elliptic2D",
    "elliptic2d_solve",
]


class ForwardMap:
    """Deterministic map u in R^m -> y in R^n with adjoint gradient action.

    Subclasses set in_dim / out_dim and implement apply and grad_adjoint;
    the batched variants default to loops and may be overridden with
    vectorized versions.
    """

    in_dim = None
    out_dim = None

    def apply(self, u):
        raise NotImplementedError

    def grad_adjoint(self, u, xi):
        raise NotImplementedError

    def apply_many(self, U):
        U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        Y = np.empty((U.shape[0], self.out_dim))
        for j in range(U.shape[0]):
            Y[j] = self.apply(U[j])
        return Y

    def grad_adjoint_many(self, U, Xi):
        U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        Xi = np.atleast_2d(np.asarray(Xi, dtype=np.float64))
        G = np.empty((U.shape[0], self.in_dim))
        for j in range(U.shape[0]):
            G[j] = self.grad_adjoint(U[j], Xi[j])
        return G


def _check_len(v, n, name):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != n:
        raise ValueError(f"{name} must have length {n}, got {v.shape[0]}")
    return v


def augment(A):
    """Orthonormal basis of null(A) as rows of an (m-r) x m matrix.

    Empty for n >= m (full-rank A has trivial null space there).  Each
    row's first entry larger than 1e-12 in magnitude is made positive, so
    the basis is reproducible up to the underlying SVD.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    r = min(A.shape)
    s = np.linalg.svd(A, compute_uv=False)
    if s[r - 1] <= 1e-10 * s[0]:
        raise ValueError("A not full rank")
    _, _, vh = np.linalg.svd(A, full_matrices=True)
    rows = vh[r:].copy()
    for row in rows:
        lead = row[np.abs(row) > 1e-12]
        if lead.size and lead[0] < 0:
            row *= -1.0
    return rows


class LinearMap(ForwardMap):
    """y = A u for a full-rank real matrix A (n x m).

    Attributes
    ----------
    A : ndarray (n, m)
    V, S, U : compact SVD factors with A = V diag(S) U^T, r = min(m, n)
    A_aug : ndarray (m - r, m)
        Orthonormal rows spanning null(A); empty when n >= m.
    """

    def __init__(self, A):
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        if A.ndim != 2:
            raise ValueError("A must be a matrix")
        n, m = A.shape
        w, s, vh = np.linalg.svd(A, full_matrices=True)
        r = min(n, m)
        if s[r - 1] <= 1e-10 * s[0]:
            raise ValueError("A not full rank")
        self.A = A
        self.in_dim = m
        self.out_dim = n
        self.rank = r
        self.V = w[:, :r]
        self.S = s[:r].copy()
        self.U = vh[:r].T.copy()
        rows = vh[r:].copy()
        for row in rows:
            lead = row[np.abs(row) > 1e-12]
            if lead.size and lead[0] < 0:
                row *= -1.0
        self.A_aug = rows

    def apply(self, u):
        return self.A @ _check_len(u, self.in_dim, "u")

    def grad_adjoint(self, u, xi):
        return self.A.T @ _check_len(xi, self.out_dim, "xi")

    def apply_many(self, U):
        return np.atleast_2d(np.asarray(U, dtype=np.float64)) @ self.A.T

    def grad_adjoint_many(self, U, Xi):
        return np.atleast_2d(np.asarray(Xi, dtype=np.float64)) @ self.A


# ---------------------------------------------------------------------------
# analytic 1-D elliptic problem


def elliptic1d_solve(u1, u2, x):
    """p(x) = u2 x + e^{-u1}(-x^2/2 + x/2) for x in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("x must lie in [0, 1]")
    return u2 * x + np.exp(-u1) * (x - x * x) / 2.0


class Elliptic1D(ForwardMap):
    """Two-point measurement of the analytic 1-D elliptic solution.

    y_k = p(x_k) with p from elliptic1d_solve; measurement points default
    to (0.25, 0.75).  The 2 x 2 Jacobian is analytic:
    dp/du1 = -e^{-u1}(x - x^2)/2 and dp/du2 = x.
    """

    in_dim = 2

    def __init__(self, measure_points=(0.25, 0.75)):
        x = np.asarray(measure_points, dtype=np.float64).reshape(-1)
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise ValueError("measure points must lie in [0, 1]")
        self.x = x
        self.out_dim = x.shape[0]

    def apply(self, u):
        u = _check_len(u, 2, "u")
        return elliptic1d_solve(u[0], u[1], self.x)

    def _jacobian(self, u1):
        half = (self.x - self.x * self.x) / 2.0
        J = np.empty((self.out_dim, 2))
        J[:, 0] = -np.exp(-u1) * half
        J[:, 1] = self.x
        return J

    def grad_adjoint(self, u, xi):
        u = _check_len(u, 2, "u")
        return self._jacobian(u[0]).T @ _check_len(xi, self.out_dim, "xi")

    def apply_many(self, U):
        U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        half = (self.x - self.x * self.x) / 2.0
        return U[:, 1:2] * self.x + np.exp(-U[:, 0:1]) * half

    def grad_adjoint_many(self, U, Xi):
        U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        Xi = np.atleast_2d(np.asarray(Xi, dtype=np.float64))
        half = (self.x - self.x * self.x) / 2.0
        G = np.empty((U.shape[0], 2))
        G[:, 0] = Xi @ half * (-np.exp(-U[:, 0]))
        G[:, 1] = Xi @ self.x
        return G


# ---------------------------------------------------------------------------
# 2-D elliptic problem on the unit square


def g_dirichlet(x1, x2):
    """Boundary data g_D(x1, x2) = sin(2 pi x1) cos(4 pi x2)."""
    return np.sin(2.0 * np.pi * x1) * np.cos(4.0 * np.pi * x2)


def basis_phi1(x1, x2):
    return 10.0 / (9.0 + np.pi**2) * np.cos(np.pi * x1)


def basis_phi2(x1, x2):
    return 10.0 / (9.0 + 2.0 * np.pi**2) * np.cos(np.pi * (x1 + x2))


class EllipticGrid2D:
    """Uniform node-centered grid on [0,1]^2 with receivers and source.

    n_cells >= 8 cells per side, spacing h = 1/n_cells, nodes at
    (i h, j h) for 0 <= i, j <= n_cells.  ``f`` is a constant or a
    callable f(x1, x2) evaluated at nodes.  Receivers are points in
    [0,1]^2 read off the solution by bilinear interpolation.
    """

    def __init__(self, n_cells=64, receivers=((0.25, 0.75), (0.75, 0.5)), f=1.0):
        if n_cells < 8:
            raise ValueError("n_cells must be >= 8")
        rec = np.atleast_2d(np.asarray(receivers, dtype=np.float64))
        if rec.shape[1] != 2:
            raise ValueError("receivers must be (R, 2)")
        if np.any(rec < 0.0) or np.any(rec > 1.0):
            raise ValueError("receivers must lie in [0,1]^2")
        self.n_cells = int(n_cells)
        self.h = 1.0 / n_cells
        self.receivers = rec
        t = np.linspace(0.0, 1.0, n_cells + 1)
        X1, X2 = np.meshgrid(t, t, indexing="ij")
        self.gd = g_dirichlet(X1, X2)
        self.phi = np.stack([basis_phi1(X1, X2), basis_phi2(X1, X2)])
        self.f_nodes = f(X1, X2) * np.ones_like(X1) if callable(f) else np.full_like(X1, float(f))
        # bilinear stencil per receiver: 4 node indices + weights
        ix = np.minimum((rec[:, 0] * n_cells).astype(int), n_cells - 1)
        iy = np.minimum((rec[:, 1] * n_cells).astype(int), n_cells - 1)
        tx = rec[:, 0] * n_cells - ix
        ty = rec[:, 1] * n_cells - iy
        self._ri = np.stack([ix, ix + 1, ix, ix + 1], axis=1)
        self._rj = np.stack([iy, iy, iy + 1, iy + 1], axis=1)
        self._rw = np.stack(
            [(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty], axis=1
        )

    def conductivity(self, u):
        """Nodal coefficient field a = exp(u1 phi1 + u2 phi2).

        Parameters large enough to overflow the exponential (or underflow
        it to an exact zero, which would make faces degenerate) are a
        numerical failure of whatever produced them, not a config error.
        """
        u = _check_len(u, 2, "u")
        a = np.exp(u[0] * self.phi[0] + u[1] * self.phi[1])
        if not np.all(np.isfinite(a)) or not np.all(a > 0.0):
            raise NumericsError("conductivity overflow: parameter magnitude too large")
        return a

    def interpolate(self, field):
        """Bilinear interpolation of a nodal field at the receivers."""
        return np.sum(field[self._ri, self._rj] * self._rw, axis=1)


def _face_coeffs(a):
    # harmonic mean of the two nodal values sharing each face
    ax = 2.0 * a[:-1, :] * a[1:, :] / (a[:-1, :] + a[1:, :])
    ay = 2.0 * a[:, :-1] * a[:, 1:] / (a[:, :-1] + a[:, 1:])
    return ax, ay


def _apply_operator(ax, ay, P):
    # sum over the 4 faces of a_face * (P_node - P_neighbor) at interior nodes
    return (
        ax[:-1, 1:-1] * (P[1:-1, 1:-1] - P[:-2, 1:-1])
        + ax[1:, 1:-1] * (P[1:-1, 1:-1] - P[2:, 1:-1])
        + ay[1:-1, :-1] * (P[1:-1, 1:-1] - P[1:-1, :-2])
        + ay[1:-1, 1:] * (P[1:-1, 1:-1] - P[1:-1, 2:])
    )


def _elim_apply(ax, ay, X):
    # eliminated interior operator: the full 5-point operator applied to a
    # field that is X inside and zero on the boundary ring
    P0 = np.zeros((X.shape[0] + 2, X.shape[1] + 2))
    P0[1:-1, 1:-1] = X
    return _apply_operator(ax, ay, P0)


def _solve_banded_system(grid, ax, ay, rhs_cols, what="elliptic"):
    """Solve the eliminated interior system for one or more RHS columns.

    rhs_cols: (M,) or (M, k) with M = (n-1)^2 interior nodes in i-major
    order.  The matrix is SPD (positive face coefficients, diagonal
    dominance), so a banded Cholesky factorization applies; bandwidth is
    n-1.  Each solution is verified against the assembled operator at
    1e-10 relative residual; high coefficient contrast can leave the raw
    factorization a little above that, in which case up to two rounds of
    iterative refinement with the same matrix restore it.  A residual
    that refinement cannot fix is a genuine failure and raises.
    """
    n = grid.n_cells
    m = n - 1
    band = np.zeros((m + 1, m * m))
    band[m, :] = (ax[:-1, 1:-1] + ax[1:, 1:-1] + ay[1:-1, :-1] + ay[1:-1, 1:]).ravel()
    off1 = np.zeros((m, m))
    off1[:, :-1] = -ay[1:-1, 1:-1]
    band[m - 1, 1:] = off1.ravel()[:-1]
    band[0, m:] = (-ax[1:-1, 1:-1]).ravel()
    rhs2 = rhs_cols if rhs_cols.ndim == 2 else rhs_cols[:, None]
    try:
        sol = solveh_banded(band, rhs2, lower=False)
    except np.linalg.LinAlgError as exc:
        raise NumericsError(f"elliptic system factorization failed: {exc}") from None
    scale = np.linalg.norm(rhs2, axis=0)
    for attempt in range(3):
        res = np.column_stack(
            [_elim_apply(ax, ay, sol[:, j].reshape(m, m)).ravel() for j in range(sol.shape[1])]
        ) - rhs2
        resnorm = np.linalg.norm(res, axis=0)
        bad = (resnorm > 1e-10 * scale) & (scale > 0.0)
        if not bad.any():
            break
        if attempt == 2:
            raise NumericsError(
                f"{what} solve did not converge: residual {resnorm.max():.3e} "
                f"> 1e-10 * {scale.max():.3e}"
            )
        sol[:, bad] -= solveh_banded(band, res[:, bad], lower=False)
    return sol if rhs_cols.ndim == 2 else sol[:, 0]


def elliptic2d_solve(grid, u, a_nodes=None):
    """Solve -div(a grad p) = f with Dirichlet data on the full node grid.

    Returns the (n+1, n+1) nodal field including boundary values.
    ``a_nodes`` overrides the exp(u1 phi1 + u2 phi2) coefficient field
    (test hook for prescribed coefficients such as a == 1).
    """
    a = grid.conductivity(u) if a_nodes is None else np.asarray(a_nodes, dtype=np.float64)
    ax, ay = _face_coeffs(a)
    n = grid.n_cells
    b = grid.h**2 * grid.f_nodes[1:-1, 1:-1].copy()
    g = grid.gd
    b[0, :] += ax[0, 1:-1] * g[0, 1:-1]
    b[-1, :] += ax[-1, 1:-1] * g[-1, 1:-1]
    b[:, 0] += ay[1:-1, 0] * g[1:-1, 0]
    b[:, -1] += ay[1:-1, -1] * g[1:-1, -1]
    sol = _solve_banded_system(grid, ax, ay, b.ravel(), "forward")
    P = g.copy()
    P[1:-1, 1:-1] = sol.reshape(n - 1, n - 1)
    return P


class Elliptic2D(ForwardMap):
    """Receiver measurements of the 2-D elliptic solution.

    apply(u) solves the PDE once and interpolates at the receivers.
    grad_adjoint(u, xi) assembles the system once, solves forward and
    adjoint right-hand sides in a single banded factorization, and sums
    the exact derivative of every face flux; the result is the exact
    gradient of the *discrete* forward map, which is what makes tight
    finite-difference checks possible.
    """

    in_dim = 2

    def __init__(self, grid=None):
        self.grid = grid if grid is not None else EllipticGrid2D()
        self.out_dim = self.grid.receivers.shape[0]

    def apply(self, u):
        return self.grid.interpolate(elliptic2d_solve(self.grid, u))

    def _restrict_adjoint_rhs(self, xi):
        # M^T xi accumulated on the full grid, then cut to interior nodes:
        # receiver weight on a boundary node measures fixed Dirichlet data
        # and contributes nothing to the gradient.
        g = self.grid
        full = np.zeros_like(g.gd)
        np.add.at(full, (g._ri, g._rj), g._rw * np.asarray(xi, dtype=np.float64)[:, None])
        return full[1:-1, 1:-1]

    def grad_adjoint(self, u, xi):
        xi = _check_len(xi, self.out_dim, "xi")
        g = self.grid
        n = g.n_cells
        a = g.conductivity(u)
        ax, ay = _face_coeffs(a)
        f_int = g.h**2 * g.f_nodes[1:-1, 1:-1]
        b = f_int.copy()
        gd = g.gd
        b[0, :] += ax[0, 1:-1] * gd[0, 1:-1]
        b[-1, :] += ax[-1, 1:-1] * gd[-1, 1:-1]
        b[:, 0] += ay[1:-1, 0] * gd[1:-1, 0]
        b[:, -1] += ay[1:-1, -1] * gd[1:-1, -1]
        adj_rhs = self._restrict_adjoint_rhs(xi)
        sol = _solve_banded_system(
            g, ax, ay, np.column_stack([b.ravel(), adj_rhs.ravel()]), "forward/adjoint"
        )
        P = gd.copy()
        P[1:-1, 1:-1] = sol[:, 0].reshape(n - 1, n - 1)
        L = np.zeros_like(gd)
        L[1:-1, 1:-1] = sol[:, 1].reshape(n - 1, n - 1)
        return _gradient_face_sum(g, a, P, L)


def _gradient_face_sum(grid, a, P, L):
    """grad_k = - sum over faces of (d a_face / d u_k) (dP) (dL).

    a_face is the harmonic mean 2 a_p a_q / (a_p + a_q) and nodal values
    depend on u through a = exp(sum u_k phi_k), so
    d a_face / d u_k = 2 (a_q^2 a_p phi_k(p) + a_p^2 a_q phi_k(q)) / (a_p + a_q)^2.
    P carries Dirichlet values on the boundary, L carries zeros; faces
    joining two boundary nodes then drop out through dL = 0.
    """
    dpx = P[1:, :] - P[:-1, :]
    dlx = L[1:, :] - L[:-1, :]
    dpy = P[:, 1:] - P[:, :-1]
    dly = L[:, 1:] - L[:, :-1]
    sx = (a[:-1, :] + a[1:, :]) ** 2
    sy = (a[:, :-1] + a[:, 1:]) ** 2
    grad = np.empty(2)
    for k in range(2):
        ph = grid.phi[k]
        dax = 2.0 * (a[1:, :] ** 2 * a[:-1, :] * ph[:-1, :] + a[:-1, :] ** 2 * a[1:, :] * ph[1:, :]) / sx
        day = 2.0 * (a[:, 1:] ** 2 * a[:, :-1] * ph[:, :-1] + a[:, :-1] ** 2 * a[:, 1:] * ph[:, 1:]) / sy
        grad[k] = -(np.sum(dax * dpx * dlx) + np.sum(day * dpy * dly))
    return grad
