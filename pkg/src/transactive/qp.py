"""Convex quadratic programming by a primal-dual interior-point method.

Solves   min ½ xᵀHx + qᵀx   s.t.  A x = b,  G x ≤ h

with H positive semidefinite, via Mehrotra's predictor-corrector scheme on
the condensed KKT system.  The implementation is deliberately small: Ruiz
equilibration with cost scaling up front (objective coefficients here can
span many orders of magnitude), one sparse LU factorization per iteration,
fraction-to-boundary step control, iterative refinement, and an optional
active-set polish that re-solves on the identified active constraints so
reported multipliers are accurate to machine precision (the control code
reads marginal prices straight off the duals).

Dual convention:  H x + q + Aᵀy + Gᵀz = 0  with  z ≥ 0,  so for
min ½x² s.t. x = 3 the equality multiplier is y = −3.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.sparse.linalg import splu

_FTB = 0.995  # fraction-to-boundary factor


@dataclass
class QpResult:
    """Primal/dual solution with solver diagnostics."""

    x: np.ndarray
    y: np.ndarray  # equality multipliers
    z: np.ndarray  # inequality multipliers, >= 0
    s: np.ndarray  # inequality slacks, >= 0
    status: str  # "optimal" | "max_iter" | "infeasible"
    iterations: int
    objective: float
    primal_residual: float
    dual_residual: float
    gap: float
    polished: bool = False


def _as_csc(mat, shape) -> sp.csc_matrix:
    if mat is None:
        return sp.csc_matrix(shape)
    if sp.issparse(mat):
        return mat.tocsc().astype(float)
    return sp.csc_matrix(np.asarray(mat, dtype=float).reshape(shape))


def _abs_mat(mat: sp.csc_matrix) -> sp.csc_matrix:
    out = mat.copy()
    out.data = np.abs(out.data)
    return out


def _col_max(mat: sp.csc_matrix) -> np.ndarray:
    if mat.shape[0] == 0 or mat.nnz == 0:
        return np.zeros(mat.shape[1])
    return _abs_mat(mat).max(axis=0).toarray().ravel()


def _row_max(mat: sp.csc_matrix) -> np.ndarray:
    if mat.shape[1] == 0 or mat.nnz == 0:
        return np.zeros(mat.shape[0])
    return _abs_mat(mat).max(axis=1).toarray().ravel()


def _equilibrate(h_mat, q, a_mat, b, g_mat, h_vec, iters: int = 20):
    """Ruiz scaling of the problem data plus cost normalization.

    Returns scaled copies and the diagonal factors (d, d_eq, d_in, c_obj)
    with  x = d·x',  y = d_eq·y'/c_obj,  z = d_in·z'/c_obj,  s = s'/d_in.
    """
    n, p, m = q.size, b.size, h_vec.size
    d = np.ones(n)
    d_eq = np.ones(p)
    d_in = np.ones(m)
    h_s, a_s, g_s = h_mat.copy(), a_mat.copy(), g_mat.copy()
    for _ in range(iters):
        col = np.maximum(_col_max(h_s), np.maximum(_col_max(a_s), _col_max(g_s)))
        col[col == 0] = 1.0
        sc = 1.0 / np.sqrt(col)
        dia = sp.diags(sc)
        h_s = (dia @ h_s @ dia).tocsc()
        a_s = (a_s @ dia).tocsc()
        g_s = (g_s @ dia).tocsc()
        d *= sc
        if p:
            row = _row_max(a_s)
            row[row == 0] = 1.0
            se = 1.0 / np.sqrt(row)
            a_s = (sp.diags(se) @ a_s).tocsc()
            d_eq *= se
        if m:
            row = _row_max(g_s)
            row[row == 0] = 1.0
            sg = 1.0 / np.sqrt(row)
            g_s = (sp.diags(sg) @ g_s).tocsc()
            d_in *= sg
        worst = max(
            np.abs(np.maximum(_col_max(h_s),
                              np.maximum(_col_max(a_s), _col_max(g_s))) - 1.0).max(initial=0.0),
            np.abs(_row_max(a_s) - 1.0).max(initial=0.0) if p else 0.0,
            np.abs(_row_max(g_s) - 1.0).max(initial=0.0) if m else 0.0,
        )
        if worst < 0.1:
            break
    q_s = d * q
    c_obj = 1.0 / max(1.0, np.abs(q_s).max(initial=0.0), _col_max(h_s).max(initial=0.0))
    h_s = (h_s * c_obj).tocsc()
    q_s = q_s * c_obj
    return h_s, q_s, a_s, d_eq * b, g_s, d_in * h_vec, d, d_eq, d_in, c_obj


def _kkt_factor(h_mat, a_mat, g_mat, w_diag, delta):
    """Factor the condensed system

        [H + GᵀWG + δI   Aᵀ ] ,   W = diag(z/s)
        [A              -δI ]

    and return a solve(rhs_x, rhs_y) function; predictor and corrector
    share the factorization.
    """
    n = h_mat.shape[0]
    p = a_mat.shape[0]
    m_mat = h_mat + g_mat.T @ sp.diags(w_diag) @ g_mat + delta * sp.eye(n)
    if p:
        kkt = sp.bmat([[m_mat, a_mat.T], [a_mat, -delta * sp.eye(p)]], format="csc")
    else:
        kkt = m_mat.tocsc()
    lu = splu(kkt)

    def solve(rhs_x, rhs_y):
        rhs = np.concatenate([rhs_x, rhs_y]) if p else rhs_x
        sol = lu.solve(rhs)
        sol = sol + lu.solve(rhs - kkt @ sol)  # one refinement pass
        return (sol[:n], sol[n:]) if p else (sol, np.zeros(0))

    return solve


def _ipm(h_mat, q, a_mat, b, g_mat, h_vec, max_iter, tol):
    """Mehrotra predictor-corrector core; data assumed well scaled."""
    n, p, m = q.size, b.size, h_vec.size
    x = np.zeros(n)
    y = np.zeros(p)
    s = np.maximum(1.0, h_vec - g_mat @ x)
    z = np.ones(m)
    scale_d = 1.0 + np.abs(q).max(initial=0.0)
    scale_p = 1.0 + max(np.abs(b).max(initial=0.0), np.abs(h_vec).max(initial=0.0))
    h_norm = max(_col_max(h_mat).max(initial=0.0), 1.0)

    for it in range(1, max_iter + 1):
        rd = h_mat @ x + q + a_mat.T @ y + g_mat.T @ z
        rp = a_mat @ x - b
        rg = g_mat @ x + s - h_vec
        mu = float(s @ z) / m

        pri = max(np.abs(rp).max(initial=0.0), np.abs(rg).max(initial=0.0)) / scale_p
        dua = np.abs(rd).max(initial=0.0) / scale_d
        obj = float(0.5 * x @ (h_mat @ x) + q @ x)
        if pri < tol and dua < tol and mu / (1.0 + abs(obj)) < tol:
            return x, y, z, s, "optimal", it - 1

        # Farkas-style certificate: multipliers blowing up while combining
        # into (near) nothing with negative support value -> no feasible point
        mult_norm = max(np.abs(y).max(initial=0.0), np.abs(z).max(initial=0.0))
        if mult_norm > 1e8:
            combo = np.abs(a_mat.T @ y + g_mat.T @ z).max(initial=0.0)
            support = float(b @ y + h_vec @ z)
            if combo <= 1e-6 * mult_norm and support < -1e-8 * mult_norm:
                return x, y, z, s, "infeasible", it - 1

        w = z / s
        delta = 1e-11 * h_norm
        try:
            solve = _kkt_factor(h_mat, a_mat, g_mat, w, delta)
        except RuntimeError:
            solve = _kkt_factor(h_mat, a_mat, g_mat, w, 1e-6 * h_norm)

        def direction(rc):
            extra = g_mat.T @ ((z * rg - rc) / s)
            dx, dy = solve(-(rd + extra), -rp)
            ds = -rg - g_mat @ dx
            dz = (-rc - z * ds) / s
            return dx, dy, ds, dz

        def boundary_step(vec, dvec):
            neg = dvec < 0
            if not neg.any():
                return 1.0
            return min(1.0, float((_FTB * -vec[neg] / dvec[neg]).min()))

        # predictor
        dx_a, dy_a, ds_a, dz_a = direction(s * z)
        a_p = boundary_step(s, ds_a)
        a_d = boundary_step(z, dz_a)
        mu_aff = float((s + a_p * ds_a) @ (z + a_d * dz_a)) / m
        sigma = (max(mu_aff, 0.0) / mu) ** 3

        # corrector
        dx, dy, ds, dz = direction(s * z + ds_a * dz_a - sigma * mu)
        a_p = boundary_step(s, ds)
        a_d = boundary_step(z, dz)

        x = x + a_p * dx
        s = s + a_p * ds
        y = y + a_d * dy
        z = z + a_d * dz

    return x, y, z, s, "max_iter", max_iter


def solve_qp(
    h_mat,
    q,
    a_eq=None,
    b_eq=None,
    g_ineq=None,
    h_ineq=None,
    *,
    max_iter: int = 100,
    tol: float = 1e-9,
    polish: bool = True,
) -> QpResult:
    """Solve the convex QP; see module docstring for the convention.

    Any constraint block may be omitted.  ``status`` is "optimal" when
    scaled primal/dual residuals and the complementarity gap fall below
    ``tol`` (after polish they are typically near machine epsilon),
    "infeasible" when a Farkas-type certificate is detected, and
    "max_iter" otherwise.  Residuals are reported in original units.
    """
    q = np.asarray(q, dtype=float).ravel()
    n = q.size
    h_mat = _as_csc(h_mat, (n, n))
    b = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    a_mat = _as_csc(a_eq, (b.size, n))
    h_vec = np.zeros(0) if h_ineq is None else np.asarray(h_ineq, dtype=float).ravel()
    g_mat = _as_csc(g_ineq, (h_vec.size, n))
    p, m = b.size, h_vec.size

    def objective(x):
        return float(0.5 * x @ (h_mat @ x) + q @ x)

    # -- no inequalities: one KKT solve ------------------------------------
    if m == 0:
        delta = 1e-11 * max(_col_max(h_mat).max(initial=0.0), 1.0)
        solve = _kkt_factor(h_mat, a_mat, g_mat, np.zeros(0), delta)
        x, y = solve(-q, b)
        rd = h_mat @ x + q + a_mat.T @ y
        rp = a_mat @ x - b
        scale_d = 1.0 + np.abs(q).max(initial=0.0)
        scale_p = 1.0 + np.abs(b).max(initial=0.0)
        ok = max(np.abs(rd).max(initial=0.0) / scale_d,
                 np.abs(rp).max(initial=0.0) / scale_p) < 1e3 * tol
        return QpResult(
            x=x, y=y, z=np.zeros(0), s=np.zeros(0),
            status="optimal" if ok else "infeasible",
            iterations=1, objective=objective(x),
            primal_residual=float(np.abs(rp).max(initial=0.0)),
            dual_residual=float(np.abs(rd).max(initial=0.0)),
            gap=0.0,
        )

    h_s, q_s, a_s, b_s, g_s, hv_s, d, d_eq, d_in, c_obj = _equilibrate(
        h_mat, q, a_mat, b, g_mat, h_vec
    )
    xs, ys, zs, ss, status, iterations = _ipm(
        h_s, q_s, a_s, b_s, g_s, hv_s, max_iter, tol
    )
    x = d * xs
    y = d_eq * ys / c_obj
    z = d_in * zs / c_obj
    s = np.where(d_in > 0, ss / d_in, ss)

    rd = h_mat @ x + q + a_mat.T @ y + g_mat.T @ z
    rp = a_mat @ x - b
    rg = g_mat @ x + s - h_vec
    result = QpResult(
        x=x, y=y, z=z, s=s, status=status, iterations=iterations,
        objective=objective(x),
        primal_residual=float(max(np.abs(rp).max(initial=0.0),
                                  np.abs(rg).max(initial=0.0))),
        dual_residual=float(np.abs(rd).max(initial=0.0)),
        gap=float(s @ z) / m,
    )
    if polish and status == "optimal":
        polished = _polish(
            (h_mat, q, a_mat, b, g_mat, h_vec),
            (h_s, q_s, a_s, b_s, g_s, hv_s),
            (d, d_eq, d_in, c_obj),
            zs, ss, result,
        )
        if polished is not None:
            return polished
    return result


def _refined_kkt_solve(h_mat, q, a_mat, b, g_mat, h_vec):
    """Solve the equality KKT [H Aᵀ Gᵀ; A 0 0; G 0 0]·(x,y,z) = (−q, b, h).

    Lightly regularized factorization plus iterative refinement against
    the exact system, measured row-relative: the matrix holds only model
    coefficients, while any extreme numbers live in the right-hand side,
    where each row only needs to cancel to its own precision.  Returns
    the best iterate with its row-relative error; the caller judges
    acceptability.
    """
    n, p, n_act = q.size, b.size, h_vec.size
    delta = 1e-11 * max(_col_max(h_mat).max(initial=0.0), 1.0)
    blocks = [[h_mat + delta * sp.eye(n),
               a_mat.T if p else None,
               g_mat.T if n_act else None],
              [a_mat if p else None,
               -delta * sp.eye(p) if p else None, None],
              [g_mat if n_act else None, None,
               -delta * sp.eye(n_act) if n_act else None]]
    rows = [row for row in blocks if any(blk is not None for blk in row)]
    reg = sp.bmat(rows, format="csc")
    true_blocks = [[h_mat, a_mat.T if p else None, g_mat.T if n_act else None],
                   [a_mat if p else None, None, None],
                   [g_mat if n_act else None, None, None]]
    true_rows = [row for row in true_blocks if any(blk is not None for blk in row)]
    true_kkt = sp.bmat(true_rows, format="csc")
    rhs = np.concatenate([-q, b, h_vec])
    norm = 1.0 + np.abs(rhs)
    lu = splu(reg)
    sol = lu.solve(rhs)
    best, best_err, prev_err = sol, np.inf, np.inf
    for _ in range(12):
        res = rhs - true_kkt @ sol
        err = float(np.abs(res / norm).max(initial=0.0))
        if err < best_err:
            best, best_err = sol.copy(), err
        if err < 1e-14 or err > 10.0 * prev_err:
            break
        prev_err = err
        sol = sol + lu.solve(res)
    return best[:n], best[n:n + p], best[n + p:], best_err


class _Validator:
    """Shared acceptance test for polished candidates.

    Candidate solves run on the equilibrated data — factorizations stay
    well conditioned there even when cost coefficients span fifteen
    orders of magnitude — and acceptance maps each candidate back to
    original units before judging it.  Residuals are taken per-row
    relative to the objective gradient: huge cost coefficients only need
    to cancel to their own precision, while ordinary rows — the ones
    whose duals carry physical prices — must be accurate in absolute
    terms.
    """

    def __init__(self, orig, scaled, unscale, ipm: QpResult):
        self.h, self.q, self.a, self.b, self.g, self.h_vec = orig
        self.hs, self.qs, self.as_, self.bs, self.gs, self.hvs = scaled
        self.d, self.d_eq, self.d_in, self.c_obj = unscale
        self.ipm = ipm
        self.g_csr = self.gs.tocsr()
        self.g_csr_o = self.g.tocsr()
        self.q_norm = 1.0 + np.abs(self.q)
        self.feas = 1e-9 * (1.0 + np.abs(self.h_vec).max(initial=0.0))
        self.eq_tol = max(1e-7, ipm.primal_residual)
        # zeroing a slightly negative multiplier perturbs each stationarity
        # row by |G_ji|·|z_j|; tolerate only a row-relatively tiny effect
        col_scaled = sp.csc_matrix(self.g @ sp.diags(1.0 / self.q_norm))
        self.drop = 1e-8 / np.maximum(_row_max(col_scaled), 1e-30)
        # working-space counterparts used while building candidates
        self.feas_s = 1e-9 * (1.0 + np.abs(self.hvs).max(initial=0.0))
        col_s = sp.csc_matrix(self.gs @ sp.diags(1.0 / (1.0 + np.abs(self.qs))))
        self.drop_s = 1e-8 / np.maximum(_row_max(col_s), 1e-30)

    def accept_scaled(self, xs, ys, zs_) -> Optional[QpResult]:
        x = self.d * xs
        y = self.d_eq * ys / self.c_obj
        z = self.d_in * zs_ / self.c_obj
        return self.accept(x, y, z)

    def accept(self, x, y, z) -> Optional[QpResult]:
        s = self.h_vec - self.g @ x
        z_clip = np.maximum(z, 0.0)
        rd = self.h @ x + self.q + self.a.T @ y + self.g.T @ z_clip
        rp = self.a @ x - self.b
        rel_dua = float(np.abs(rd / self.q_norm).max(initial=0.0))
        pri = float(np.abs(rp).max(initial=0.0))
        if (
            s.min(initial=0.0) < -self.feas
            or (z < -self.drop).any()
            or rel_dua > 1e-7
            or pri > self.eq_tol
        ):
            return None
        s_clip = np.maximum(s, 0.0)
        return QpResult(
            x=x, y=y, z=z_clip, s=s_clip, status="optimal",
            iterations=self.ipm.iterations,
            objective=float(0.5 * x @ (self.h @ x) + self.q @ x),
            primal_residual=pri,
            dual_residual=float(np.abs(rd).max(initial=0.0)),
            gap=float(np.abs(z_clip * s_clip).max(initial=0.0)),
            polished=True,
        )


def _polish_direct(val: _Validator, active) -> Optional[QpResult]:
    """One-shot active-set resolve; enough for small, nondegenerate problems."""
    active = active.copy()
    for _ in range(3):
        if int(active.sum()) + val.bs.size > val.qs.size:
            return None  # overdetermined: needs the pinned path
        try:
            x, y, z_act, _ = _refined_kkt_solve(
                val.hs, val.qs, val.as_, val.bs,
                val.g_csr[active].tocsc(), val.hvs[active],
            )
        except RuntimeError:
            return None
        z = np.zeros(val.hvs.size)
        z[active] = z_act
        out = val.accept_scaled(x, y, z)
        if out is not None:
            return out
        s = val.hvs - val.gs @ x
        wrong = active & (z < -val.drop_s)
        violated = (~active) & (s < -val.feas_s)
        if not wrong.any() and not violated.any():
            return None
        active &= ~wrong
        active |= violated
    return None


def _project_face(x0, c_mat, rhs):
    """Nearest point to ``x0`` on the affine set  c_mat·x = rhs.

    The face comes from constraints an interior-point iterate already
    satisfies to its tolerance, so the system is consistent, and
    redundant rows are harmless.  Deliberately ignores the objective:
    after cost scaling the Hessian can sit ten orders of magnitude below
    the constraints, where no factorization can see it, but the iterate
    being projected is already objective-optimal to solver precision.
    Returns the projected point and the row-relative system error.
    """
    n, k = x0.size, rhs.size
    if k == 0:
        return x0.copy(), 0.0
    delta = 1e-10
    reg = sp.bmat(
        [[sp.eye(n), c_mat.T], [c_mat, -delta * sp.eye(k)]], format="csc"
    )
    true_sys = sp.bmat([[sp.eye(n), c_mat.T], [c_mat, None]], format="csc")
    vec = np.concatenate([x0, rhs])
    norm = 1.0 + np.abs(vec)
    lu = splu(reg)
    sol = lu.solve(vec)
    best, best_err, prev_err = sol, np.inf, np.inf
    for _ in range(10):
        res = vec - true_sys @ sol
        err = float(np.abs(res / norm).max(initial=0.0))
        if err < best_err:
            best, best_err = sol.copy(), err
        if err < 1e-14 or err > 10.0 * prev_err:
            break
        prev_err = err
        sol = sol + lu.solve(res)
    return best[:n], best_err


def _stationarity_duals(d_mat, r, row_weights):
    """Weighted least-squares u with  d_matᵀ·u ≈ r.

    ``d_mat`` stacks active-constraint gradients (one row per
    constraint); the fit runs over the normal equations in whatever
    units the caller passes — for price-grade duals that should be the
    problem's original units, where a price-sized component is
    representable next to a cost-sized one.  Row weights let each
    stationarity equation converge relative to its own gradient
    magnitude, and the dual columns are equilibrated internally so that
    multipliers of wildly different natural size (bound duals absorbing
    huge costs beside price duals) coexist in one factorization.  The
    ridge term keeps rank-deficient fits well posed — shrinking dual
    supports cross between under- and overdetermined regimes, and the
    normal equations are the one formulation sound in both.
    """
    if d_mat.shape[0] == 0:
        return np.zeros(0)
    m0 = (d_mat @ sp.diags(row_weights)).T.tocsc()
    col_scale = 1.0 / np.maximum(_col_max(m0), 1e-30)
    m = (m0 @ sp.diags(col_scale)).tocsc()
    gram = (m.T @ m).tocsc()
    delta = 1e-12 * max(_col_max(gram).max(initial=0.0), 1.0)
    lu = splu((gram + delta * sp.eye(gram.shape[0])).tocsc())
    target = m.T @ (row_weights * r)
    norm = 1.0 + np.abs(target).max(initial=0.0)
    t = lu.solve(target)
    best, best_err, prev_err = t, np.inf, np.inf
    for _ in range(10):
        res = target - gram @ t
        err = float(np.abs(res).max(initial=0.0)) / norm
        if err < best_err:
            best, best_err = t.copy(), err
        if err < 1e-15 or err > 10.0 * prev_err:
            break
        prev_err = err
        t = t + lu.solve(res)
    return col_scale * best


def _sign_constrained_duals(d_mat, r, row_weights, n_free, tol=1e-8):
    """Duals with  d_matᵀ·u ≈ r  and the last components nonnegative.

    Least-squares fits pick one point out of a whole affine family of
    valid multipliers, and on heavily redundant active sets that point
    routinely has the wrong signs even though correctly signed members
    of the family exist.  Sign-feasibility is a linear feasibility
    problem, so pose it as one: each weighted stationarity row must
    close to within ``tol``, the first ``n_free`` components (equality
    duals) are unrestricted, the rest are nonnegative.  Returns None
    when no such point exists — the honest signal that the support
    cannot certify the candidate point.
    """
    m0 = (d_mat @ sp.diags(row_weights)).T.tocsc()
    col_scale = 1.0 / np.maximum(_col_max(m0), 1e-30)
    m = (m0 @ sp.diags(col_scale)).tocsc()
    rhs = row_weights * r
    n_dual = m.shape[1]
    a_ub = sp.vstack([m, -m]).tocsc()
    b_ub = np.concatenate([rhs + tol, tol - rhs])
    bounds = [(None, None)] * n_free + [(0.0, None)] * (n_dual - n_free)
    res = linprog(
        np.zeros(n_dual),
        A_ub=a_ub,
        b_ub=b_ub,
        bounds=bounds,
        method="highs",
        options={
            "primal_feasibility_tolerance": 1e-10,
            "dual_feasibility_tolerance": 1e-10,
        },
    )
    if not res.success:
        return None
    return col_scale * res.x


def _polish_projected(val: _Validator, zs, ss) -> Optional[QpResult]:
    """Active-set polish for large degenerate problems.

    Primal and dual are repaired separately, each in the space where it
    is well posed.  Primal: the equilibrated interior-point iterate is
    projected onto the candidate active face — conditioned by the
    constraints alone, untouched by the cost scaling — and variables
    held by active simple bounds are snapped to their exact bound value
    so extreme cost coefficients multiply exact zeros, not residue.
    Dual: multipliers for the active rows are fitted to the full
    stationarity system in original units, the only units where
    price-sized duals are resolvable beside cost-sized ones.  Rows with
    wrong-signed multipliers stay on the face — redundant active rows
    make the least-norm fit sign-agnostic, not the rows wrong — but
    their multipliers are forced to zero and the shrunken support is
    refitted.

    The dual support is retried at escalating slack cuts: interior-point
    convergence is judged in scaled units, so a constraint the optimum
    sits on can be left microscopically open in original units, and the
    stationarity fit is inconsistent until such rows are allowed to
    carry multipliers.  Widening the support leaves the primal point
    untouched — a near-closed row carrying a multiplier costs a little
    complementarity slop, which is reported, while stationarity and
    feasibility stay gated.  Every outcome still has to pass ``val``.
    """
    p, m = val.bs.size, val.hvs.size
    g_csr = val.g_csr
    row_nnz = np.diff(g_csr.indptr)
    is_bound = row_nnz == 1
    only = np.flatnonzero(is_bound)
    bound_var = np.full(m, -1)
    coef_orig = np.ones(m)
    bound_var[only] = g_csr.indices[g_csr.indptr[only]]
    coef_orig[only] = val.g_csr_o.data[val.g_csr_o.indptr[only]]

    active = zs > ss
    xs_ipm = val.ipm.x / val.d
    w_rows = 1.0 / val.q_norm
    x = None
    for _ in range(40):
        rows = np.flatnonzero(active)
        c_stack = sp.vstack([val.as_, g_csr[rows].tocsc()]).tocsc()
        rhs_c = np.concatenate([val.bs, val.hvs[rows]])
        try:
            x_s, proj_err = _project_face(xs_ipm, c_stack, rhs_c)
        except RuntimeError:
            return None
        if proj_err > 1e-9:
            return None  # face inconsistent: misclassified active set
        x = val.d * x_s
        act_b = rows[is_bound[rows]]
        x[bound_var[act_b]] = val.h_vec[act_b] / coef_orig[act_b]
        s_o = val.h_vec - val.g @ x
        viol = (~active) & (s_o < -val.feas)
        if not viol.any():
            break
        active = active | viol
    else:
        return None

    r_dual = -(val.h @ x + val.q)
    scale_h = 1.0 + np.abs(val.h_vec)
    for cut in (0.0, 1e-6, 1e-4, 1e-3):
        # Rows whose slack vanishes (or, in later rounds, nearly
        # vanishes) at the polished point are admissible multiplier
        # carriers even when the solver's z/s race misjudged them.
        support0 = np.flatnonzero(
            active | (s_o < np.maximum(cut * scale_h, val.feas))
        )
        support = support0
        for _ in range(30):
            d_stack = sp.vstack([val.a, val.g_csr_o[support]]).tocsc()
            try:
                u = _stationarity_duals(d_stack, r_dual, w_rows)
            except RuntimeError:
                return None
            y = u[:p]
            z_sup = u[p:]
            bad = z_sup < -val.drop[support]
            if not bad.any():
                z = np.zeros(m)
                z[support] = np.maximum(z_sup, 0.0)
                res = val.accept(x, y, z)
                if res is not None:
                    return res
                break
            support = support[~bad]
        # Shrinking can discard columns the certificate needs; pose the
        # sign-constrained fit exactly over the full support instead.
        d_stack = sp.vstack([val.a, val.g_csr_o[support0]]).tocsc()
        u = _sign_constrained_duals(d_stack, r_dual, w_rows, p)
        if u is not None:
            z = np.zeros(m)
            z[support0] = np.maximum(u[p:], 0.0)
            res = val.accept(x, u[:p], z)
            if res is not None:
                return res
    return None


def _polish(orig, scaled, unscale, zs, ss, ipm: QpResult) -> Optional[QpResult]:
    """Re-solve on the active set for machine-precision duals.

    ``zs``/``ss`` are the scaled multiplier/slack pairs from the interior
    point, whose relative sizes classify activity.  The direct resolve
    handles nondegenerate problems in one or two factorizations; the
    projected path handles degenerate ones.  Candidates must pass
    per-row relative KKT validation — the duals carry physical prices,
    so "close" is not good enough here.
    """
    val = _Validator(orig, scaled, unscale, ipm)
    out = _polish_direct(val, zs > ss)
    if out is not None:
        return out
    return _polish_projected(val, zs, ss)
