"""Strictly convex inequality-constrained QP via dual projected gradient ascent.

Problem::

    minimize    1/2 x^T W1 x + W2^T x
    subject to  E x <= F

With ``W1`` positive definite the Lagrangian dual is a concave quadratic in
the multipliers ``lam >= 0``::

    maximize  1/2 lam^T L1 lam + lam^T L2 - 1/2 W2^T W1^-1 W2
    L1 = -E W1^-1 E^T,   L2 = -F - E W1^-1 W2

and the primal point is recovered as ``x = -W1^-1 (W2 + E^T lam)``. Note
``L1 lam + L2 = E x - F``: the dual gradient is the constraint residual.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from . import textio

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is optional
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

CONVERGED = "converged"
ITERATION_CAP = "iteration_cap"
INFEASIBLE = "infeasible_detected"

STEP_CAP = 1e6
STEP_GUARD = 1e-12
POWER_ITERS = 50
QP_MAGIC = "elmpc-qp v1"


@dataclass
class QpProblem:
    W1: np.ndarray
    W2: np.ndarray
    E: np.ndarray
    F: np.ndarray

    def __post_init__(self):
        self.W1 = np.atleast_2d(np.asarray(self.W1, dtype=float))
        self.W2 = np.atleast_1d(np.asarray(self.W2, dtype=float))
        d = self.W2.size
        self.E = np.asarray(self.E, dtype=float).reshape(-1, d)
        self.F = np.asarray(self.F, dtype=float).reshape(-1)
        if self.W1.shape != (d, d):
            raise ValueError(f"W1 must be {(d, d)}, got {self.W1.shape}")
        if self.E.shape[0] != self.F.size:
            raise ValueError("E and F must have the same number of rows")
        if not np.allclose(self.W1, self.W1.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.W1).max())):
            raise ValueError("W1 must be symmetric")

    @property
    def d(self) -> int:
        return self.W2.size

    @property
    def q(self) -> int:
        return self.F.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.W1 @ x + self.W2 @ x)


@dataclass
class QpOptions:
    step: float | None = None       # None -> estimate_step
    max_iter: int = 1_000_000
    tol: float = 1e-8               # infinity norm of the projected dual gradient
    warm_start: np.ndarray | None = None
    check_every: int = 500          # cadence of polishing / infeasibility tests
    polish: bool = True

    def __post_init__(self):
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class QpSolution:
    x_star: np.ndarray
    lambda_L: np.ndarray
    iterations: int
    status: str
    kkt_residual: float
    kkt: dict = field(default_factory=dict)
    objective: float = float("nan")

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def _factor(W1):
    try:
        return linalg.cho_factor(W1, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        raise ValueError("W1 is not positive definite") from exc


def assemble_dual(p: QpProblem, factor=None) -> tuple[np.ndarray, np.ndarray]:
    """Dual Hessian ``L1`` (q x q, negative semidefinite) and linear term ``L2``."""
    if factor is None:
        factor = _factor(p.W1)
    if p.q == 0:
        return np.zeros((0, 0)), np.zeros(0)
    WiEt = linalg.cho_solve(factor, p.E.T)
    Wiw = linalg.cho_solve(factor, p.W2)
    L1 = -p.E @ WiEt
    L1 = 0.5 * (L1 + L1.T)
    L2 = -p.F - p.E @ Wiw
    return L1, L2


BLOCK = 6  # width of the iterated subspace


def estimate_step(L1) -> float:
    """Step ``1 / (sigma_max(-L1) + guard)``.

    ``sigma_max`` comes from ``POWER_ITERS`` steps of block power iteration on
    a fixed deterministic start block, followed by a Rayleigh-Ritz step. The
    block converges at the rate of the gap to the ``BLOCK + 1``-th
    eigenvalue, which keeps the estimate tight when the top eigenvalues
    cluster; a Ritz value never exceeds the true maximum.
    """
    M = -np.asarray(L1, dtype=float)
    q = M.shape[0]
    if q == 0 or not np.any(M):
        return STEP_CAP
    k = min(q, BLOCK)
    t = np.linspace(-1.0, 1.0, q)
    V = np.column_stack([np.ones(q) + 1e-3 * t] + [np.cos(np.pi * (j + 1) * (t + 1) / 2 + 0.1 * j)
                                                    for j in range(k - 1)])
    V, _ = np.linalg.qr(V)
    for _ in range(POWER_ITERS):
        W = M @ V
        if not np.any(W):
            break
        V, _ = np.linalg.qr(W)
    sigma = float(np.linalg.eigvalsh(V.T @ M @ V).max())
    if sigma <= 0.0:
        return STEP_CAP
    return min(1.0 / (sigma + STEP_GUARD), STEP_CAP)


def kkt_report(p: QpProblem, x, lam) -> dict:
    if p.q:
        slack = p.E @ x - p.F
        stat = p.W1 @ x + p.W2 + p.E.T @ lam
        primal = float(np.max(np.maximum(slack, 0.0)))
        dual = float(np.max(np.maximum(-lam, 0.0)))
        comp = float(np.max(np.abs(lam * slack)))
    else:
        stat = p.W1 @ x + p.W2
        primal = dual = comp = 0.0
    return {
        "stationarity": float(np.max(np.abs(stat))) if stat.size else 0.0,
        "primal": primal, "dual": dual, "complementarity": comp,
    }


def _finish(p, x, lam, iters, status):
    kkt = kkt_report(p, x, lam)
    return QpSolution(
        x_star=x, lambda_L=lam, iterations=iters, status=status,
        kkt_residual=max(kkt.values()), kkt=kkt, objective=p.objective(x),
    )


def is_feasible(E, F) -> bool:
    """Phase-1 LP feasibility check for ``E x <= F``."""
    E = np.asarray(E, dtype=float)
    if E.shape[0] == 0:
        return True
    res = optimize.linprog(
        np.zeros(E.shape[1]), A_ub=E, b_ub=F, bounds=[(None, None)] * E.shape[1], method="highs"
    )
    return res.status == 0


def _independent_rows(E, order, tol=1e-10):
    """Greedy subset of rows (visited in ``order``) that stays linearly independent."""
    keep = []
    basis = np.zeros((0, E.shape[1]))
    for i in order:
        trial = np.vstack([basis, E[i]])
        if np.linalg.matrix_rank(trial, tol=tol * max(1.0, np.abs(trial).max())) == trial.shape[0]:
            keep.append(i)
            basis = trial
            if len(keep) == E.shape[1]:
                break
    return keep


def _kkt_on(p: QpProblem, S):
    d, k = p.d, len(S)
    K = np.zeros((d + k, d + k))
    K[:d, :d] = p.W1
    K[:d, d:] = p.E[S].T
    K[d:, :d] = p.E[S]
    sol = np.linalg.solve(K, np.concatenate([-p.W2, p.F[S]]))
    return sol[:d], sol[d:]


def _polish(p: QpProblem, lam, x, feas_tol=1e-9):
    """Refine a dual iterate into an exact KKT point.

    Starts from the rows with positive multipliers (largest first, linearly
    independent subset), solves the equality-constrained KKT system, then for
    a bounded number of passes drops the most negative multiplier or adds the
    most violated row (swapping out the weakest row when the new one is
    linearly dependent on the working set). Returns ``(x, lam)`` only for a feasible point with
    nonnegative multipliers, which is then the unique optimum; else ``None``.
    """
    scale = 1.0 + np.abs(p.F)
    idx = np.flatnonzero(lam > 0)
    S = _independent_rows(p.E, idx[np.argsort(-lam[idx], kind="stable")])
    tried = set()
    for _ in range(2 * p.q + 2):
        tried.add(tuple(sorted(S)))
        try:
            xs, mu = _kkt_on(p, S)
        except np.linalg.LinAlgError:
            return None
        if mu.size and mu.min() < -feas_tol:
            S = [s for j, s in enumerate(S) if j != int(np.argmin(mu))]
            if tuple(sorted(S)) in tried:
                return None
            continue
        viol = (p.E @ xs - p.F) / scale
        viol[S] = -np.inf
        if viol.max() <= feas_tol:
            lam_s = np.zeros(p.q)
            lam_s[S] = np.maximum(mu, 0.0)
            return xs, lam_s
        nxt = None
        for row in np.argsort(-viol, kind="stable"):
            if viol[row] <= feas_tol:
                break
            if len(_independent_rows(p.E, S + [int(row)])) > len(S):
                cand = S + [int(row)]
            else:
                # dependent on the working rows: swap out the weakest multiplier
                cand = [s for j, s in enumerate(S) if j != int(np.argmin(mu))] + [int(row)]
            if tuple(sorted(cand)) not in tried:
                nxt = cand
                break
        if nxt is None:
            return None
        S = nxt
    return None


@njit(cache=True)
def _ascent(L1, L2, lam, step, tol, n_iter):
    """Run up to ``n_iter`` projected ascent steps in place.

    Returns ``(iterations_done, converged)``; non-finite iterates stop early
    with ``iterations_done = -k``.
    """
    q = lam.shape[0]
    nxt = np.empty(q)
    for it in range(1, n_iter + 1):
        g = L1 @ lam + L2
        res = 0.0
        for i in range(q):
            v = lam[i] + step * g[i]
            if v < 0.0:
                v = 0.0
            d = abs(v - lam[i])
            if d > res:
                res = d
            nxt[i] = v
        for i in range(q):
            lam[i] = nxt[i]
        if not np.isfinite(res):
            return -it, False
        if res / step <= tol:
            return it, True
    return n_iter, False


def dual_iterates(p: QpProblem, n_iter: int, step=None, lam0=None):
    """Plain projected ascent iterates (for inspection); yields ``lam`` after each step."""
    L1, L2 = assemble_dual(p)
    step = estimate_step(L1) if step is None else step
    lam = np.zeros(p.q) if lam0 is None else np.array(lam0, dtype=float)
    for _ in range(n_iter):
        lam = np.maximum(lam + step * (L1 @ lam + L2), 0.0)
        yield lam


def solve_fast(p: QpProblem, opts: QpOptions | None = None) -> QpSolution:
    """Projected gradient ascent on the dual, then primal recovery.

    Iterates ``lam <- max(lam + step (L1 lam + L2), 0)`` until the projected
    gradient ``(lam - lam_next) / step`` has infinity norm <= ``opts.tol``.

    With ``opts.polish`` the support of the current multipliers is used, every
    ``check_every`` iterations and once at exit, to solve the equality
    constrained KKT system; the result replaces the iterate only if it is
    feasible with nonnegative multipliers, which certifies it as the exact
    optimum.

    The first time a check point passes without convergence, a phase-1 LP
    tests whether ``E x <= F`` has any solution at all; if not, the solve
    stops with status ``infeasible_detected`` (the dual is then unbounded and
    the iteration could never terminate). Otherwise hitting ``max_iter``
    returns the last iterate with status ``iteration_cap``.
    """
    opts = opts or QpOptions()
    factor = _factor(p.W1)
    if p.q == 0:
        x = -linalg.cho_solve(factor, p.W2)
        return _finish(p, x, np.zeros(0), 1, CONVERGED)
    L1, L2 = assemble_dual(p, factor)
    L1 = np.ascontiguousarray(L1)
    step = opts.step if opts.step is not None else estimate_step(L1)
    lam = np.zeros(p.q) if opts.warm_start is None else np.maximum(
        np.array(opts.warm_start, dtype=float).reshape(p.q), 0.0
    )
    status = ITERATION_CAP
    feasibility_checked = False
    it = 0
    while it < opts.max_iter:
        done, conv = _ascent(L1, L2, lam, float(step), float(opts.tol),
                             min(opts.check_every, opts.max_iter - it))
        if done < 0:
            raise FloatingPointError(f"dual iterate became non-finite at iteration {it - done}")
        it += done
        if conv:
            status = CONVERGED
            break
        if opts.polish:
            x = -linalg.cho_solve(factor, p.W2 + p.E.T @ lam)
            polished = _polish(p, lam, x)
            if polished is not None:
                return _finish(p, *polished, it, CONVERGED)
        if not feasibility_checked:
            feasibility_checked = True
            if not is_feasible(p.E, p.F):
                status = INFEASIBLE
                break
    x = -linalg.cho_solve(factor, p.W2 + p.E.T @ lam)
    if opts.polish and status != INFEASIBLE:
        polished = _polish(p, lam, x)
        if polished is not None:
            return _finish(p, *polished, it, CONVERGED)
    if status == ITERATION_CAP and not feasibility_checked and not is_feasible(p.E, p.F):
        status = INFEASIBLE
    return _finish(p, x, lam, it, status)


def dual_objective(p: QpProblem, lam, L1=None, L2=None) -> float:
    if L1 is None:
        L1, L2 = assemble_dual(p)
    const = -0.5 * float(p.W2 @ np.linalg.solve(p.W1, p.W2))
    return float(0.5 * lam @ L1 @ lam + lam @ L2) + const


ORACLE_MAX_D = 6
ORACLE_MAX_Q = 12


def solve_oracle(p: QpProblem, feas_tol: float = 1e-9) -> QpSolution:
    """Exact solution by enumerating active sets (small problems only).

    Every subset ``S`` of at most ``d`` rows is tried: the equality-constrained
    KKT system is solved, and the candidate is kept if it is primal feasible
    and has nonnegative multipliers. Among survivors the lowest objective
    wins. Subsets with linearly dependent rows are skipped; an optimal
    multiplier with independent support always exists.
    """
    d, q = p.d, p.q
    if d > ORACLE_MAX_D or q > ORACLE_MAX_Q:
        raise ValueError(f"oracle limited to d <= {ORACLE_MAX_D}, q <= {ORACLE_MAX_Q}")
    _factor(p.W1)
    tol = feas_tol * (1.0 + np.abs(p.F))
    best = None
    n_checked = 0
    for k in range(min(d, q) + 1):
        for S in itertools.combinations(range(q), k):
            n_checked += 1
            S = list(S)
            Es = p.E[S]
            K = np.zeros((d + k, d + k))
            K[:d, :d] = p.W1
            K[:d, d:] = Es.T
            K[d:, :d] = Es
            rhs = np.concatenate([-p.W2, p.F[S]])
            if k and np.linalg.matrix_rank(Es) < k:
                continue
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x, mu = sol[:d], sol[d:]
            if np.any(p.E @ x - p.F > tol) or np.any(mu < -feas_tol):
                continue
            obj = p.objective(x)
            if best is None or obj < best[0]:
                lam = np.zeros(q)
                lam[S] = np.maximum(mu, 0.0)
                best = (obj, x, lam)
    if best is None:
        return QpSolution(
            x_star=np.full(d, np.nan), lambda_L=np.zeros(q), iterations=n_checked,
            status=INFEASIBLE, kkt_residual=np.inf,
        )
    _, x, lam = best
    return _finish(p, x, lam, n_checked, CONVERGED)


def dump(p: QpProblem, path) -> None:
    textio.write_blocks(path, QP_MAGIC, {"d": p.d, "q": p.q},
                        {"W1": p.W1, "W2": p.W2, "E": p.E.reshape(p.q, p.d), "F": p.F})


def load(path) -> QpProblem:
    s, a = textio.read_blocks(path, QP_MAGIC)
    E = a["E"] if s["q"] else np.zeros((0, s["d"]))
    return QpProblem(W1=a["W1"], W2=a["W2"], E=E, F=a["F"])
