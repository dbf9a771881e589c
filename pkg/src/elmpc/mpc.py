"""Successive-linearization MPC on an ELM state-transition model.

The model maps ``x = [u, z]`` to ``z(k+1)``. Every cycle it is linearized at
the measured state and the previously applied input::

    z(k+1) = A z(k) + B u(k) + d1
    y(k)   = C z(k) + d2

and the horizon predictions are condensed into::

    Y = Z z + U dU + V u(k-1) + D1 d1 + D2 d2

which turns tracking plus move suppression into a QP in the stacked input
increments ``dU`` solved by :func:`elmpc.qp.solve_fast`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import elm, qp
from .elm import ElmModel

# QP row blocks in stacking order
BLOCKS = ("du_max", "du_min", "u_max", "u_min", "y_max", "y_min", "x_max", "x_min")

HCCI_U_MIN = [19.0, -121.0, 272.0]
HCCI_U_MAX = [25.0, -100.0, 375.0]
HCCI_DU_MIN = [-6.0, -22.0, -103.0]
HCCI_DU_MAX = [6.0, 22.0, 103.0]
HCCI_Y_MIN = [2.1, -14.0]
HCCI_Y_MAX = [3.55, -2.0]
HCCI_Q1_DIAG = [500.0, 1.0] * 3
HCCI_Q2_DIAG = [20.0, 1.0, 1.0] * 3


@dataclass(frozen=True)
class LinearizedSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    z0: np.ndarray
    u0: np.ndarray

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def p(self):
        return self.C.shape[0]


def selector(n: int, idx) -> np.ndarray:
    """Constant output map picking state coordinates ``idx``."""
    C = np.zeros((len(idx), n))
    C[np.arange(len(idx)), list(idx)] = 1.0
    return C


def _vec(v, size, name):
    out = np.broadcast_to(np.asarray(v, dtype=float), (size,)).copy()
    return out


@dataclass
class MpcConfig:
    """Horizons, weights and bounds for the tracking controller.

    ``Q1`` is ``(N_y p) x (N_y p)`` and ``Q2`` is ``(N_u m) x (N_u m)``. Bounds
    may be infinite, in which case the matching QP rows are omitted.
    ``x_min``/``x_max`` are optional per-state bounds on the predicted states
    (``None`` disables the state block).
    """

    N_y: int
    N_u: int
    Q1: np.ndarray
    Q2: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    du_min: np.ndarray
    du_max: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray
    x_min: np.ndarray | None = None
    x_max: np.ndarray | None = None
    output_idx: tuple = (0, 1)
    qp_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.N_y < 1 or not 1 <= self.N_u <= self.N_y:
            raise ValueError("need N_y >= 1 and 1 <= N_u <= N_y")
        self.output_idx = tuple(int(i) for i in self.output_idx)
        m = np.size(self.u_min)
        p = len(self.output_idx)
        self.Q1 = np.atleast_2d(np.asarray(self.Q1, dtype=float))
        self.Q2 = np.atleast_2d(np.asarray(self.Q2, dtype=float))
        if self.Q1.shape != (self.N_y * p, self.N_y * p):
            raise ValueError(f"Q1 must be {(self.N_y * p,) * 2}, got {self.Q1.shape}")
        if self.Q2.shape != (self.N_u * m, self.N_u * m):
            raise ValueError(f"Q2 must be {(self.N_u * m,) * 2}, got {self.Q2.shape}")
        if np.linalg.eigvalsh(0.5 * (self.Q1 + self.Q1.T)).min() < -1e-12:
            raise ValueError("Q1 must be positive semidefinite")
        if np.linalg.eigvalsh(0.5 * (self.Q2 + self.Q2.T)).min() <= 0:
            raise ValueError("Q2 must be positive definite")
        for lo, hi, size in (("u_min", "u_max", m), ("du_min", "du_max", m), ("y_min", "y_max", p)):
            setattr(self, lo, _vec(getattr(self, lo), size, lo))
            setattr(self, hi, _vec(getattr(self, hi), size, hi))
            if np.any(getattr(self, hi) < getattr(self, lo)):
                raise ValueError(f"{lo} must not exceed {hi}")
        if np.any(self.du_min > 0) or np.any(self.du_max < 0):
            raise ValueError("input increment bounds must contain zero")
        if (self.x_min is None) != (self.x_max is None):
            raise ValueError("give both x_min and x_max (use +/-inf for one-sided bounds)")
        if self.x_min is not None:
            self.x_min = np.asarray(self.x_min, dtype=float)
            self.x_max = np.asarray(self.x_max, dtype=float)
            if self.x_min.shape != self.x_max.shape or np.any(self.x_max < self.x_min):
                raise ValueError("state bounds must be ordered and of equal length")

    @property
    def m(self) -> int:
        return self.u_min.size

    @property
    def p(self) -> int:
        return len(self.output_idx)

    @classmethod
    def hcci(cls, rmax_bound: float | None = None, n_states: int = 6, **kw):
        """Horizons, gains and bounds of the HCCI study (optionally with the R_max cap)."""
        x_min = x_max = None
        if rmax_bound is not None:
            x_min = np.full(n_states, -np.inf)
            x_max = np.full(n_states, np.inf)
            x_max[3] = rmax_bound
        return cls(
            N_y=3, N_u=3, Q1=np.diag(HCCI_Q1_DIAG), Q2=np.diag(HCCI_Q2_DIAG),
            u_min=HCCI_U_MIN, u_max=HCCI_U_MAX, du_min=HCCI_DU_MIN, du_max=HCCI_DU_MAX,
            y_min=HCCI_Y_MIN, y_max=HCCI_Y_MAX, x_min=x_min, x_max=x_max, **kw,
        )


@dataclass(frozen=True)
class PredictionMatrices:
    Z: np.ndarray
    U: np.ndarray
    V: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    H: np.ndarray

    def free_response(self, z, u_prev, d1, d2) -> np.ndarray:
        """Predicted outputs with ``dU = 0``."""
        return self.Z @ z + self.V @ u_prev + self.D1 @ d1 + self.D2 @ d2


@dataclass
class MpcQp:
    W1: np.ndarray
    W2: np.ndarray
    E: np.ndarray
    F: np.ndarray
    blocks: list  # (name, start, stop) row ranges in E/F
    meta: dict = field(default_factory=dict)

    def problem(self, drop=()) -> qp.QpProblem:
        keep = np.ones(self.F.size, dtype=bool)
        for name, a, b in self.blocks:
            if name in drop:
                keep[a:b] = False
        return qp.QpProblem(self.W1, self.W2, self.E[keep], self.F[keep])

    def objective(self, dU) -> float:
        return float(0.5 * dU @ self.W1 @ dU + self.W2 @ dU)


def linearize(model: ElmModel, z0, u0, output_idx=(0, 1)) -> LinearizedSystem:
    """First-order expansion of the model at ``(z0, u0)``.

    ``d1`` absorbs the offset so the linear model reproduces the model output
    exactly at the expansion point. ``C`` selects ``output_idx`` and ``d2 = 0``.
    """
    z0 = np.asarray(z0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    n, m = z0.size, u0.size
    if model.d_in != n + m or model.d_out != n:
        raise ValueError(
            f"model maps {model.d_in} -> {model.d_out}; expected {n + m} -> {n} for x = [u, z]"
        )
    x0 = np.concatenate([u0, z0])
    A, B = elm.split_ab(elm.jacobian(model, x0), n, m)
    d1 = elm.predict(model, x0) - A @ z0 - B @ u0
    C = selector(n, output_idx)
    return LinearizedSystem(A=A, B=B, C=C, d1=d1, d2=np.zeros(C.shape[0]), z0=z0, u0=u0)


def build_prediction(lin: LinearizedSystem, N_y: int, N_u: int) -> PredictionMatrices:
    """Condensed horizon matrices.

    Row block ``i`` (1-based) of each matrix describes ``y(k+i|k)``:
    ``Z_i = C A^i``, ``V_i = C sum_{t<i} A^t B``, ``D1_i = C sum_{t<i} A^t``,
    ``D2_i = I`` and ``U_ij = C sum_{t<=i-j} A^t B`` for ``j <= min(i, N_u)``.
    """
    if N_y < 1 or not 1 <= N_u <= N_y:
        raise ValueError("need N_y >= 1 and 1 <= N_u <= N_y")
    A, B, C = lin.A, lin.B, lin.C
    n, m, p = lin.n, lin.m, lin.p
    # S[t] = sum_{s<=t} A^s ; P[t] = A^t
    P = [np.eye(n)]
    S = [np.eye(n)]
    for _ in range(N_y):
        P.append(P[-1] @ A)
        S.append(S[-1] + P[-1])
    Z = np.vstack([C @ P[i] for i in range(1, N_y + 1)])
    V = np.vstack([C @ S[i - 1] @ B for i in range(1, N_y + 1)])
    D1 = np.vstack([C @ S[i - 1] for i in range(1, N_y + 1)])
    D2 = np.vstack([np.eye(p)] * N_y)
    U = np.zeros((N_y * p, N_u * m))
    for i in range(1, N_y + 1):
        for j in range(1, min(i, N_u) + 1):
            U[(i - 1) * p: i * p, (j - 1) * m: j * m] = C @ S[i - j] @ B
    H = np.kron(np.tril(np.ones((N_u, N_u))), np.eye(m))
    return PredictionMatrices(Z=Z, U=U, V=V, D1=D1, D2=D2, H=H)


def state_system(lin: LinearizedSystem) -> LinearizedSystem:
    """Same dynamics with the full state as output (for state constraints)."""
    return LinearizedSystem(A=lin.A, B=lin.B, C=np.eye(lin.n), d1=lin.d1,
                            d2=np.zeros(lin.n), z0=lin.z0, u0=lin.u0)


def build_qp(lin: LinearizedSystem, pred: PredictionMatrices, R, z, u_prev,
             cfg: MpcConfig, state_pred: PredictionMatrices | None = None) -> MpcQp:
    """Assemble ``W1, W2, E, F`` for the tracking QP.

    Rows are stacked as ``[du upper, du lower, u upper, u lower, y upper,
    y lower, x upper, x lower]``; rows whose bound is infinite are left out.
    The state block needs ``state_pred`` (from :func:`state_system`) and only
    covers states with a finite bound.
    """
    R = np.asarray(R, dtype=float).ravel()
    z = np.asarray(z, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    N_y, N_u, m = cfg.N_y, cfg.N_u, cfg.m
    if R.size != N_y * lin.p:
        raise ValueError(f"reference stack must have length {N_y * lin.p}, got {R.size}")
    U = pred.U
    free = pred.free_response(z, u_prev, lin.d1, lin.d2)
    W1 = 2.0 * (U.T @ cfg.Q1 @ U + cfg.Q2)
    W1 = 0.5 * (W1 + W1.T)
    W2 = -2.0 * U.T @ cfg.Q1 @ (R - free)

    I = np.eye(N_u * m)
    u_rep = np.tile(u_prev, N_u)
    rows = [
        ("du_max", I, np.tile(cfg.du_max, N_u)),
        ("du_min", -I, -np.tile(cfg.du_min, N_u)),
        ("u_max", pred.H, np.tile(cfg.u_max, N_u) - u_rep),
        ("u_min", -pred.H, -(np.tile(cfg.u_min, N_u) - u_rep)),
        ("y_max", U, np.tile(cfg.y_max, N_y) - free),
        ("y_min", -U, -(np.tile(cfg.y_min, N_y) - free)),
    ]
    if cfg.x_max is not None:
        if state_pred is None:
            raise ValueError("state bounds configured but no state prediction matrices given")
        sfree = state_pred.free_response(z, u_prev, lin.d1, np.zeros(lin.n))
        rows.append(("x_max", state_pred.U, np.tile(cfg.x_max, N_y) - sfree))
        rows.append(("x_min", -state_pred.U, -(np.tile(cfg.x_min, N_y) - sfree)))
    E_parts, F_parts, blocks = [], [], []
    start = 0
    for name, Eb, Fb in rows:
        keep = np.isfinite(Fb)
        E_parts.append(Eb[keep])
        F_parts.append(Fb[keep])
        blocks.append((name, start, start + int(keep.sum())))
        start += int(keep.sum())
    E = np.vstack(E_parts)
    F = np.concatenate(F_parts)
    meta = {"N_y": N_y, "N_u": N_u, "z0": lin.z0.copy(), "u0": lin.u0.copy()}
    return MpcQp(W1=W1, W2=W2, E=E, F=F, blocks=blocks, meta=meta)


@dataclass
class StepResult:
    u: np.ndarray
    dU: np.ndarray
    status: str
    iterations: int
    fallback: int            # 0 none, 1 soft rows dropped, 2 dU forced to zero
    active: dict             # block name -> number of active rows
    kkt_residual: float
    cond_W1: float
    extrapolated: int
    clamped: bool
    lam: np.ndarray | None = None

    def active_mask(self) -> str:
        return "".join("1" if self.active.get(b, 0) else "0" for b in BLOCKS)


SOFT_BLOCKS = ("y_max", "y_min", "x_max", "x_min")


def _count_active(mqp: MpcQp, prob_blocks, sol, tol=1e-7) -> dict:
    slack = mqp.E @ sol.x_star - mqp.F if mqp.F.size else np.zeros(0)
    out = {}
    for name, a, b in prob_blocks:
        out[name] = int(np.count_nonzero(slack[a:b] > -tol * (1.0 + np.abs(mqp.F[a:b]))))
    return out


def mpc_step(model: ElmModel, cfg: MpcConfig, z_meas, u_prev, R, warm_start=None) -> StepResult:
    """One receding-horizon update; returns the input to apply now.

    Fallback policy: if the QP does not converge, it is re-solved without the
    output/state rows; if that also fails the increment is set to zero.
    Input and increment limits are enforced on the applied move in every case.
    """
    z_meas = np.asarray(z_meas, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    if not np.all(np.isfinite(z_meas)):
        raise FloatingPointError("non-finite state measurement")
    lin = linearize(model, z_meas, u_prev, cfg.output_idx)
    pred = build_prediction(lin, cfg.N_y, cfg.N_u)
    spred = build_prediction(state_system(lin), cfg.N_y, cfg.N_u) if cfg.x_max is not None else None
    mqp = build_qp(lin, pred, R, z_meas, u_prev, cfg, spred)
    opts = dict(cfg.qp_options)
    if warm_start is not None and np.size(warm_start) == mqp.F.size:
        opts["warm_start"] = warm_start
    sol = qp.solve_fast(mqp.problem(), qp.QpOptions(**opts))
    fallback = 0
    active_blocks = mqp.blocks
    lam = sol.lambda_L
    if not sol.converged:
        fallback = 1
        opts.pop("warm_start", None)
        sol = qp.solve_fast(mqp.problem(drop=SOFT_BLOCKS), qp.QpOptions(**opts))
        active_blocks = [b for b in mqp.blocks if b[0] not in SOFT_BLOCKS]
        lam = None
        if not sol.converged:
            fallback = 2
    if fallback == 2:
        dU = np.zeros(cfg.N_u * cfg.m)
        active = {}
    else:
        dU = sol.x_star
        active = _count_active(mqp, mqp.blocks, sol) if fallback == 0 else {
            k: v for k, v in _count_active(mqp, mqp.blocks, sol).items() if k not in SOFT_BLOCKS
        }
    du = np.clip(dU[: cfg.m], cfg.du_min, cfg.du_max)
    u = np.clip(u_prev + du, cfg.u_min, cfg.u_max)
    clamped = bool(np.any(np.abs(u - (u_prev + dU[: cfg.m])) > 1e-9))
    x0 = np.concatenate([u_prev, z_meas])
    return StepResult(
        u=u, dU=dU, status=sol.status, iterations=sol.iterations, fallback=fallback,
        active=active, kkt_residual=sol.kkt_residual, cond_W1=float(np.linalg.cond(mqp.W1)),
        extrapolated=elm.out_of_bounds(x0, model.x_min, model.x_max), clamped=clamped, lam=lam,
    )


class MpcController:
    """Stateful wrapper carrying the dual warm start between cycles."""

    def __init__(self, model: ElmModel, cfg: MpcConfig, warm_start: bool = True):
        self.model = model
        self.cfg = cfg
        self.warm_start = warm_start
        self._lam = None

    def reset(self):
        self._lam = None

    def step(self, z_meas, u_prev, R) -> StepResult:
        res = mpc_step(self.model, self.cfg, z_meas, u_prev, R,
                       warm_start=self._lam if self.warm_start else None)
        self._lam = res.lam
        return res


def reference_stack(ref, k: int, N_y: int) -> np.ndarray:
    """``[r(k+1) .. r(k+N_y)]`` from a reference table, holding the last row past its end."""
    ref = np.asarray(ref, dtype=float)
    idx = np.minimum(np.arange(k + 1, k + N_y + 1), ref.shape[0] - 1)
    return ref[idx].ravel()
