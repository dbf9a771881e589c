"""Extreme learning machine regression with normalized inputs and outputs.

A model maps an input vector ``x`` (physical units) to an output vector::

    xn  = 2 (x - x_min) / (x_max - x_min) - 1
    phi = sigmoid(Wr^T xn + br)
    z   = z_min + (z_max - z_min) / 2 * (1 + W^T phi)

``Wr`` and ``br`` are drawn once from a seeded uniform distribution on
[-1, 1] and never trained. ``W`` is the ridge-regression solution on the
hidden-layer outputs. Batch arrays are row-major: the hidden matrix ``H`` has
one sample per row (N x n_h) and targets ``Y`` are N x d_out.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import textio

MODEL_MAGIC = "elmpc-model v1"


class NotTrainedError(RuntimeError):
    """Raised when a prediction is requested from a model without output weights."""


class SingularSystemError(np.linalg.LinAlgError):
    """Raised when the unregularized normal equations are singular."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator used for every random draw in the package (numpy PCG64)."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class ElmModel:
    Wr: np.ndarray
    br: np.ndarray
    W: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray
    z_min: np.ndarray
    z_max: np.ndarray
    seed: int
    trained: bool = False
    lam: float = 0.0
    activation: str = field(default="sigmoid")

    def __post_init__(self):
        d_in, n_h = self.Wr.shape
        if self.br.shape != (n_h,) or self.W.shape[0] != n_h:
            raise ValueError(
                f"inconsistent shapes: Wr {self.Wr.shape}, br {self.br.shape}, W {self.W.shape}"
            )
        if self.x_min.shape != (d_in,) or self.x_max.shape != (d_in,):
            raise ValueError("input bounds must have length d_in")
        if self.z_min.shape != (self.d_out,) or self.z_max.shape != (self.d_out,):
            raise ValueError("output bounds must have length d_out")
        _check_bounds(self.x_min, self.x_max, "x")
        _check_bounds(self.z_min, self.z_max, "z")
        if self.activation != "sigmoid":
            raise ValueError("only the sigmoid activation is supported")
        for name in ("Wr", "br", "W"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")
        for name in ("Wr", "br", "W", "x_min", "x_max", "z_min", "z_max"):
            getattr(self, name).setflags(write=False)

    @property
    def d_in(self) -> int:
        return self.Wr.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.shape[1]

    @property
    def n_h(self) -> int:
        return self.Wr.shape[1]

    @property
    def n_params(self) -> int:
        """Count of learned/random weights: Wr, br and W (normalization bounds excluded)."""
        return self.Wr.size + self.br.size + self.W.size

    def with_weights(self, W: np.ndarray, lam: float | None = None) -> "ElmModel":
        W = np.array(W, dtype=float)
        if W.shape != (self.n_h, self.d_out):
            raise ValueError(f"W must be {(self.n_h, self.d_out)}, got {W.shape}")
        return dataclasses.replace(
            self, W=W, trained=True, lam=self.lam if lam is None else float(lam)
        )


def _check_bounds(lo, hi, label):
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError(f"{label} bounds must be finite")
    if np.any(hi <= lo):
        raise ValueError(f"degenerate {label} bounds: max must exceed min in every coordinate")


def init_elm(d_in: int, d_out: int, n_h: int, seed: int, x_bounds, z_bounds) -> ElmModel:
    """Draw the random input layer and return an untrained model.

    ``x_bounds`` and ``z_bounds`` are ``(lo, hi)`` pairs of vectors (scalars
    broadcast). ``Wr`` is drawn first (d_in x n_h, row-major), then ``br``.
    """
    if min(d_in, d_out, n_h) < 1:
        raise ValueError("d_in, d_out and n_h must be positive")
    x_lo, x_hi = (np.broadcast_to(np.asarray(b, dtype=float), (d_in,)).copy() for b in x_bounds)
    z_lo, z_hi = (np.broadcast_to(np.asarray(b, dtype=float), (d_out,)).copy() for b in z_bounds)
    rng = make_rng(seed)
    Wr = rng.uniform(-1.0, 1.0, size=(d_in, n_h))
    br = rng.uniform(-1.0, 1.0, size=n_h)
    return ElmModel(
        Wr=Wr, br=br, W=np.zeros((n_h, d_out)),
        x_min=x_lo, x_max=x_hi, z_min=z_lo, z_max=z_hi, seed=int(seed),
    )


def normalize(x, lo, hi) -> np.ndarray:
    """Affine map of ``[lo, hi]`` onto ``[-1, 1]`` (no clipping)."""
    x = np.asarray(x, dtype=float)
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def denormalize(xn, lo, hi) -> np.ndarray:
    xn = np.asarray(xn, dtype=float)
    return lo + (hi - lo) / 2.0 * (1.0 + xn)


def out_of_bounds(x, lo, hi) -> int:
    """Number of coordinates of ``x`` lying outside ``[lo, hi]`` (extrapolation count)."""
    x = np.asarray(x, dtype=float)
    return int(np.count_nonzero((x < lo) | (x > hi)))


def sigmoid(a):
    # split form avoids overflow in exp for large |a|
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def hidden(model: ElmModel, x) -> np.ndarray:
    """Hidden-layer activations for one input (d_in,) or a batch (N, d_in)."""
    xn = normalize(x, model.x_min, model.x_max)
    if xn.shape[-1] != model.d_in:
        raise ValueError(f"expected {model.d_in} input features, got {xn.shape[-1]}")
    return sigmoid(xn @ model.Wr + model.br)


def train_ridge(H, Y, lam: float) -> np.ndarray:
    """Solve ``(H^T H + lam I) W = H^T Y`` by Cholesky factorization.

    Parameters
    ----------
    H : ndarray of shape (N, n_h)
        Hidden-layer output matrix, one sample per row.
    Y : ndarray of shape (N, d_out) or (N,)
        Targets.
    lam : float
        Nonnegative regularization coefficient. ``lam == 0`` is accepted but
        raises :class:`SingularSystemError` when ``H^T H`` is singular
        instead of silently falling back to a pseudo-inverse.

    Returns
    -------
    W : ndarray of shape (n_h, d_out)
    """
    H = np.asarray(H, dtype=float)
    Y = np.asarray(Y, dtype=float)
    squeeze = Y.ndim == 1
    if squeeze:
        Y = Y[:, None]
    if H.ndim != 2 or H.shape[0] != Y.shape[0]:
        raise ValueError(f"H {H.shape} and Y {Y.shape} must have the same number of rows")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(Y))):
        raise ValueError("H and Y must be finite")
    G = H.T @ H
    G[np.diag_indices_from(G)] += lam
    rhs = H.T @ Y
    try:
        factor = linalg.cho_factor(G, lower=False, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularSystemError(f"normal equations are not positive definite (lam={lam})") from exc
    if lam == 0:
        # cho_factor can succeed on numerically singular Gram matrices
        rcond = np.min(np.abs(np.diag(factor[0]))) ** 2 / np.max(np.abs(np.diag(G)))
        if rcond < 1e3 * np.finfo(float).eps:
            raise SingularSystemError("normal equations are numerically singular at lam=0")
    W = linalg.cho_solve(factor, rhs, check_finite=False)
    return W[:, 0] if squeeze else W


def ridge_objective(H, Y, W, lam: float) -> float:
    R = H @ W - Y
    return float(np.sum(R * R) + lam * np.sum(W * W))


def fit(X, Y, n_h: int, lam: float, seed: int, x_bounds=None, z_bounds=None) -> ElmModel:
    """Build and train a model on row-major data.

    Normalization bounds default to the per-column min/max of ``X`` and ``Y``
    and are frozen into the returned model.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if x_bounds is None:
        x_bounds = data_bounds(X)
    if z_bounds is None:
        z_bounds = data_bounds(Y)
    model = init_elm(X.shape[1], Y.shape[1], n_h, seed, x_bounds, z_bounds)
    H = hidden(model, X)
    Yn = normalize(Y, model.z_min, model.z_max)
    return model.with_weights(train_ridge(H, Yn, lam), lam=lam)


def data_bounds(A) -> tuple[np.ndarray, np.ndarray]:
    """Column min/max, widened where a column is constant so bounds stay ordered."""
    A = np.asarray(A, dtype=float)
    lo, hi = A.min(axis=0), A.max(axis=0)
    flat = hi <= lo
    lo = np.where(flat, lo - 0.5, lo)
    hi = np.where(flat, hi + 0.5, hi)
    return lo, hi


def _require_trained(model: ElmModel):
    if not model.trained:
        raise NotTrainedError("model has no trained output weights")


def predict(model: ElmModel, x) -> np.ndarray:
    """Output in physical units for one input (d_in,) or a batch (N, d_in)."""
    _require_trained(model)
    out = hidden(model, x) @ model.W
    return denormalize(out, model.z_min, model.z_max)


def jacobian(model: ElmModel, x) -> np.ndarray:
    """Analytical d(output)/d(input) at a single point, shape (d_out, d_in).

    Uses sigmoid' = phi (1 - phi) and the chain factors of both affine
    normalizations; no finite differencing.
    """
    _require_trained(model)
    x = np.asarray(x, dtype=float)
    if x.shape != (model.d_in,):
        raise ValueError(f"jacobian expects a single input of length {model.d_in}")
    phi = hidden(model, x)
    dphi = (phi * (1.0 - phi))[:, None] * model.Wr.T * (2.0 / (model.x_max - model.x_min))
    return ((model.z_max - model.z_min) / 2.0)[:, None] * (model.W.T @ dphi)


def split_ab(J, n: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Split a Jacobian taken w.r.t. ``x = [u, z]`` into ``(A, B)``.

    ``B`` is the first ``m`` columns (input sensitivities) and ``A`` the last
    ``n`` (state sensitivities).
    """
    J = np.asarray(J, dtype=float)
    if J.ndim != 2 or J.shape != (n, n + m):
        raise ValueError(f"expected J of shape {(n, n + m)}, got {J.shape}")
    return J[:, m:].copy(), J[:, :m].copy()


def save(model: ElmModel, path) -> None:
    scalars = {
        "seed": model.seed, "d_in": model.d_in, "d_out": model.d_out, "n_h": model.n_h,
        "lam": float(model.lam), "trained": bool(model.trained), "activation": model.activation,
    }
    arrays = {
        "Wr": model.Wr, "br": model.br, "W": model.W,
        "x_min": model.x_min, "x_max": model.x_max, "z_min": model.z_min, "z_max": model.z_max,
    }
    textio.write_blocks(path, MODEL_MAGIC, scalars, arrays)


def load(path) -> ElmModel:
    s, a = textio.read_blocks(path, MODEL_MAGIC)
    model = ElmModel(
        Wr=a["Wr"], br=a["br"], W=a["W"].reshape(s["n_h"], s["d_out"]),
        x_min=a["x_min"], x_max=a["x_max"], z_min=a["z_min"], z_max=a["z_max"],
        seed=int(s["seed"]), trained=bool(s["trained"]), lam=float(s["lam"]),
        activation=str(s["activation"]),
    )
    if model.d_in != s["d_in"] or model.n_h != s["n_h"]:
        raise ValueError(f"{path}: header dimensions disagree with stored arrays")
    return model
