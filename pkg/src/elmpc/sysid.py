"""NARX framing, A-PRBS excitation, prediction evaluation and model selection."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import elm
from .elm import ElmModel


@dataclass(frozen=True)
class NarxConfig:
    n_u: int
    n_y: int
    u_d: int
    y_d: int

    def __post_init__(self):
        if self.n_u < 1 or self.n_y < 1:
            raise ValueError("lag orders must be >= 1")
        if self.u_d < 1 or self.y_d < 1:
            raise ValueError("channel dimensions must be >= 1")

    @property
    def n_features(self) -> int:
        return self.u_d * self.n_u + self.y_d * self.n_y

    @property
    def offset(self) -> int:
        return max(self.n_u, self.n_y)


@dataclass(frozen=True)
class NarxDataset:
    X: np.ndarray
    Y: np.ndarray
    origin: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError("X and Y must have the same number of rows")

    def __len__(self):
        return self.X.shape[0]


def narx_features(u_hist, y_hist, cfg: NarxConfig) -> np.ndarray:
    """Feature row ``[u(k-1)..u(k-n_u), y(k-1)..y(k-n_y)]``.

    ``u_hist`` and ``y_hist`` are chronological (last row is the most recent
    sample) and must hold at least ``n_u`` / ``n_y`` rows.
    """
    u_hist = np.asarray(u_hist, dtype=float).reshape(-1, cfg.u_d)
    y_hist = np.asarray(y_hist, dtype=float).reshape(-1, cfg.y_d)
    u_part = u_hist[::-1][: cfg.n_u].ravel()
    y_part = y_hist[::-1][: cfg.n_y].ravel()
    return np.concatenate([u_part, y_part])


def build_narx(u_seq, y_seq, cfg: NarxConfig, source: str = "") -> NarxDataset:
    """Frame equal-length input/output sequences into (x, y) pairs.

    Row ``i`` targets ``y(k)`` with ``k = i + max(n_u, n_y)``.
    """
    u = np.asarray(u_seq, dtype=float).reshape(len(u_seq), -1)
    y = np.asarray(y_seq, dtype=float).reshape(len(y_seq), -1)
    if u.shape[0] != y.shape[0]:
        raise ValueError("input and output sequences must have equal length")
    if u.shape[1] != cfg.u_d or y.shape[1] != cfg.y_d:
        raise ValueError(f"expected {cfg.u_d} input and {cfg.y_d} output channels")
    T, off = u.shape[0], cfg.offset
    if T <= off:
        raise ValueError(f"sequence length {T} too short for lag order {off}")
    cols = [u[off - lag: T - lag] for lag in range(1, cfg.n_u + 1)]
    cols += [y[off - lag: T - lag] for lag in range(1, cfg.n_y + 1)]
    X = np.hstack(cols)
    origin = {"source": source, "offset": off, "n_u": cfg.n_u, "n_y": cfg.n_y, "length": T}
    return NarxDataset(X=X, Y=y[off:].copy(), origin=origin)


@dataclass(frozen=True)
class AprbsSpec:
    level_lo: np.ndarray
    level_hi: np.ndarray
    hold_min: int
    hold_max: int
    length: int
    seed: int

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.level_lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.level_hi, dtype=float))
        object.__setattr__(self, "level_lo", lo)
        object.__setattr__(self, "level_hi", hi)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("level_hi must exceed level_lo in every channel")
        if not 1 <= self.hold_min <= self.hold_max:
            raise ValueError("need 1 <= hold_min <= hold_max")
        if self.length < 1:
            raise ValueError("length must be >= 1")


def gen_aprbs(spec: AprbsSpec) -> np.ndarray:
    """Piecewise-constant excitation with random levels and random hold times.

    All channels switch together; the level of each channel is uniform on its
    range and each hold time is a uniform integer in ``[hold_min, hold_max]``.
    The final segment is truncated to ``length``.
    """
    rng = elm.make_rng(spec.seed)
    out = np.empty((spec.length, spec.level_lo.size))
    k = 0
    while k < spec.length:
        hold = int(rng.integers(spec.hold_min, spec.hold_max + 1))
        out[k: k + hold] = rng.uniform(spec.level_lo, spec.level_hi)
        k += hold
    return out


def segment_lengths(seq) -> list[int]:
    """Run lengths of consecutive identical rows."""
    seq = np.asarray(seq)
    change = np.flatnonzero(np.any(seq[1:] != seq[:-1], axis=1)) + 1
    edges = np.concatenate([[0], change, [len(seq)]])
    return np.diff(edges).tolist()


def rmse(y, y_hat) -> float:
    """Root of the per-sample summed squared error, averaged over samples.

    The sum over output channels sits inside the single 1/N factor, so a
    constant error ``e`` on ``d`` channels gives ``e * sqrt(d)``.
    """
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    if y.shape[0] == 0:
        raise ValueError("empty dataset")
    err = (y - y_hat).reshape(y.shape[0], -1)
    return float(np.sqrt(np.sum(err * err) / y.shape[0]))


def predict_osap(model: ElmModel, data: NarxDataset) -> np.ndarray:
    if data.X.shape[1] != model.d_in:
        raise ValueError(f"model expects {model.d_in} features, dataset has {data.X.shape[1]}")
    return elm.predict(model, data.X)


def evaluate_osap(model: ElmModel, data: NarxDataset, normalized: bool = True) -> float:
    """One-step-ahead RMSE; in [-1, 1] output units by default."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    y_hat = predict_osap(model, data)
    if normalized:
        return rmse(
            elm.normalize(data.Y, model.z_min, model.z_max),
            elm.normalize(y_hat, model.z_min, model.z_max),
        )
    return rmse(data.Y, y_hat)


def rollout_msap(model: ElmModel, u_seq, y_init, n_pred: int, cfg: NarxConfig) -> np.ndarray:
    """Recurrent multi-step prediction feeding predictions back as lagged outputs.

    Parameters
    ----------
    u_seq : array (n_u + n_pred - 1, u_d)
        Chronological inputs; ``u_seq[j]`` is ``u(k - n_u + j)`` where ``k`` is
        the first predicted index.
    y_init : array (n_y, y_d)
        The ``n_y`` measured outputs preceding ``k``, chronological.
    n_pred : int
        Number of predicted steps.

    Returns
    -------
    ndarray (n_pred, y_d)
    """
    u = np.asarray(u_seq, dtype=float).reshape(-1, cfg.u_d)
    y_hist = np.asarray(y_init, dtype=float).reshape(-1, cfg.y_d)
    if y_hist.shape[0] < cfg.n_y:
        raise ValueError(f"need {cfg.n_y} initial outputs, got {y_hist.shape[0]}")
    if u.shape[0] < cfg.n_u + n_pred - 1:
        raise ValueError(f"need {cfg.n_u + n_pred - 1} inputs, got {u.shape[0]}")
    y_hist = list(y_hist[-cfg.n_y:])
    out = np.empty((n_pred, cfg.y_d))
    for i in range(n_pred):
        x = narx_features(u[i: i + cfg.n_u], np.array(y_hist), cfg)
        y_next = elm.predict(model, x)
        out[i] = y_next
        y_hist = y_hist[1:] + [y_next]
    return out


def msap_rmse(model: ElmModel, u_seq, y_seq, cfg: NarxConfig, horizon: int,
              normalized: bool = True) -> float:
    """RMSE of free-run predictions over consecutive non-overlapping windows.

    Each window starts from measured outputs and predicts ``horizon`` steps
    using only inputs afterwards; errors from all windows are pooled.
    """
    u = np.asarray(u_seq, dtype=float).reshape(len(u_seq), -1)
    y = np.asarray(y_seq, dtype=float).reshape(len(y_seq), -1)
    off = cfg.offset
    if horizon < 1 or y.shape[0] < off + horizon:
        raise ValueError(f"horizon {horizon} longer than available data ({y.shape[0] - off})")
    preds, actual = [], []
    start = off
    while start + horizon <= y.shape[0]:
        pred = rollout_msap(
            model, u[start - cfg.n_u: start + horizon - 1], y[start - cfg.n_y: start], horizon, cfg
        )
        preds.append(pred)
        actual.append(y[start: start + horizon])
        start += horizon
    p, a = np.vstack(preds), np.vstack(actual)
    if normalized:
        p = elm.normalize(p, model.z_min, model.z_max)
        a = elm.normalize(a, model.z_min, model.z_max)
    return rmse(a, p)


@dataclass(frozen=True, order=True)
class Candidate:
    n_h: int
    lam: float
    order: int

    def __post_init__(self):
        if self.n_h < 1 or self.order < 1 or not self.lam >= 0:
            raise ValueError(f"invalid candidate {self}")


def default_grid() -> list[Candidate]:
    return [
        Candidate(n_h, lam, order)
        for n_h, lam, order in itertools.product(
            (10, 20, 40, 80), (1e-4, 1e-3, 1e-2, 1e-1), (1, 2)
        )
    ]


HCCI_CANDIDATE = Candidate(20, 1e-3, 1)


@dataclass
class CvResult:
    best: Candidate
    table: list[dict]


def _tie_key(row):
    # lower RMSE, then simpler (fewer neurons, lower order), then more regularized
    return (row["rmse"], row["n_h"], row["order"], -row["lambda"])


def cross_validate(grid, u_seq, y_seq, split: float = 0.7, seed: int = 0) -> CvResult:
    """Chronological hold-out search over ``(n_h, lambda, order)``.

    The first ``split`` fraction of the sequence trains each candidate and the
    remainder scores it by normalized OSAP RMSE. Both parts are framed
    separately, so no validation row shares a sample with the fit portion.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty hyperparameter grid")
    if not 0 < split < 1:
        raise ValueError("split must lie in (0, 1)")
    u = np.asarray(u_seq, dtype=float).reshape(len(u_seq), -1)
    y = np.asarray(y_seq, dtype=float).reshape(len(y_seq), -1)
    cut = int(round(split * u.shape[0]))
    table = []
    for cand in grid:
        if not isinstance(cand, Candidate):
            cand = Candidate(*cand)
        cfg = NarxConfig(cand.order, cand.order, u.shape[1], y.shape[1])
        train = build_narx(u[:cut], y[:cut], cfg, source="cv-train")
        valid = build_narx(u[cut:], y[cut:], cfg, source="cv-valid")
        model = elm.fit(train.X, train.Y, cand.n_h, cand.lam, seed)
        table.append({
            "n_h": cand.n_h, "lambda": cand.lam, "order": cand.order,
            "rmse": evaluate_osap(model, valid),
            "train_start": 0, "train_end": cut, "valid_start": cut, "valid_end": u.shape[0],
        })
    best_row = min(table, key=_tie_key)
    best = Candidate(best_row["n_h"], best_row["lambda"], best_row["order"])
    return CvResult(best=best, table=table)


def write_score_table(path, table) -> None:
    cols = ["n_h", "lambda", "order", "rmse", "train_start", "train_end", "valid_start", "valid_end"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in table:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])


def write_sequences(path, u, y, header_lines=()) -> None:
    """CSV with ``u_1..u_m, y_1..y_p`` columns, one cycle per row.

    ``header_lines`` are emitted first as ``#``-prefixed provenance comments.
    """
    u = np.asarray(u, dtype=float).reshape(len(u), -1)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow([f"u_{i + 1}" for i in range(u.shape[1])] + [f"y_{i + 1}" for i in range(y.shape[1])])
        for ur, yr in zip(u, y):
            w.writerow([repr(float(v)) for v in ur] + [repr(float(v)) for v in yr])


def read_sequences(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    if not rows:
        raise ValueError(f"{path}: no data")
    header, body = rows[0], rows[1:]
    ui = [i for i, h in enumerate(header) if h.startswith("u_")]
    yi = [i for i, h in enumerate(header) if h.startswith("y_")]
    if not ui or not yi:
        raise ValueError(f"{path}: header must name u_* and y_* channels")
    data = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    return data[:, ui], data[:, yi]


def read_csv_header(path) -> list[str]:
    lines = []
    for line in Path(path).read_text().splitlines():
        if not line.startswith("#"):
            break
        lines.append(line[1:].strip())
    return lines
