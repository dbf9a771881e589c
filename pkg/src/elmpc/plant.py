"""Surrogate engine plants, measurement noise, references and the closed loop.

Two plant modes share one interface ``plant.step(z, u) -> z_next``:

* :class:`ElmPlant` uses a trained ELM state-transition model as the truth.
* :class:`SyntheticPlant` is a fixed smooth saturating map used to generate
  identification data and to study model/plant mismatch.

State order is ``[IMEP, CA50, Pmax, Rmax, Tb, EAFR]`` and input order is
``[FM, EVC, SOI]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import elm
from .elm import ElmModel
from .sysid import AprbsSpec, gen_aprbs
from .mpc import BLOCKS, MpcConfig, MpcController, reference_stack

STATE_NAMES = ("imep", "ca50", "pmax", "rmax", "tb", "eafr")
INPUT_NAMES = ("fm", "evc", "soi")
OUTPUT_NAMES = ("imep", "ca50")
RMAX = 3

U_LO = np.array([19.0, -121.0, 272.0])
U_HI = np.array([25.0, -100.0, 375.0])
U_MID = 0.5 * (U_LO + U_HI)

IMEP_REF_RANGE = (2.6, 3.2)
CA50_REF_RANGE = (-10.0, -4.0)
NOISE_VARIANCES = (0.0012, 1.76)


class PlantDivergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class SyntheticPlant:
    """``s+ = a*s + (1-a)*tanh(G [u_n, s, 1])`` in scaled coordinates.

    ``s = (z - center)/half`` and ``u_n`` maps the input box to ``[-1, 1]``.
    Each state is a first-order lag toward a bounded target, so the map is
    smooth and, since ``|tanh| < 1`` and ``0 <= a < 1``, every scaled state
    stays within ``max(|s0|, 1)`` forever.
    Tb and EAFR are driven by the inputs and the other states only.
    """

    center: np.ndarray = field(default_factory=lambda: np.array([2.825, -8.0, 40.0, 3.0, 32.0, 0.5]))
    half: np.ndarray = field(default_factory=lambda: np.array([0.725, 6.0, 10.0, 2.5, 14.0, 0.15]))
    lag: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.25, 0.35, 0.3, 0.4, 0.5]))
    # columns: fm, evc, soi, imep, ca50, pmax, rmax, tb, eafr, bias
    gain: np.ndarray = field(default_factory=lambda: np.array([
        [0.85, 0.25, -0.10, 0.00, 0.05, 0.0, 0.0, 0.0, 0.0, 0.05],
        [-0.30, 0.80, 0.35, -0.10, 0.00, 0.0, 0.0, 0.0, 0.0, 0.10],
        [0.60, 0.30, 0.20, 0.30, -0.20, 0.0, 0.0, 0.0, 0.0, 0.00],
        [0.70, 0.40, 0.50, 0.00, 0.00, 0.0, 0.0, 0.0, 0.0, -0.05],
        [0.30, 0.10, 0.00, 0.80, 0.00, 0.0, 0.0, 0.0, 0.0, 0.00],
        [-0.80, 0.50, 0.05, 0.00, 0.00, 0.0, 0.0, 0.0, 0.0, 0.00],
    ]))
    u_lo: np.ndarray = field(default_factory=lambda: U_LO.copy())
    u_hi: np.ndarray = field(default_factory=lambda: U_HI.copy())

    n = 6
    m = 3

    def __post_init__(self):
        if self.gain.shape != (self.n, self.m + self.n + 1):
            raise ValueError("gain must be 6 x 10")
        if np.any(self.lag < 0) or np.any(self.lag >= 1):
            raise ValueError("lag coefficients must lie in [0, 1)")

    def scale(self, z):
        return (np.asarray(z, dtype=float) - self.center) / self.half

    def step(self, z, u) -> np.ndarray:
        un = 2.0 * (np.asarray(u, dtype=float) - self.u_lo) / (self.u_hi - self.u_lo) - 1.0
        s = self.scale(z)
        v = self.gain @ np.concatenate([un, s, [1.0]])
        return self.center + self.half * (self.lag * s + (1.0 - self.lag) * np.tanh(v))


@dataclass(frozen=True)
class ElmPlant:
    """A trained ``[u, z] -> z+`` model used as the true plant."""

    model: ElmModel

    @property
    def n(self):
        return self.model.d_out

    @property
    def m(self):
        return self.model.d_in - self.model.d_out

    def step(self, z, u) -> np.ndarray:
        return elm.predict(self.model, np.concatenate([np.asarray(u, float), np.asarray(z, float)]))


def simulate_open_loop(plant, u_seq, z0) -> np.ndarray:
    """States ``z(0..T-1)`` with ``z(k+1) = plant.step(z(k), u(k))``.

    Row ``k`` is the state on which ``u(k)`` acts, so ``(u, z)`` pairs line up
    as the NARX framing expects.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    z = np.empty((len(u_seq), plant.n))
    zc = np.asarray(z0, dtype=float)
    for k in range(len(u_seq)):
        z[k] = zc
        zc = plant.step(zc, u_seq[k])
        if not np.all(np.isfinite(zc)):
            raise PlantDivergence(f"plant state became non-finite at step {k}")
    return z


def identification_data(plant, length: int, seed: int, hold=(5, 30), level_lo=U_LO,
                        level_hi=U_HI, z0=None) -> tuple[np.ndarray, np.ndarray]:
    """A-PRBS inputs and the open-loop states they produce from ``z0``.

    ``z0`` defaults to the steady state under mid-range inputs.
    """
    spec = AprbsSpec(level_lo, level_hi, hold[0], hold[1], length, seed)
    u = gen_aprbs(spec)
    z0 = steady_state(plant) if z0 is None else z0
    return u, simulate_open_loop(plant, u, z0)


def steady_state(plant, u=None, z_init=None, tol: float = 1e-12, max_iter: int = 10_000) -> np.ndarray:
    """Fixed point reached by holding ``u`` (mid-range inputs by default)."""
    u = U_MID if u is None else np.asarray(u, dtype=float)
    z = np.asarray(getattr(plant, "center", None) if z_init is None else z_init, dtype=float)
    if z_init is None and getattr(plant, "center", None) is None:
        z = 0.5 * (plant.model.z_min + plant.model.z_max)
    for _ in range(max_iter):
        zn = plant.step(z, u)
        if not np.all(np.isfinite(zn)):
            raise PlantDivergence("non-finite state while settling to steady state")
        if np.max(np.abs(zn - z)) <= tol * (1.0 + np.max(np.abs(z))):
            return zn
        z = zn
    return z


@dataclass(frozen=True)
class NoiseSpec:
    enabled: bool = True
    variances: tuple = NOISE_VARIANCES
    channels: tuple = (0, 1)
    seed: int = 0

    def __post_init__(self):
        if len(self.variances) != len(self.channels):
            raise ValueError("one variance per noisy channel")
        if any(v < 0 for v in self.variances):
            raise ValueError("noise variances must be >= 0")

    def sample(self, rng, n: int) -> np.ndarray:
        e = np.zeros(n)
        if self.enabled:
            e[list(self.channels)] = rng.normal(0.0, np.sqrt(self.variances))
        return e


def plant_step(plant, z, u, noise: NoiseSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """Advance the plant one cycle and return ``(z_next, z_meas)``."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    if z.size != plant.n or u.size != plant.m:
        raise ValueError(f"plant expects n={plant.n}, m={plant.m}; got {z.size}, {u.size}")
    z_next = plant.step(z, u)
    if not np.all(np.isfinite(z_next)):
        raise PlantDivergence("plant state became non-finite")
    return z_next, z_next + noise.sample(rng, z_next.size)


def _draw_away(rng, rng_range, prev, gap):
    """Uniform on ``[lo, hi]`` minus ``(prev - gap, prev + gap)``."""
    lo, hi = rng_range
    below = max(prev - gap - lo, 0.0)
    above = max(hi - (prev + gap), 0.0)
    t = rng.uniform(0.0, below + above)
    return lo + t if t < below else prev + gap + (t - below)


def make_reference(kind: str, length: int, *, seed: int = 0, levels=None,
                   hold: int = 50, ranges=(IMEP_REF_RANGE, CA50_REF_RANGE),
                   min_step=(0.0, 0.0), offset=None, amplitude=(0.25, 2.0),
                   period=(200.0, 200.0), phase=(0.0, 0.0),
                   y_bounds=((2.1, 3.55), (-14.0, -2.0))) -> np.ndarray:
    """Reference trajectory, ``length x p``.

    ``steps``: piecewise constant with ``hold`` cycles per level. Each level
    is uniform on the part of its channel's range at least ``min_step`` away
    from the previous level (``min_step`` may be at most half the range);
    ``levels`` (``n_steps x p``) overrides the draw.
    ``sinusoid``: ``offset + amplitude * sin(2 pi k / period + phase)`` per
    channel; ``offset`` defaults to the middle of ``ranges``.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    ranges = np.asarray(ranges, dtype=float)
    p = ranges.shape[0]
    lo_b, hi_b = np.asarray(y_bounds, dtype=float).T
    if kind == "steps":
        if levels is None:
            if np.any(ranges[:, 0] < lo_b) or np.any(ranges[:, 1] > hi_b):
                raise ValueError("reference ranges exceed the output bounds")
            span = ranges[:, 1] - ranges[:, 0]
            min_step = np.broadcast_to(np.asarray(min_step, dtype=float), (p,))
            if np.any(2 * np.asarray(min_step) > span):
                raise ValueError("min_step must not exceed half the reference range")
            rng = elm.make_rng(seed)
            n_steps = -(-length // hold)
            levels = np.empty((n_steps, p))
            levels[0] = rng.uniform(ranges[:, 0], ranges[:, 1])
            for i in range(1, n_steps):
                for j in range(p):
                    levels[i, j] = _draw_away(rng, ranges[j], levels[i - 1, j], min_step[j])
        levels = np.atleast_2d(np.asarray(levels, dtype=float))
        if levels.shape[1] != p:
            raise ValueError(f"levels must have {p} columns")
        if np.any(levels < lo_b) or np.any(levels > hi_b):
            raise ValueError("reference levels exceed the output bounds")
        idx = np.minimum(np.arange(length) // hold, len(levels) - 1)
        return levels[idx].copy()
    if kind == "sinusoid":
        off = ranges.mean(axis=1) if offset is None else np.asarray(offset, dtype=float)
        amp = np.asarray(amplitude, dtype=float)
        k = np.arange(length)[:, None]
        ref = off + amp * np.sin(2 * np.pi * k / np.asarray(period, dtype=float) + np.asarray(phase))
        if np.any(off - np.abs(amp) < lo_b) or np.any(off + np.abs(amp) > hi_b):
            raise ValueError("sinusoid leaves the output bounds")
        return ref
    raise ValueError(f"unknown reference kind {kind!r}")


@dataclass
class SimulationTrace:
    """Per-cycle closed-loop record.

    Row ``k`` holds the reference ``r(k)``, the true state ``z(k)``, its
    measurement, the input ``u(k)`` chosen from that measurement and the
    solver diagnostics of that decision.
    """

    ref: np.ndarray
    z_true: np.ndarray
    z_meas: np.ndarray
    u: np.ndarray
    status: list
    iterations: np.ndarray
    active: list
    fallback: np.ndarray
    ok: bool = True
    message: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.u)

    def columns(self) -> list[str]:
        p, n, m = self.ref.shape[1], self.z_true.shape[1], self.u.shape[1]
        names = list(OUTPUT_NAMES) if p == 2 else [f"y{i + 1}" for i in range(p)]
        sn = list(STATE_NAMES) if n == 6 else [f"z{i + 1}" for i in range(n)]
        un = list(INPUT_NAMES) if m == 3 else [f"u{i + 1}" for i in range(m)]
        return (["cycle"] + [f"ref_{s}" for s in names] + [f"{s}_true" for s in sn]
                + [f"{s}_meas" for s in sn] + un
                + ["qp_status", "qp_iterations", "active_mask", "fallback"])

    def write_csv(self, path, header_lines=()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(self.columns())
            for k in range(len(self)):
                w.writerow(
                    [k] + [repr(float(v)) for v in self.ref[k]]
                    + [repr(float(v)) for v in self.z_true[k]]
                    + [repr(float(v)) for v in self.z_meas[k]]
                    + [repr(float(v)) for v in self.u[k]]
                    + [self.status[k], int(self.iterations[k]), self.active[k], int(self.fallback[k])]
                )


def run_closed_loop(plant, controller: MpcController, ref, cycles: int | None = None,
                    noise: NoiseSpec | None = None, z0=None, u0=None,
                    fallback_budget: int = 50) -> SimulationTrace:
    """Measure, decide, apply, advance; one row per cycle.

    Starts from ``z0`` (default: steady state under ``u0``, itself mid-range
    by default). The run stops early with ``ok=False`` if the plant diverges
    or more than ``fallback_budget`` consecutive cycles needed the solver
    fallback.
    """
    cfg: MpcConfig = controller.cfg
    noise = noise or NoiseSpec(enabled=False)
    ref = np.atleast_2d(np.asarray(ref, dtype=float))
    cycles = len(ref) if cycles is None else int(cycles)
    if ref.shape[1] != cfg.p:
        raise ValueError(f"reference has {ref.shape[1]} channels, controller tracks {cfg.p}")
    if plant.n != controller.model.d_out or plant.m != cfg.m:
        raise ValueError("plant and controller model dimensions differ")
    u_prev = U_MID.copy() if u0 is None else np.asarray(u0, dtype=float).copy()
    if np.any(u_prev < cfg.u_min) or np.any(u_prev > cfg.u_max):
        raise ValueError("initial input outside the input bounds")
    z = steady_state(plant, u_prev) if z0 is None else np.asarray(z0, dtype=float).copy()
    rng = elm.make_rng(noise.seed)
    controller.reset()
    n, m = plant.n, cfg.m
    Z = np.full((cycles, n), np.nan)
    Zm = np.full((cycles, n), np.nan)
    Uo = np.full((cycles, m), np.nan)
    status, active = [], []
    iters = np.zeros(cycles, dtype=int)
    fb = np.zeros(cycles, dtype=int)
    z_meas = z + noise.sample(rng, n)
    streak = 0
    ok, msg, done = True, "", 0
    for k in range(cycles):
        Z[k], Zm[k] = z, z_meas
        R = reference_stack(ref, k, cfg.N_y)
        res = controller.step(z_meas, u_prev, R)
        Uo[k] = res.u
        status.append(res.status)
        active.append(res.active_mask())
        iters[k] = res.iterations
        fb[k] = res.fallback
        done = k + 1
        streak = streak + 1 if res.fallback else 0
        if streak > fallback_budget:
            ok, msg = False, f"solver fallback in {streak} consecutive cycles at cycle {k}"
            break
        try:
            z, z_meas = plant_step(plant, z, res.u, noise, rng)
        except PlantDivergence as exc:
            ok, msg = False, f"{exc} at cycle {k}"
            break
        u_prev = res.u
    return SimulationTrace(
        ref=ref[:done].copy(), z_true=Z[:done], z_meas=Zm[:done], u=Uo[:done],
        status=status, iterations=iters[:done], active=active, fallback=fb[:done],
        ok=ok, message=msg,
    )


def step_changes(ref, channel: int = 0) -> list[int]:
    r = np.asarray(ref)[:, channel]
    return (np.flatnonzero(r[1:] != r[:-1]) + 1).tolist()


def settling_times(y, ref, band: float = 0.05, guard: int = 0) -> list[dict]:
    """Cycles until ``y`` stays within ``band`` x step size of each new level.

    ``y`` and ``ref`` are 1-D over the same cycles. The last ``guard`` cycles
    before the next step are ignored, since a previewing controller starts
    moving early. ``settle`` is ``None`` if ``y`` is still outside the band
    at the end of the checked window.
    """
    y = np.asarray(y, dtype=float)
    r = np.asarray(ref, dtype=float)
    edges = (np.flatnonzero(r[1:] != r[:-1]) + 1).tolist() + [len(r)]
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        size = abs(r[a] - r[a - 1])
        stop = max(b - guard, a + 1)
        bad = np.flatnonzero(np.abs(y[a:stop] - r[a]) > band * size)
        if bad.size == 0:
            settle = 0
        elif bad[-1] + 1 < stop - a:
            settle = int(bad[-1]) + 1
        else:
            settle = None
        out.append({"start": a, "stop": b, "from": float(r[a - 1]), "to": float(r[a]),
                    "size": float(size), "settle": settle})
    return out


def trace_settling(trace: SimulationTrace, cfg: MpcConfig, channel: int = 0,
                   band: float = 0.05) -> list[dict]:
    """:func:`settling_times` on the noise-free state of one run."""
    return settling_times(trace.z_true[:, cfg.output_idx[channel]], trace.ref[:, channel],
                          band=band, guard=cfg.N_y)


def limits_ok(trace: SimulationTrace, cfg: MpcConfig, u_prev0=None, tol: float = 1e-9) -> bool:
    """Every applied input and input increment lies within its bounds."""
    u = trace.u
    prev = np.vstack([U_MID if u_prev0 is None else u_prev0, u[:-1]])
    du = u - prev
    return bool(np.all(u >= cfg.u_min - tol) and np.all(u <= cfg.u_max + tol)
                and np.all(du >= cfg.du_min - tol) and np.all(du <= cfg.du_max + tol))


def summarize(trace: SimulationTrace, cfg: MpcConfig, skip: int = 0, u_prev0=None) -> dict:
    """Tracking RMSE, settling, violation counts and solver statistics."""
    idx = list(cfg.output_idx)
    y = trace.z_true[:, idx]
    err = y[skip:] - trace.ref[skip:]
    s = {
        "cycles": len(trace),
        "ok": trace.ok,
        "message": trace.message,
        "rmse": {OUTPUT_NAMES[i] if i < 2 else f"y{i + 1}": float(np.sqrt(np.mean(err[:, i] ** 2)))
                 for i in range(err.shape[1])},
        "mae": {OUTPUT_NAMES[i] if i < 2 else f"y{i + 1}": float(np.mean(np.abs(err[:, i])))
                for i in range(err.shape[1])},
        "settling_imep": [st["settle"] for st in trace_settling(trace, cfg, 0)],
        "input_limits_ok": limits_ok(trace, cfg, u_prev0),
        "y_violations": int(np.sum(np.any((y > cfg.y_max + 1e-9) | (y < cfg.y_min - 1e-9), axis=1))),
        "rmax_max": float(np.max(trace.z_true[:, RMAX])) if trace.z_true.shape[1] > RMAX else None,
        "qp_iterations_mean": float(np.mean(trace.iterations)) if len(trace) else 0.0,
        "qp_iterations_max": int(np.max(trace.iterations)) if len(trace) else 0,
        "qp_not_converged": int(sum(st != "converged" for st in trace.status)),
        "fallbacks": int(np.count_nonzero(trace.fallback)),
    }
    if cfg.x_max is not None:
        viol = trace.z_true > cfg.x_max + 1e-9
        s["x_violations"] = int(np.sum(np.any(viol, axis=1)))
    return s


__all__ = [
    "BLOCKS", "ElmPlant", "identification_data", "NoiseSpec", "PlantDivergence", "SimulationTrace", "SyntheticPlant",
    "limits_ok", "make_reference", "plant_step", "run_closed_loop", "settling_times",
    "simulate_open_loop", "steady_state", "summarize", "trace_settling",
]
