"""Named closed-loop scenarios and multi-run statistics.

``step``                  random IMEP/CA50 steps, no R_max limit
``step_rmax_constrained`` same reference with the R_max state bound enabled
``sinusoid``              slowly varying sinusoidal references
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .mpc import MpcConfig, MpcController
from .plant import NoiseSpec, make_reference, run_closed_loop, settling_times, RMAX

SCENARIOS = ("step", "step_rmax_constrained", "sinusoid")
RMAX_BOUND = 3.5


@dataclass
class Scenario:
    name: str
    ref: np.ndarray
    cfg: MpcConfig
    noise: NoiseSpec
    reference: dict = field(default_factory=dict)

    @property
    def cycles(self) -> int:
        return len(self.ref)


def build_scenario(name: str, *, cycles: int = 600, seed: int = 0, noise_seed: int | None = None,
                   noise: bool = True, hold: int = 50, min_step=(0.3, 2.0),
                   rmax_bound: float = RMAX_BOUND, amplitude=(0.25, 2.0), period=(200.0, 200.0),
                   qp_options: dict | None = None, reference: dict | None = None,
                   mpc_cfg: MpcConfig | None = None) -> Scenario:
    """Reference, controller settings and noise for a named scenario.

    ``seed`` draws the reference levels; the noise uses ``noise_seed``
    (default ``seed + 1``). ``reference`` replaces the named reference with
    explicit :func:`make_reference` arguments (``kind`` plus keywords).
    ``mpc_cfg`` replaces the default controller settings (HCCI gains, horizons
    and bounds); the constrained scenario then requires its state bounds.
    """
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
    if mpc_cfg is None:
        opts = {"max_iter": 200_000} if qp_options is None else dict(qp_options)
        cfg = MpcConfig.hcci(rmax_bound=rmax_bound if name == "step_rmax_constrained" else None,
                              qp_options=opts)
    else:
        cfg = mpc_cfg
        if name == "step_rmax_constrained" and cfg.x_max is None:
            raise ValueError("step_rmax_constrained needs state bounds in the controller settings")
    if reference is not None:
        ref_args = dict(reference)
        ref_args.setdefault("seed", seed)
    elif name == "sinusoid":
        ref_args = {"kind": "sinusoid", "amplitude": list(amplitude), "period": list(period)}
    else:
        ref_args = {"kind": "steps", "seed": seed, "hold": hold, "min_step": list(min_step)}
    args = dict(ref_args)
    ref = make_reference(args.pop("kind"), cycles, **args)
    ns = NoiseSpec(enabled=noise, seed=seed + 1 if noise_seed is None else noise_seed)
    return Scenario(name=name, ref=ref, cfg=cfg, noise=ns, reference=ref_args)


def run_scenario(plant, model, sc: Scenario, **kw):
    return run_closed_loop(plant, MpcController(model, sc.cfg), sc.ref, noise=sc.noise, **kw)


def ensemble(plant, model, sc: Scenario, noise_seeds) -> list:
    """Repeat a scenario under independent noise realizations."""
    return [run_scenario(plant, model, replace(sc, noise=replace(sc.noise, seed=int(s))))
            for s in noise_seeds]


def ensemble_settling(traces, cfg: MpcConfig, channel: int = 0, band: float = 0.05) -> list[dict]:
    """Settling of the noise-averaged response.

    The true output of every run is averaged across runs before the band test,
    which separates the closed-loop transient from the cycle-to-cycle jitter
    that measurement noise feeds through the controller.
    """
    idx = cfg.output_idx[channel]
    y = np.mean([t.z_true[:, idx] for t in traces], axis=0)
    return settling_times(y, traces[0].ref[:, channel], band=band, guard=cfg.N_y)


def rmax_exceedance(trace, limit: float, skip: int = 10) -> float:
    """Fraction of cycles from ``skip`` on with true R_max above ``limit``."""
    r = trace.z_true[skip:, RMAX]
    return float(np.mean(r > limit)) if r.size else 0.0
