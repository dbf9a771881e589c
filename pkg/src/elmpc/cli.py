"""Command-line front end: ``elmpc {gen-data,train,eval,simulate}``.

Exit status: 0 success, 2 configuration error, 3 data error (missing or
malformed files, data too short), 4 numerical failure (singular training,
plant divergence, solver fallback budget exhausted).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import elm, plant as P, scenarios, sysid
from .mpc import MpcController

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

SPLITS = ("train", "test", "msap")
log = logging.getLogger("elmpc")


class DataError(RuntimeError):
    pass


class NumericalFailure(RuntimeError):
    pass


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _data_dir(cfg) -> Path:
    return Path(cfg["paths"]["data_dir"] or cfg["out_dir"])


def _model_path(cfg) -> Path:
    return Path(cfg["paths"]["model"] or Path(cfg["out_dir"]) / "model.txt")


def _load_model(path) -> elm.ElmModel:
    try:
        return elm.load(path)
    except FileNotFoundError as exc:
        raise DataError(f"model file not found: {path}") from exc
    except (ValueError, KeyError) as exc:
        raise DataError(f"cannot read model {path}: {exc}") from exc


def _read_split(cfg, split) -> tuple[np.ndarray, np.ndarray]:
    path = _data_dir(cfg) / f"{split}.csv"
    try:
        return sysid.read_sequences(path)
    except FileNotFoundError as exc:
        raise DataError(f"data file not found: {path} (run gen-data first)") from exc
    except ValueError as exc:
        raise DataError(f"malformed data file {path}: {exc}") from exc


def _write_rows(path, header_lines, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _data_plant(cfg):
    if cfg["data"]["plant"] == "synthetic":
        return P.SyntheticPlant()
    return P.ElmPlant(_load_model(cfg["paths"]["plant_model"] or _model_path(cfg)))


def cmd_gen_data(cfg) -> dict:
    """A-PRBS excitation through the plant; one CSV per split with inputs and states."""
    d = cfg["data"]
    out = _out_dir(cfg)
    plant = _data_plant(cfg)
    if len(d["level_lo"]) != plant.m:
        raise C.ConfigError(f"data.level_lo has {len(d['level_lo'])} channels, plant has {plant.m} inputs")
    noise = P.NoiseSpec(enabled=d["noise"], seed=cfg["seed"] + 1000)
    rng = elm.make_rng(noise.seed)
    written = {}
    for i, split in enumerate(SPLITS):
        seed = cfg["seed"] + i
        u, z = P.identification_data(plant, d[f"{split}_length"], seed, (d["hold_min"], d["hold_max"]),
                                     d["level_lo"], d["level_hi"])
        if noise.enabled:
            z = z + np.array([noise.sample(rng, z.shape[1]) for _ in range(len(z))])
        path = out / f"{split}.csv"
        sysid.write_sequences(path, u, z, C.provenance(cfg, "gen-data", [
            f"split={split} aprbs_seed={seed} hold=[{d['hold_min']},{d['hold_max']}] "
            f"length={len(u)} plant={d['plant']} noise={d['noise']}",
        ]))
        written[split] = str(path)
    return written


def cmd_train(cfg) -> dict:
    t = cfg["train"]
    out = _out_dir(cfg)
    u, y = _read_split(cfg, "train")
    table = []
    if t["mode"] == "cv":
        g = t["grid"]
        grid = [sysid.Candidate(n, float(lam), o) for n in g["n_h"] for lam in g["lam"] for o in g["order"]]
        res = sysid.cross_validate(grid, u, y, split=t["split"], seed=cfg["seed"])
        best, table = res.best, res.table
    else:
        f = t["fixed"]
        best = sysid.Candidate(int(f["n_h"]), float(f["lam"]), int(f["order"]))
    ncfg = sysid.NarxConfig(best.order, best.order, u.shape[1], y.shape[1])
    data = sysid.build_narx(u, y, ncfg, source="train")
    try:
        model = elm.fit(data.X, data.Y, best.n_h, best.lam, cfg["seed"])
    except elm.SingularSystemError as exc:
        raise NumericalFailure(f"training failed: {exc}") from exc
    path = _model_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    elm.save(model, path)
    rows = [[r[c] for c in ("n_h", "lambda", "order", "rmse", "train_start", "train_end",
                            "valid_start", "valid_end")] for r in table]
    rows.append([best.n_h, best.lam, best.order, sysid.evaluate_osap(model, data), 0, len(u), "", ""])
    _write_rows(out / "scores.csv", C.provenance(cfg, "train", [
        f"mode={t['mode']} selected n_h={best.n_h} lambda={best.lam!r} order={best.order}",
        "last row: selected candidate refit on the full training split (rmse = training OSAP)",
    ]), ["n_h", "lambda", "order", "rmse", "train_start", "train_end", "valid_start", "valid_end"], rows)
    return {"model": str(path), "n_h": best.n_h, "lambda": best.lam, "order": best.order,
            "n_params": model.n_params}


def _order_of(model, u_d, y_d) -> int:
    order, rem = divmod(model.d_in, u_d + y_d)
    if rem or order < 1 or model.d_out != y_d:
        raise DataError(f"model ({model.d_in} -> {model.d_out}) does not fit data with "
                        f"{u_d} inputs and {y_d} outputs")
    return order


def cmd_eval(cfg) -> dict:
    out = _out_dir(cfg)
    model = _load_model(_model_path(cfg))
    u_te, y_te = _read_split(cfg, "test")
    u_ms, y_ms = _read_split(cfg, "msap")
    order = _order_of(model, u_te.shape[1], y_te.shape[1])
    ncfg = sysid.NarxConfig(order, order, u_te.shape[1], y_te.shape[1])
    horizon = cfg["eval"]["horizon"]
    if horizon > len(y_ms) - ncfg.offset:
        raise DataError(f"eval.horizon {horizon} longer than the MSAP split ({len(y_ms) - ncfg.offset} usable)")
    te = sysid.build_narx(u_te, y_te, ncfg, source="test")
    osap_pred = sysid.predict_osap(model, te)
    metrics = {
        "osap_rmse": sysid.evaluate_osap(model, te),
        "msap_rmse": sysid.msap_rmse(model, u_ms, y_ms, ncfg, horizon),
        "osap_rmse_physical": sysid.evaluate_osap(model, te, normalized=False),
        "msap_rmse_physical": sysid.msap_rmse(model, u_ms, y_ms, ncfg, horizon, normalized=False),
        "horizon": horizon,
        "extrapolated_test_entries": elm.out_of_bounds(te.X, model.x_min, model.x_max),
        "n_params": model.n_params,
    }
    off = ncfg.offset
    ms_pred = sysid.rollout_msap(model, u_ms[off - ncfg.n_u: off + horizon - 1], y_ms[off - ncfg.n_y: off],
                                 horizon, ncfg)
    hdr = C.provenance(cfg, "eval", [f"model={_model_path(cfg)} order={order}"])
    _write_rows(out / "metrics.csv", hdr, ["metric", "value"], list(metrics.items()))
    d = y_te.shape[1]
    cols = ["split", "cycle"] + [f"actual_{i + 1}" for i in range(d)] + [f"predicted_{i + 1}" for i in range(d)]
    rows = [["osap", off + k, *te.Y[k], *osap_pred[k]] for k in range(len(te))]
    rows += [["msap", off + k, *y_ms[off + k], *ms_pred[k]] for k in range(horizon)]
    _write_rows(out / "predictions.csv", hdr, cols, rows)
    if cfg["plot"]:
        from . import plotting

        plotting.plot_prediction(te.Y, osap_pred, out / "osap.png", title="one-step-ahead (test)")
        plotting.plot_prediction(y_ms[off: off + horizon], ms_pred, out / "msap.png",
                                 title=f"{horizon}-step free run")
    return metrics


def cmd_simulate(cfg) -> dict:
    s = cfg["simulate"]
    out = _out_dir(cfg)
    model = _load_model(_model_path(cfg))
    if model.d_in != 9 or model.d_out != 6:
        raise C.ConfigError(f"simulate needs a first-order 9 -> 6 model, got {model.d_in} -> {model.d_out} "
                            "(train with order 1)")
    if s["plant"] == "elm":
        plant = P.ElmPlant(_load_model(cfg["paths"]["plant_model"]) if cfg["paths"]["plant_model"] else model)
    else:
        plant = P.SyntheticPlant()
    bound = s["mpc"]["rmax_bound"]
    if s["scenario"] == "step_rmax_constrained" and bound is None:
        bound = scenarios.RMAX_BOUND
    mcfg = C.mpc_config(cfg, rmax_bound=bound)
    try:
        sc = scenarios.build_scenario(
            s["scenario"], cycles=s["cycles"], seed=cfg["seed"], noise_seed=s["noise"]["seed"],
            noise=s["noise"]["enabled"], hold=s["hold"], min_step=s["min_step"],
            amplitude=s["amplitude"], period=s["period"], reference=s["reference"], mpc_cfg=mcfg,
        )
        sc.noise = P.NoiseSpec(enabled=sc.noise.enabled, variances=tuple(s["noise"]["variances"]),
                               seed=sc.noise.seed)
    except (ValueError, TypeError) as exc:
        raise C.ConfigError(f"infeasible scenario configuration: {exc}") from exc
    trace = P.run_closed_loop(plant, MpcController(model, sc.cfg), sc.ref, noise=sc.noise,
                              fallback_budget=s["fallback_budget"])
    hdr = C.provenance(cfg, "simulate", [
        f"scenario={s['scenario']} plant={s['plant']} noise_seed={sc.noise.seed} "
        f"rmax_bound={bound} model={_model_path(cfg)}",
        "row k: reference r(k), state z(k), its measurement, input u(k) chosen from it",
        "active_mask digits: du_max du_min u_max u_min y_max y_min x_max x_min",
    ])
    trace.write_csv(out / "trace.csv", hdr)
    summary = P.summarize(trace, sc.cfg)
    summary["scenario"] = s["scenario"]
    summary["provenance"] = hdr[:3]
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if cfg["plot"]:
        from . import plotting

        plotting.plot_trace(trace, out / "trace.png", sc.cfg.y_min, sc.cfg.y_max, bound)
    if not trace.ok:
        raise NumericalFailure(f"closed loop stopped early: {trace.message}")
    return summary


COMMANDS = {
    "gen-data": (cmd_gen_data, "drive the plant with A-PRBS excitation and write train/test/msap CSVs"),
    "train": (cmd_train, "cross-validate (or fix) hyperparameters, fit the ELM, save model and scores"),
    "eval": (cmd_eval, "one-step and free-run prediction metrics on the test and msap splits"),
    "simulate": (cmd_simulate, "closed-loop MPC scenario; writes trace.csv and summary.json"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="elmpc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out-dir", type=Path, help="override the output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set simulate.cycles=300")
        sp.add_argument("--plot", action="store_true", help="also render PNG figures")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    func = COMMANDS[args.command][0]
    try:
        overrides = list(args.set) + (["plot=true"] if args.plot else [])
        cfg = C.load_config(args.config, overrides, seed=args.seed, out_dir=args.out_dir)
        result = func(cfg)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("%s done: %s", args.command, result)
    print(json.dumps(result, default=str, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
