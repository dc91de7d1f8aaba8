"""Command-line interface: simulate, fit, em, study and export subcommands.

Exit codes: 0 success, 2 configuration/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .core import InvalidModelError, ModelDims, NumericalError, Panel, PriorSpec
from .em import EmConfig, EmParams, run_em
from .fit import FitConfig, fit
from .io import (
    atomic_write_text,
    export_inclusion_csv,
    export_loadings_csv,
    export_panel_csv,
    ingest_csv,
    load_state,
    save_state,
    write_elbo_trace_csv,
)
from .simulate import PATTERNS, SimConfig, simulate_dfm
from .study import (
    StudyCell,
    StudyConfig,
    WORKERS_ENV,
    experiment2_config,
    run_study,
    write_summary_csvs,
)

log = logging.getLogger("sdfm")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sdfm", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="draw a synthetic panel and its ground truth")
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--T", type=int, required=True)
    sim.add_argument("--r", type=int, default=1)
    sim.add_argument("--p", type=int, default=0)
    sim.add_argument("--omega", type=float, required=True)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--pattern", choices=PATTERNS, default="none")
    sim.add_argument("--out", required=True, help="output directory")

    ft = sub.add_parser("fit", help="variational fit with loading selection")
    _add_model_args(ft)
    ft.add_argument("--prior", help="prior spec JSON (defaults echo the heuristic priors)")
    ft.add_argument("--beta", type=float, default=0.2,
                    help="prior inclusion probability when --prior is not given")
    ft.add_argument("--tol", type=float, default=1e-6)
    ft.add_argument("--max-iter", type=int, default=500)
    rr = ft.add_mutually_exclusive_group()
    rr.add_argument("--rerun", dest="rerun", action="store_true", default=True)
    rr.add_argument("--no-rerun", dest="rerun", action="store_false")
    ft.add_argument("--seed", type=int, default=0,
                    help="reserved for randomized initializations; the default paths are deterministic")
    ft.add_argument("--init", choices=("pca", "file"), default="pca")
    ft.add_argument("--init-file", help="saved state JSON used when --init file")
    ft.add_argument("--threads", type=int, default=0,
                    help="worker/thread hint; fits are single-process vectorized")

    em = sub.add_parser("em", help="maximum-likelihood baseline fit (no loading selection)")
    _add_model_args(em)
    em.add_argument("--tol", type=float, default=1e-8)
    em.add_argument("--max-iter", type=int, default=1000)
    em.add_argument("--threads", type=int, default=0)

    st = sub.add_parser("study", help="Monte Carlo simulation study over a grid")
    st.add_argument("--config", help="study grid JSON")
    st.add_argument("--preset", choices=("experiment2",),
                    help="named study preset (overrides --config)")
    st.add_argument("--replications", type=int, default=None)
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--workers", type=int, default=0,
                    help=f"process pool size (default: ${WORKERS_ENV} or 1)")
    st.add_argument("--out", required=True, help="output directory")

    ex = sub.add_parser("export", help="export inclusion heatmap data and loadings")
    ex.add_argument("--state", required=True, help="saved state JSON")
    ex.add_argument("--truth", help="truth JSON from `simulate` for z* columns")
    ex.add_argument("--out", required=True, help="output directory")
    return ap


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="panel CSV")
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--p", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")


def _load_prior(path: str | None, dims: ModelDims, beta: float) -> PriorSpec:
    if path is None:
        return PriorSpec.default(dims, beta=beta)
    with open(path) as fh:
        doc = json.load(fh)
    defaults = {"nu": 1.0, "tau2": 1.0, "shrinkage": 2.0, "beta": beta}
    defaults.update(doc)
    prior = PriorSpec.default(dims, beta=float(defaults["beta"]),
                              shrinkage=float(defaults["shrinkage"]),
                              nu=float(defaults["nu"]), tau2=float(defaults["tau2"]))
    overrides = {}
    for key in ("V_F0", "V_lambda", "nu_eps", "tau2_eps", "V_phi", "nu_u", "tau2_u"):
        if key in doc:
            overrides[key] = np.array(doc[key], dtype=float)
    if "beta" in doc and np.ndim(doc["beta"]) > 0:
        overrides["beta"] = np.array(doc["beta"], dtype=float)
    if overrides:
        from dataclasses import replace
        prior = replace(prior, **overrides)
    return prior


def cmd_simulate(args) -> int:
    dims = ModelDims(n=args.n, T=args.T, r=args.r, p=args.p)
    panel, truth = simulate_dfm(SimConfig(dims=dims, omega=args.omega, seed=args.seed,
                                          pattern=args.pattern))
    os.makedirs(args.out, exist_ok=True)
    export_panel_csv(os.path.join(args.out, "panel.csv"), panel)
    doc = {
        "dims": {"n": dims.n, "T": dims.T, "r": dims.r, "p": dims.p},
        "omega": args.omega, "seed": args.seed, "pattern": args.pattern,
        "Lambda": truth.Lambda.tolist(), "Z": truth.Z.astype(int).tolist(),
        "alphas": truth.alphas.tolist(), "sigma2_eps": truth.sigma2_eps.tolist(),
        "xis": truth.xis.tolist(), "F": truth.F.tolist(),
    }
    atomic_write_text(os.path.join(args.out, "truth.json"),
                      json.dumps(doc, sort_keys=True, indent=1) + "\n")
    print(f"wrote {args.out}/panel.csv and truth.json "
          f"(n={dims.n}, T={dims.T}, included loadings={int(truth.Z.sum())})")
    return 0


def cmd_fit(args) -> int:
    panel, _, _ = ingest_csv(args.input)
    dims = ModelDims(n=panel.n, T=panel.T, r=args.r, p=args.p)
    prior = _load_prior(args.prior, dims, args.beta)
    if args.init == "file":
        if not args.init_file:
            raise InvalidModelError("--init file requires --init-file")
        state, fdims, _, _, _ = load_state(args.init_file)
        if (fdims.n, fdims.r, fdims.p) != (dims.n, dims.r, dims.p):
            raise InvalidModelError("init state dims do not match the panel/model")
        init = state
    else:
        init = "pca"
    cfg = FitConfig(tol=args.tol, max_iter=args.max_iter, rerun=args.rerun, init=init)
    report, standardization = fit(panel, dims, prior, cfg)
    os.makedirs(args.out, exist_ok=True)
    save_state(os.path.join(args.out, "state.json"), report.state, dims, prior,
               elbo_trace=report.elbo_trace, standardization=standardization)
    write_elbo_trace_csv(os.path.join(args.out, "elbo_trace.csv"), report.breakdowns)
    print(f"converged={report.converged} sweeps={report.sweeps} "
          f"reruns={report.rerun_count} elbo={report.elbo:.6f} "
          f"wall={report.wall_time:.2f}s -> {args.out}/state.json")
    return 0


def cmd_em(args) -> int:
    panel, _, _ = ingest_csv(args.input)
    dims = ModelDims(n=panel.n, T=panel.T, r=args.r, p=args.p)
    from .fit import standardize_panel
    std_panel, standardization = standardize_panel(panel)
    report = run_em(std_panel, dims, EmConfig(tol=args.tol, max_iter=args.max_iter))
    os.makedirs(args.out, exist_ok=True)
    doc = {
        "dims": {"n": dims.n, "T": dims.T, "r": dims.r, "p": dims.p},
        "Lambda": report.params.Lambda.tolist(),
        "Phi": report.params.Phi.tolist(),
        "sigma2_eps": report.params.sigma2_eps.tolist(),
        "loglik": report.loglik, "iterations": report.iterations,
        "converged": report.converged,
        "standardization": {"mean": standardization.mean.tolist(),
                            "scale": standardization.scale.tolist()},
    }
    atomic_write_text(os.path.join(args.out, "em_params.json"),
                      json.dumps(doc, sort_keys=True, indent=1) + "\n")
    lines = ["iteration,loglik"]
    lines += [f"{i + 1},{repr(v)}" for i, v in enumerate(report.loglik_trace)]
    atomic_write_text(os.path.join(args.out, "loglik_trace.csv"), "\n".join(lines) + "\n")
    print(f"converged={report.converged} iterations={report.iterations} "
          f"loglik={report.loglik:.6f} -> {args.out}/em_params.json")
    return 0


def _study_config_from_json(path: str, args) -> StudyConfig:
    with open(path) as fh:
        doc = json.load(fh)
    cells = tuple(StudyCell(**c) for c in doc["cells"])
    kw = {}
    for key in ("betas", "replications", "seed", "include_ml"):
        if key in doc:
            kw[key] = tuple(doc[key]) if key == "betas" else doc[key]
    if args.replications is not None:
        kw["replications"] = args.replications
    kw.setdefault("seed", args.seed)
    return StudyConfig(cells=cells, workers=args.workers, **kw)


def cmd_study(args) -> int:
    if args.preset == "experiment2":
        cfg = experiment2_config(replications=args.replications or 1, seed=args.seed)
        cfg = StudyConfig(cells=cfg.cells, betas=cfg.betas, replications=cfg.replications,
                          seed=cfg.seed, workers=args.workers)
    elif args.config:
        cfg = _study_config_from_json(args.config, args)
    else:
        raise InvalidModelError("study needs --config or --preset")
    print(f"study: {len(cfg.cells)} cell(s) x {cfg.replications} replication(s), "
          f"{cfg.total_fits} fits, root seed {cfg.seed}")
    summaries = run_study(cfg)
    paths = write_summary_csvs(args.out, summaries)
    for s in summaries:
        pz = "" if s.mean_P_Z is None else f" P_Z={s.mean_P_Z:.4f}"
        print(f"[{s.cell.label()}] {s.estimator}:{pz} "
              f"E_Lambda={s.mean_E_Lambda:.4f} P_F={s.mean_P_F:.4f} "
              f"({s.replications} ok, {s.failures} failed)")
    print("wrote " + ", ".join(paths))
    return 0


def cmd_export(args) -> int:
    state, dims, _, _, standardization = load_state(args.state)
    Z_true = None
    if args.truth:
        with open(args.truth) as fh:
            Z_true = np.array(json.load(fh)["Z"], dtype=int)
    os.makedirs(args.out, exist_ok=True)
    export_inclusion_csv(os.path.join(args.out, "inclusion.csv"), state, Z_true)
    export_loadings_csv(os.path.join(args.out, "loadings.csv"), state, standardization)
    print(f"wrote {args.out}/inclusion.csv and loadings.csv")
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "em": cmd_em,
            "study": cmd_study, "export": cmd_export}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    workers = getattr(args, "workers", 0) or getattr(args, "threads", 0)
    if workers:
        os.environ[WORKERS_ENV] = str(workers)
    try:
        return COMMANDS[args.command](args)
    except (InvalidModelError, OSError, json.JSONDecodeError) as e:
        log.error("%s", e)
        return 2
    except NumericalError as e:
        log.error("numerical failure: %s", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
