"""Monte Carlo study runner: simulate, fit all estimators, evaluate, aggregate.

Every replication draws its seed from one root SeedSequence (printed in the
run log), runs EM once (which doubles as the factor source for the
variational initialization, as in the study protocol) and then one
variational fit per prior inclusion probability. Replications execute in a
bounded process pool with a deterministic ordered reduction, so results are
identical for any worker count.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core import InvalidModelError, ModelDims, PriorSpec
from .em import EmConfig, run_em
from .evaluate import EvalResult, evaluate_fit
from .fit import FitConfig, initialize, run_vi, run_with_reruns, standardize_panel
from .simulate import SimConfig, simulate_dfm

log = logging.getLogger(__name__)

WORKERS_ENV = "SDFM_WORKERS"


@dataclass(frozen=True)
class StudyCell:
    n: int
    T: int
    r: int
    p: int
    omega: float
    pattern: str = "none"

    @property
    def dims(self) -> ModelDims:
        return ModelDims(n=self.n, T=self.T, r=self.r, p=self.p)

    def label(self) -> str:
        lab = f"n={self.n},T={self.T},r={self.r},p={self.p},omega={self.omega:g}"
        if self.pattern != "none":
            lab += f",pattern={self.pattern}"
        return lab


@dataclass(frozen=True)
class StudyConfig:
    cells: tuple[StudyCell, ...]
    betas: tuple[float, ...] = (0.2, 0.5, 1.0)
    replications: int = 200
    seed: int = 0
    include_ml: bool = True
    workers: int = 0
    fit: FitConfig = field(default_factory=FitConfig)
    max_cell_fits: int = 500_000

    def __post_init__(self):
        total = len(self.cells) * self.replications * (len(self.betas) + int(self.include_ml))
        if total > self.max_cell_fits:
            raise InvalidModelError(
                f"study grid requests {total} fits, above the cap {self.max_cell_fits}")

    @property
    def total_fits(self) -> int:
        return len(self.cells) * self.replications * (len(self.betas) + int(self.include_ml))


def experiment2_config(replications: int = 1, seed: int = 0) -> StudyConfig:
    """The large two-simulation setup with the four availability blocks."""
    cells = (StudyCell(n=800, T=250, r=4, p=2, omega=0.10, pattern="experiment2"),
             StudyCell(n=800, T=250, r=4, p=2, omega=0.025, pattern="experiment2"))
    return StudyConfig(cells=cells, betas=(0.1,), replications=replications, seed=seed)


@dataclass
class RepResult:
    cell: StudyCell
    rep: int
    by_estimator: dict[str, EvalResult]
    error: str | None = None


def run_replication(cell: StudyCell, betas: tuple[float, ...], include_ml: bool,
                    fit_cfg: FitConfig, seed_entropy: tuple[int, ...]) -> RepResult:
    """Simulate one panel, fit EM and every requested prior, evaluate all."""
    dims = cell.dims
    seed_int = int(np.random.SeedSequence(entropy=seed_entropy).generate_state(1)[0])
    panel, truth = simulate_dfm(SimConfig(dims=dims, omega=cell.omega, seed=seed_int,
                                          pattern=cell.pattern))
    sd_y = _available_std(panel)
    std_panel, _ = standardize_panel(panel)

    results: dict[str, EvalResult] = {}
    em_report = run_em(std_panel, dims, fit_cfg.em_config)
    if include_ml:
        results["ML"] = evaluate_fit(em_report.params.Lambda,
                                     em_report.factors[1:, :dims.r], truth, sd_y)
    for beta in betas:
        prior = PriorSpec.default(dims, beta=beta)
        init = initialize(std_panel, dims, prior, fit_cfg, factors=em_report.factors)
        if fit_cfg.rerun:
            rep = run_with_reruns(std_panel, dims, prior, fit_cfg, init)
        else:
            rep = run_vi(std_panel, dims, prior, fit_cfg, init)
        results[f"VI-LS(beta={beta:g})"] = evaluate_fit(
            rep.loadings, rep.factors, truth, sd_y, B_hat=rep.state.B)
    return RepResult(cell=cell, rep=0, by_estimator=results)


def _available_std(panel) -> np.ndarray:
    T_i = np.maximum(panel.T_i, 1)
    mean = panel.y.sum(axis=1) / T_i
    centered = np.where(panel.mask, panel.y - mean[:, None], 0.0)
    return np.sqrt(np.einsum("it,it->i", centered, centered) / T_i)


def _rep_task(args):
    cell, betas, include_ml, fit_cfg, entropy, rep = args
    try:
        out = run_replication(cell, betas, include_ml, fit_cfg, entropy)
        out.rep = rep
        return out
    except Exception as e:  # failures are recorded and excluded, never fatal
        return RepResult(cell=cell, rep=rep, by_estimator={}, error=f"{type(e).__name__}: {e}")


@dataclass
class CellSummary:
    cell: StudyCell
    estimator: str
    replications: int
    failures: int
    mean_P_Z: float | None
    mean_E_Lambda: float
    mean_P_F: float


def run_study(cfg: StudyConfig) -> list[CellSummary]:
    """Run the full grid and aggregate estimator means per cell."""
    root = np.random.SeedSequence(cfg.seed)
    log.info("study root seed: %d (%d cells x %d replications, %d fits total)",
             cfg.seed, len(cfg.cells), cfg.replications, cfg.total_fits)
    tasks = []
    for c_idx, cell in enumerate(cfg.cells):
        for rep in range(cfg.replications):
            entropy = (cfg.seed, c_idx, rep)
            tasks.append((cell, cfg.betas, cfg.include_ml, cfg.fit, entropy, rep))

    workers = cfg.workers or int(os.environ.get(WORKERS_ENV, "0")) or 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_rep_task, tasks, chunksize=1))
    else:
        results = [_rep_task(t) for t in tasks]

    summaries: list[CellSummary] = []
    for cell in cfg.cells:
        cell_results = [r for r in results if r.cell == cell]
        failed = [r for r in cell_results if r.error is not None]
        ok = [r for r in cell_results if r.error is None]
        for r in failed:
            log.warning("replication %d of cell [%s] failed: %s", r.rep, cell.label(), r.error)
        estimators = list(ok[0].by_estimator) if ok else []
        for est in estimators:
            evs = [r.by_estimator[est] for r in ok]
            pz = [e.P_Z for e in evs if e.P_Z is not None]
            summaries.append(CellSummary(
                cell=cell, estimator=est, replications=len(ok), failures=len(failed),
                mean_P_Z=float(np.mean(pz)) if pz else None,
                mean_E_Lambda=float(np.mean([e.E_Lambda for e in evs])),
                mean_P_F=float(np.mean([e.P_F for e in evs])),
            ))
    return summaries


def summary_rows(summaries: list[CellSummary]) -> list[dict]:
    rows = []
    for s in summaries:
        rows.append({
            "n": s.cell.n, "T": s.cell.T, "r": s.cell.r, "p": s.cell.p,
            "omega": s.cell.omega, "pattern": s.cell.pattern,
            "estimator": s.estimator, "replications": s.replications,
            "failures": s.failures,
            "P_Z": "" if s.mean_P_Z is None else repr(s.mean_P_Z),
            "E_Lambda": repr(s.mean_E_Lambda),
            "P_F": repr(s.mean_P_F),
        })
    return rows


def write_summary_csvs(out_dir: str, summaries: list[CellSummary]) -> list[str]:
    """Write the long-format summary plus one wide table per statistic,
    mirroring the estimator-by-cell layout of the study tables."""
    from .io import atomic_write_text

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    rows = summary_rows(summaries)
    cols = list(rows[0]) if rows else ["n"]
    text = ",".join(cols) + "\n"
    for row in rows:
        text += ",".join(str(row[c]) for c in cols) + "\n"
    path = os.path.join(out_dir, "summary.csv")
    atomic_write_text(path, text)
    paths.append(path)

    estimators = sorted({s.estimator for s in summaries})
    cells = sorted({s.cell for s in summaries},
                   key=lambda c: (c.omega, c.n, c.T, c.r, c.p))
    for stat, fname in (("mean_P_Z", "table_inclusion_share.csv"),
                        ("mean_E_Lambda", "table_loading_rmse.csv"),
                        ("mean_P_F", "table_factor_precision.csv")):
        lines = [",".join(["omega", "n", "T", "r", "p", "pattern"] + estimators)]
        for cell in cells:
            vals = []
            for est in estimators:
                match = [s for s in summaries if s.cell == cell and s.estimator == est]
                v = getattr(match[0], stat) if match else None
                vals.append("" if v is None else repr(v))
            lines.append(",".join([f"{cell.omega:g}", str(cell.n), str(cell.T),
                                   str(cell.r), str(cell.p), cell.pattern] + vals))
        path = os.path.join(out_dir, fname)
        atomic_write_text(path, "\n".join(lines) + "\n")
        paths.append(path)
    return paths
