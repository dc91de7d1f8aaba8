"""Panel CSV ingestion/export and versioned state persistence.

CSV layout: header row of variable names with a leading time column; empty
cells are missing. Floats are written with shortest round-trip repr so an
export/ingest cycle is bit-exact. All writes go through a temp-then-rename
step so interrupted runs never leave corrupt files.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import tempfile

import numpy as np

from .core import (
    InvalidModelError,
    ModelDims,
    Panel,
    PriorSpec,
    VariationalState,
    validate,
)
from .fit import Standardization

log = logging.getLogger(__name__)

STATE_SCHEMA_VERSION = 1


def atomic_write_text(path: str, text: str) -> None:
    """Write text to ``path`` via a temp file in the same directory + rename."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def ingest_csv(path: str) -> tuple[Panel, list[str], list[str]]:
    """Read a panel CSV; returns (Panel, variable names, time labels).

    Rejects ragged rows, duplicate time indices and non-numeric non-empty
    cells (naming the offending row and column). Variables with no available
    observations are kept with a warning.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidModelError(f"{path}: empty file") from None
        names = header[1:]
        if not names:
            raise InvalidModelError(f"{path}: no variable columns")
        times: list[str] = []
        rows: list[list[float]] = []
        masks: list[list[bool]] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise InvalidModelError(
                    f"{path}: ragged row at line {lineno} "
                    f"({len(row)} cells, expected {len(header)})")
            times.append(row[0])
            vals, avail = [], []
            for col, cell in enumerate(row[1:], start=1):
                cell = cell.strip()
                if cell == "":
                    vals.append(0.0)
                    avail.append(False)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise InvalidModelError(
                        f"{path}: non-numeric cell {cell!r} at line {lineno}, "
                        f"column {header[col]!r}") from None
                avail.append(True)
            rows.append(vals)
            masks.append(avail)
    if not rows:
        raise InvalidModelError(f"{path}: no data rows")
    if len(set(times)) != len(times):
        raise InvalidModelError(f"{path}: duplicate time index")
    y = np.array(rows, dtype=float).T
    mask = np.array(masks, dtype=bool).T
    empty = np.nonzero(~mask.any(axis=1))[0]
    if empty.size:
        log.warning("%s: variable(s) with no observations kept: %s",
                    path, [names[i] for i in empty])
    return Panel.from_arrays(y, mask), names, times


def export_panel_csv(path: str, panel: Panel, names: list[str] | None = None,
                     times: list[str] | None = None) -> None:
    """Write a panel as CSV with empty cells for missing entries."""
    n, T = panel.n, panel.T
    names = names or [f"y{i + 1}" for i in range(n)]
    times = times or [str(t + 1) for t in range(T)]
    lines = [",".join(["time"] + list(names))]
    for t in range(T):
        cells = [times[t]]
        for i in range(n):
            cells.append(repr(float(panel.y[i, t])) if panel.mask[i, t] else "")
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _arr(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def save_state(path: str, state: VariationalState, dims: ModelDims, prior: PriorSpec,
               elbo_trace: list[float] | None = None,
               standardization: Standardization | None = None) -> None:
    """Persist a fitted (or intermediate) state with its prior and dims."""
    doc = {
        "schema_version": STATE_SCHEMA_VERSION,
        "dims": {"n": dims.n, "T": dims.T, "r": dims.r, "p": dims.p},
        "prior": {
            "V_F0": _arr(prior.V_F0), "V_lambda": _arr(prior.V_lambda),
            "nu_eps": _arr(prior.nu_eps), "tau2_eps": _arr(prior.tau2_eps),
            "V_phi": _arr(prior.V_phi), "nu_u": _arr(prior.nu_u),
            "tau2_u": _arr(prior.tau2_u), "beta": _arr(prior.beta),
        },
        "state": {k: _arr(v) for k, v in state.__dict__.items()},
        "elbo_trace": [float(x) for x in (elbo_trace or [])],
        "standardization": None if standardization is None else {
            "mean": _arr(standardization.mean), "scale": _arr(standardization.scale)},
    }
    atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_state(path: str) -> tuple[VariationalState, ModelDims, PriorSpec,
                                   list[float], Standardization | None]:
    """Load and re-validate a saved state; rejects version mismatches and
    invariant violations without returning partial objects."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise InvalidModelError(f"{path}: truncated or malformed state file ({e})") from None
    version = doc.get("schema_version")
    if version != STATE_SCHEMA_VERSION:
        raise InvalidModelError(
            f"{path}: state schema version {version!r} not supported "
            f"(expected {STATE_SCHEMA_VERSION})")
    try:
        dims = ModelDims(**doc["dims"])
        prior = PriorSpec(**{k: np.array(v, dtype=float) for k, v in doc["prior"].items()})
        state = VariationalState(**{k: np.array(v, dtype=float)
                                    for k, v in doc["state"].items()})
        trace = [float(x) for x in doc.get("elbo_trace", [])]
        std_doc = doc.get("standardization")
        standardization = None
        if std_doc is not None:
            standardization = Standardization(mean=np.array(std_doc["mean"]),
                                              scale=np.array(std_doc["scale"]))
    except (KeyError, TypeError) as e:
        raise InvalidModelError(f"{path}: malformed state file ({e})") from None
    _check_state_invariants(state, dims)
    validate(dims, Panel.from_arrays(np.zeros((dims.n, dims.T)),
                                     np.zeros((dims.n, dims.T), dtype=bool)), prior)
    return state, dims, prior, trace, standardization


def _check_state_invariants(state: VariationalState, dims: ModelDims) -> None:
    n, r, s = dims.n, dims.r, dims.s
    shapes = {"M_lambda": (n, s), "Sigma_lambda": (n, s, s), "psi2_eps": (n,),
              "M_phi": (r, s), "Sigma_phi": (r, s, s), "psi2_u": (r,),
              "B": (n, s), "P": (n, s, s), "R": (n, s, s)}
    for name, shape in shapes.items():
        got = np.asarray(getattr(state, name)).shape
        if got != shape:
            raise InvalidModelError(f"state {name}: expected shape {shape}, got {got}")
    if np.any(state.psi2_eps <= 0) or np.any(state.psi2_u <= 0):
        raise InvalidModelError("state has non-positive scale parameters")
    if np.any(state.B < 0) or np.any(state.B > 1):
        raise InvalidModelError("state inclusion probabilities outside [0, 1]")


def export_inclusion_csv(path: str, state: VariationalState,
                         Z_true: np.ndarray | None = None) -> None:
    """Long-format (i, k, b, z_true) inclusion-probability table."""
    n, s = state.B.shape
    lines = ["i,k,b,z_true"]
    for i in range(n):
        for k in range(s):
            z = "" if Z_true is None else str(int(Z_true[i, k]))
            lines.append(f"{i + 1},{k + 1},{repr(float(state.B[i, k]))},{z}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def export_loadings_csv(path: str, state: VariationalState,
                        standardization: Standardization | None = None) -> None:
    """Point-estimate loadings b * mu, de-standardized to raw data units when
    standardization info is available."""
    n, s = state.B.shape
    lam = state.B * state.M_lambda
    scale = np.ones(n) if standardization is None else standardization.scale
    lines = ["i,k,loading,loading_raw_units"]
    for i in range(n):
        for k in range(s):
            lines.append(f"{i + 1},{k + 1},{repr(float(lam[i, k]))},"
                         f"{repr(float(lam[i, k] * scale[i]))}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_elbo_trace_csv(path: str, breakdowns) -> None:
    """Per-sweep bound trace: iteration, total and the six term groups."""
    lines = ["iteration,total,f_terms,lambda_terms,phi_terms,"
             "sigma_eps_terms,sigma_u_terms,z_terms"]
    for it, bd in enumerate(breakdowns, start=1):
        vals = ",".join(repr(float(v)) for v in bd.as_tuple())
        lines.append(f"{it},{vals}")
    atomic_write_text(path, "\n".join(lines) + "\n")
