"""Benchmark grid: simulate -> estimate -> evaluate over shapes, densities and seeds."""

import csv
import io
import json
import logging
import statistics
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from . import cdl, metric, starfield
from .sparse import SolverError

log = logging.getLogger(__name__)

COLUMNS = ("shape", "density", "seed", "M", "status", "snr_db", "runtime_s",
           "best_offset_row", "best_offset_col", "scale", "message", "params")


@dataclass
class Cell:
    shape: str
    density: float
    seed: int
    size: int = 256
    noise: bool = True
    overrides: dict = field(default_factory=dict)
    n_r: int = 50


def run_cell(cell):
    """Run one grid cell; failures are returned as rows with ``status = error``."""
    row = dict(shape=cell.shape, density=cell.density, seed=cell.seed,
               M=cell.overrides.get("M", 5), status="ok", snr_db=float("nan"),
               runtime_s=float("nan"), best_offset_row="", best_offset_col="",
               scale=float("nan"), message="", params="")
    try:
        params = cdl.params_for(cell.shape, cell.density, **cell.overrides)
        row["M"] = params.M
        row["params"] = json.dumps(params.to_dict(), sort_keys=True)
        spec = starfield.SceneSpec(width=cell.size, height=cell.size, density=cell.density,
                                   seed=cell.seed, noise=cell.noise)
        img, truth = starfield.render_scene(spec, cell.shape)
        t0 = time.perf_counter()
        res = cdl.run_cdl(img, params)
        row["runtime_s"] = time.perf_counter() - t0
        m = metric.evaluate(truth.psf, res.psf, n_r=cell.n_r)
        row.update(snr_db=m.snr_db, best_offset_row=m.best_offset[0],
                   best_offset_col=m.best_offset[1], scale=m.scale)
    except (SolverError, metric.MetricError, ValueError, FloatingPointError) as exc:
        row["status"] = "error"
        row["message"] = f"{type(exc).__name__}: {exc}"
        log.debug("cell failed:\n%s", traceback.format_exc())
    log.info("%s density=%g seed=%d M=%s: %s %.2f dB in %.1f s", cell.shape, cell.density,
             cell.seed, row["M"], row["status"], row["snr_db"], row["runtime_s"])
    return row


def make_cells(shapes, densities, seeds, size=256, noise=True, overrides=None, m_values=None, n_r=50):
    base = dict(overrides or {})
    cells = []
    for M in (m_values or [base.get("M")]):
        ov = dict(base)
        if M is not None:
            ov["M"] = int(M)
        for shape in shapes:
            for d in densities:
                for seed in seeds:
                    cells.append(Cell(shape, d, int(seed), size, noise, ov, n_r))
    return cells


def run_grid(cells, jobs=1):
    if jobs <= 1 or len(cells) <= 1:
        return [run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(run_cell, cells))


def to_csv(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in COLUMNS})
    return buf.getvalue()


def summarize(rows):
    """Median SNR and runtime per ``(M, shape, density)`` over the successful seeds."""
    groups = {}
    for r in rows:
        groups.setdefault((r["M"], r["shape"], r["density"]), []).append(r)
    out = []
    for (M, shape, d), rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        out.append(dict(M=M, shape=shape, density=d, runs=len(rs), failed=len(rs) - len(ok),
                        median_snr_db=statistics.median(r["snr_db"] for r in ok) if ok else None,
                        median_runtime_s=statistics.median(r["runtime_s"] for r in ok) if ok else None))
    return out


def format_table(summary):
    """Shape-by-density table of median SNR (dB), one block per ``M``."""
    lines = []
    for M in sorted({s["M"] for s in summary}):
        cells = [s for s in summary if s["M"] == M]
        dens = sorted({s["density"] for s in cells})
        shapes = list(dict.fromkeys(s["shape"] for s in cells))
        lines.append(f"M = {M}: median SNR (dB)")
        lines.append("shape".ljust(10) + "".join(f"{d:>9g}" for d in dens))
        for sh in shapes:
            vals = []
            for d in dens:
                v = next((s["median_snr_db"] for s in cells if s["shape"] == sh and s["density"] == d), None)
                vals.append(f"{v:9.2f}" if v is not None else "      n/a")
            lines.append(sh.ljust(10) + "".join(vals))
        t = [s["median_runtime_s"] for s in cells if s["median_runtime_s"] is not None]
        if t:
            lines.append(f"median runtime per cell: {statistics.median(t):.1f} s")
        lines.append("")
    return "\n".join(lines)
