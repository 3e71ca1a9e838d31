"""Experiment orchestration: hybrid dataset assembly, the DA-method x N_real
sweep with repeats, and report emission (CSV, markdown, plot data).

Sweep cells are journaled on disk and skipped when already complete, so an
interrupted sweep resumes instead of recomputing.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment as ag
from . import segmentor as seg
from .dataset import AnnotatedPair, Provenance, atomic_write_json
from .errors import InsufficientPool, NoRows

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 500
DA_METHODS = ("baseline", "WA", "SA", "SYN")


@dataclass
class ExperimentConfig:
    da_method: str
    n_real: int
    total_budget: int = DEFAULT_BUDGET
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.da_method not in DA_METHODS:
            raise ValueError(f"da_method must be one of {DA_METHODS}")
        if self.n_real > self.total_budget:
            raise ValueError(f"n_real {self.n_real} exceeds budget {self.total_budget}")

    @property
    def repeats(self) -> int:
        return len(self.seeds)


@dataclass
class ResultRow:
    da_method: str
    n_real: int
    mean_dsc: float
    std_dsc: float
    per_seed: dict[int, float]
    wall_time: float

    @classmethod
    def from_scores(cls, da_method: str, n_real: int, per_seed: dict[int, float],
                    wall_time: float) -> "ResultRow":
        vals = np.array(list(per_seed.values()), dtype=np.float64)
        # population std over the repeats
        return cls(da_method=da_method, n_real=n_real, mean_dsc=float(vals.mean()),
                   std_dsc=float(vals.std(ddof=0)), per_seed=dict(per_seed),
                   wall_time=wall_time)


def build_hybrid(real: list[AnnotatedPair], synth_pool: list[AnnotatedPair],
                 n_real: int, total: int = DEFAULT_BUDGET, seed: int = 0,
                 ) -> list[AnnotatedPair]:
    """Seeded sample of n_real real pairs plus (total - n_real) curated
    synthetic pairs; only curated synthetic provenance is admitted."""
    pool = [p for p in synth_pool if p.provenance == Provenance.synthetic_curated]
    n_synth = total - n_real
    if len(real) < n_real:
        raise InsufficientPool(f"need {n_real} real pairs, have {len(real)}")
    if len(pool) < n_synth:
        raise InsufficientPool(
            f"need {n_synth} curated synthetic pairs, have {len(pool)}")
    rng = np.random.default_rng(seed)
    real_idx = rng.choice(len(real), size=n_real, replace=False)
    synth_idx = rng.choice(len(pool), size=n_synth, replace=False)
    chosen = [real[i] for i in real_idx] + [pool[i] for i in synth_idx]
    log.info("hybrid set: %d real + %d synthetic (seed %d); real ids %s",
             n_real, n_synth, seed, sorted(real[i].id for i in real_idx))
    return chosen


# -- sweep -------------------------------------------------------------------------


@dataclass
class SweepData:
    """In-memory data sources for one sweep."""

    real_train: list[AnnotatedPair]
    val: list[AnnotatedPair]
    test: list[AnnotatedPair]
    synth_pool: list[AnnotatedPair] = field(default_factory=list)


@dataclass
class SweepGrid:
    methods: tuple[str, ...] = ("baseline", "SYN")
    n_real_values: tuple[int, ...] = (5,)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    total_budget: int = DEFAULT_BUDGET
    epochs: int = 20
    batch_size: int = 5
    learning_rate: float = 1e-5
    model_seed_offset: int = 1000


class SweepJournal:
    """JSON cell journal with atomic replacement; keys are method|n_real|seed."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.cells: dict[str, dict] = {}
        if self.path.exists():
            with open(self.path) as f:
                self.cells = json.load(f)

    @staticmethod
    def key(method: str, n_real: int, seed: int) -> str:
        return f"{method}|{n_real}|{seed}"

    def get(self, method, n_real, seed):
        return self.cells.get(self.key(method, n_real, seed))

    def record(self, method, n_real, seed, payload: dict):
        self.cells[self.key(method, n_real, seed)] = payload
        atomic_write_json(self.path, self.cells)


def _cell_train_set(method: str, n_real: int, seed: int, data: SweepData,
                    total_budget: int) -> tuple[list[AnnotatedPair], object]:
    """Training pairs and the on-the-fly augmentation policy for one cell."""
    rng = np.random.default_rng(seed)
    if len(data.real_train) < n_real:
        raise InsufficientPool(f"need {n_real} real pairs, have {len(data.real_train)}")
    idx = rng.choice(len(data.real_train), size=n_real, replace=False)
    real_subset = [data.real_train[i] for i in idx]
    if method == "baseline":
        return real_subset, None
    if method == "WA":
        return real_subset, ag.weak_policy()
    if method == "SA":
        return real_subset, ag.strong_policy()
    if method == "SYN":
        return build_hybrid(data.real_train, data.synth_pool, n_real,
                            total=total_budget, seed=seed), None
    raise ValueError(f"unknown method {method!r}")


def run_sweep(grid: SweepGrid, data: SweepData, run_dir: str | Path,
              ) -> list[ResultRow]:
    """Train and evaluate every (method, n_real, seed) cell; aggregate rows.

    Completed cells are read from the journal. A failing cell is marked and
    skipped in aggregation rather than aborting the sweep.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    journal = SweepJournal(run_dir / "journal.json")
    cells = [ExperimentConfig(da_method=m, n_real=n, total_budget=grid.total_budget,
                              seeds=grid.seeds)
             for m in grid.methods for n in grid.n_real_values]
    rows: list[ResultRow] = []
    for cell in cells:
        per_seed: dict[int, float] = {}
        t_start = time.time()
        for seed in cell.seeds:
            cached = journal.get(cell.da_method, cell.n_real, seed)
            if cached is not None and "dsc" in cached:
                per_seed[seed] = cached["dsc"]
                continue
            try:
                score, info = _run_cell(cell.da_method, cell.n_real, seed, grid, data)
            except Exception as exc:  # cell failures must not kill the sweep
                log.exception("cell %s|%d|%d failed", cell.da_method, cell.n_real, seed)
                journal.record(cell.da_method, cell.n_real, seed, {"error": repr(exc)})
                continue
            journal.record(cell.da_method, cell.n_real, seed, {"dsc": score, **info})
            per_seed[seed] = score
        if per_seed:
            rows.append(ResultRow.from_scores(cell.da_method, cell.n_real, per_seed,
                                              wall_time=time.time() - t_start))
    return rows


def _run_cell(method: str, n_real: int, seed: int, grid: SweepGrid, data: SweepData):
    train_set, policy = _cell_train_set(method, n_real, seed, data, grid.total_budget)
    expected = grid.total_budget if method == "SYN" else n_real
    assert len(train_set) == expected, f"cell size {len(train_set)} != {expected}"
    model = seg.SegModel(seed=grid.model_seed_offset + seed)
    cfg = seg.TrainConfig(epochs=grid.epochs, batch_size=grid.batch_size,
                          learning_rate=grid.learning_rate, seed=seed,
                          augment_policy=policy)
    result = seg.fine_tune(model, train_set, data.val, cfg)
    test_dsc = seg.evaluate(model, data.test)
    info = {
        "train_size": len(train_set),
        "n_synth": sum(1 for p in train_set if p.provenance != Provenance.real),
        "best_epoch": result.best_epoch,
        "decoder_sha": result.checksums_after["decoder"][:16],
    }
    return test_dsc, info


# -- reports -----------------------------------------------------------------------


def emit_reports(rows: list[ResultRow], out_dir: str | Path) -> dict[str, Path]:
    """results.csv, results.md (per-column best bolded), plot_data.json."""
    if not rows:
        raise NoRows("nothing to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    all_seeds = sorted({s for r in rows for s in r.per_seed})

    csv_path = out_dir / "results.csv"
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["da_method", "n_real", "mean_dsc", "std_dsc"]
                    + [f"seed_{s}" for s in all_seeds])
    for r in sorted(rows, key=lambda r: (r.da_method, r.n_real)):
        writer.writerow([r.da_method, r.n_real, f"{r.mean_dsc:.6f}", f"{r.std_dsc:.6f}"]
                        + [f"{r.per_seed[s]:.6f}" if s in r.per_seed else ""
                           for s in all_seeds])
    csv_path.write_text("# std_dsc is the population std (ddof=0) over repeats\n"
                        + buf.getvalue())

    md_path = out_dir / "results.md"
    md_path.write_text(_markdown_table(rows))

    plot_path = out_dir / "plot_data.json"
    series = {}
    for r in sorted(rows, key=lambda r: r.n_real):
        entry = series.setdefault(r.da_method, {"method": r.da_method, "n_real": [],
                                                "mean_dsc": [], "std_dsc": []})
        entry["n_real"].append(r.n_real)
        entry["mean_dsc"].append(r.mean_dsc)
        entry["std_dsc"].append(r.std_dsc)
    atomic_write_json(plot_path, {"series": list(series.values())})
    return {"csv": csv_path, "markdown": md_path, "plot": plot_path}


def _markdown_table(rows: list[ResultRow]) -> str:
    n_values = sorted({r.n_real for r in rows})
    methods = sorted({r.da_method for r in rows}, key=DA_METHODS.index)
    cells = {(r.da_method, r.n_real): r for r in rows}
    best = {}
    for n in n_values:
        col = [r for r in rows if r.n_real == n]
        top = max(r.mean_dsc for r in col)
        best[n] = {r.da_method for r in col if r.mean_dsc == top}  # ties all bolded
    lines = ["| DA | " + " | ".join(f"n_real={n}" for n in n_values) + " |",
             "|---" * (len(n_values) + 1) + "|"]
    for m in methods:
        row = [m]
        for n in n_values:
            r = cells.get((m, n))
            if r is None:
                row.append("-")
            else:
                text = f"{r.mean_dsc:.4f} ± {r.std_dsc:.4f}"
                row.append(f"**{text}**" if m in best[n] else text)
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"
