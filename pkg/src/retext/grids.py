"""Named ablation grids and a runner that trains, evaluates and charts each cell."""
from __future__ import annotations

import csv
import logging
import multiprocessing as mp
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .datakit import default_corpora

log = logging.getLogger(__name__)

REID_ONLY = dict(reid=True, itm=False, ir=False, use_single=False)
REID_ITM = dict(reid=True, itm=True, ir=False)
FULL: dict = {}


@dataclass(frozen=True)
class Cell:
    name: str
    changes: dict

    def config(self, base: TrainConfig) -> TrainConfig:
        return base.replace(**self.changes)


def _cells(pairs) -> list[Cell]:
    return [Cell(name, dict(ch)) for name, ch in pairs]


GRIDS: dict[str, list[Cell]] = {
    # which data feeds training, with and without captions
    "data": _cells([
        ("multi", REID_ONLY),
        ("single", dict(use_multi=False, reid_placement="all", itm=False, ir=False)),
        ("single+text", dict(use_multi=False, reid_placement="all")),
        ("multi+single", dict(reid_placement="all", itm=False, ir=False)),
        ("multi+single+text", FULL),
    ]),
    "tasks": _cells([("reid", REID_ONLY), ("reid+itm", REID_ITM), ("reid+itm+ir", FULL)]),
    "match": _cells([
        ("clip", dict(match_loss="clip", use_sp=False)),
        ("soft_clip", dict(match_loss="soft_clip", use_sp=False)),
        ("im", dict(use_sp=False)),
        ("im+sp", FULL),
    ]),
    "placement": _cells([
        ("all/no-text", dict(reid_placement="all", itm=False, ir=False)),
        ("none", FULL),
        ("ins", dict(reid_placement="ins")),
        ("aug", dict(reid_placement="aug")),
        ("cen", dict(reid_placement="cen")),
    ]),
    "k_s": _cells([
        (f"{loss}/K_s={k}", dict(match_loss=loss, use_sp=False, alpha=0.5, K_s=k, P_s=32 // k))
        for loss in ("clip", "soft_clip", "im") for k in (1, 2, 4)
    ]),
    "n_s": _cells([(f"N_s={n}", dict(alpha=0.5, K_s=2, P_s=n // 2)) for n in (32, 64, 128)]),
    "alpha": _cells([(f"alpha={a}", dict(alpha=a)) for a in (0.5, 0.6, 0.7)]),
    "tau": _cells([(f"tau={t}", dict(tau_sp=t)) for t in (0.07, 0.1, 0.15, 0.2)]),
}


def grid(name: str) -> list[Cell]:
    if name not in GRIDS:
        raise KeyError(f"unknown grid {name!r}; choose from {sorted(GRIDS)}")
    return GRIDS[name]


@dataclass
class CellResult:
    cell: str
    seed: int
    digest: str
    status: str
    metrics: dict
    seconds: float = 0.0
    error: str = ""


SUMMARY_COLUMNS = ("cell", "seed", "config", "status", "Rank1", "Rank5", "mAP", "seconds")


def train_and_evaluate(cfg: TrainConfig, scale: float = 1.0, corpus_seed: int | None = None) -> dict:
    """Train ``cfg`` on the default synthetic source corpora; score on the target domain."""
    from .evaluator import evaluate_model
    from .trainer import run

    corpora = default_corpora(seed=cfg.seed if corpus_seed is None else corpus_seed, scale=scale)
    res = run(cfg, corpora["multi"] if cfg.use_multi else None,
              corpora["single"] if cfg.use_single else None)
    out = evaluate_model(res.state.model, corpora["target"])
    out["seconds"] = res.seconds
    return out


def _run_cell(args) -> CellResult:
    name, cfg, scale = args
    try:
        m = train_and_evaluate(cfg, scale)
        secs = m.pop("seconds")
        return CellResult(name, cfg.seed, cfg.digest(), "ok", m, secs)
    except Exception as exc:  # a failing cell is recorded and the grid moves on
        log.error("cell %s seed %d failed: %s", name, cfg.seed, exc)
        return CellResult(name, cfg.seed, cfg.digest(), "failed", {}, 0.0,
                          f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}")


def run_grid(name: str, base: TrainConfig, seeds: Sequence[int], out_dir: str | Path,
             scale: float = 1.0, jobs: int = 1, cells: Sequence[Cell] | None = None) -> list[CellResult]:
    """Run every cell for every seed; the parent process is the only ledger writer."""
    from .evaluator import append_ledger
    from .plotting import grouped_bars

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = list(cells) if cells is not None else grid(name)
    tasks = [(c.name, c.config(base).replace(seed=s), scale) for c in cells for s in seeds]
    if jobs > 1:
        with mp.get_context("spawn").Pool(jobs) as pool:
            results = pool.map(_run_cell, tasks)
    else:
        results = [_run_cell(t) for t in tasks]

    ledger = out / "results.csv"
    summary = out / f"{name}_summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in results:
            if r.status == "ok":
                append_ledger(ledger, r.digest, "target", r.metrics)
            vals = [f"{r.metrics[k]:.6f}" if r.status == "ok" else "" for k in ("Rank1", "Rank5", "mAP")]
            w.writerow([r.cell, r.seed, r.digest, r.status, *vals, f"{r.seconds:.1f}"])
    failed = [r for r in results if r.status != "ok"]
    if failed:
        (out / f"{name}_failures.txt").write_text(
            "".join(f"[{r.cell} seed={r.seed}]\n{r.error}\n" for r in failed))

    means = cell_means(results, [c.name for c in cells])
    grouped_bars(list(means), {"Rank1": [m["Rank1"] for m in means.values()],
                               "mAP": [m["mAP"] for m in means.values()]},
                 out / f"{name}.svg", title=f"{name} grid, target domain (mean of {len(seeds)} seed(s))")
    return results


def cell_means(results: Sequence[CellResult], order: Sequence[str]) -> dict[str, dict[str, float]]:
    out = {}
    for name in order:
        ok = [r.metrics for r in results if r.cell == name and r.status == "ok"]
        out[name] = {k: float(np.mean([m[k] for m in ok])) if ok else 0.0
                     for k in ("Rank1", "Rank5", "mAP")}
    return out
