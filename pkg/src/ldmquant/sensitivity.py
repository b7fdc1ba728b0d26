"""Block sweeps (quantize the first N blocks) and per-module sensitivity ranking."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .diffusion import DEFAULT_GUIDANCE, SchedulerConfig
from .graph import ModuleGraph
from .quantizer import CalibrationTable, PrecisionConfig, apply_config, parse_format_pair
from .sqnr import CAP_DB, SensitivityTrace, time_averaged_output_sqnr

DEFAULT_TOP_K = 10.0


@dataclass(frozen=True)
class SweepPoint:
    n: int
    output_avg_db: float
    block_name: str  # last quantized block, "-" for n = 0


@dataclass(frozen=True)
class BlockSweepCurve:
    points: tuple[SweepPoint, ...]

    @property
    def values(self) -> list[float]:
        return [p.output_avg_db for p in self.points]

    def __len__(self):
        return len(self.points)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n_quantized", "block_name", "output_avg_db"])
        for p in self.points:
            w.writerow([p.n, p.block_name, repr(p.output_avg_db)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "BlockSweepCurve":
        rows = list(csv.DictReader(io.StringIO(text)))
        try:
            points = tuple(SweepPoint(int(r["n_quantized"]), float(r["output_avg_db"]), r["block_name"]) for r in rows)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed sweep CSV: {exc}") from None
        if [p.n for p in points] != list(range(len(points))):
            raise ValueError("sweep CSV rows must have n_quantized = 0, 1, 2, ...")
        return cls(points)

    def plot_data(self) -> str:
        return "x,y\n" + "".join(f"{p.n},{p.output_avg_db!r}\n" for p in self.points)


def prefix_config(graph: ModuleGraph, n_blocks: int, low, rest=("fp32", "fp32")) -> PrecisionConfig:
    """``low`` precision on blocks ``[0, n_blocks)``, ``rest`` on the others."""
    if isinstance(low, str):
        low = parse_format_pair(low)
    if not 0 <= n_blocks <= len(graph.blocks):
        raise ValueError(f"block count {n_blocks} outside [0, {len(graph.blocks)}]")
    rules = tuple((f"{b.name}.*", tuple(low)) for b in graph.blocks[:n_blocks])
    return PrecisionConfig(default=tuple(rest), rules=rules)


def block_sweep(
    graph: ModuleGraph,
    table: CalibrationTable,
    bits,
    scheduler: SchedulerConfig,
    n_samples: int,
    seed: int = 0,
    guidance: float = DEFAULT_GUIDANCE,
    workers: int | None = None,
) -> BlockSweepCurve:
    """Quantize the first ``N`` blocks (``N = 0..B``) and measure the time-averaged output SQNR."""
    low = parse_format_pair(bits) if isinstance(bits, str) else tuple(bits)

    def run(n):
        qgraph = apply_config(graph, prefix_config(graph, n, low), table)
        trace = time_averaged_output_sqnr(qgraph, scheduler, n_samples, seed, guidance,
                                          instrument=frozenset())
        return trace.output_avg_db

    counts = range(len(graph.blocks) + 1)
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            values = list(pool.map(run, counts))
    else:
        values = [run(n) for n in counts]
    names = ["-"] + [b.name for b in graph.blocks]
    return BlockSweepCurve(tuple(SweepPoint(n, v, names[n]) for n, v in zip(counts, values)))


@dataclass(frozen=True)
class CutChoice:
    """Where the hybrid plan switches to fp16.

    ``curve_index`` is the sweep point ``N*`` at which SQNR collapses; quantizing
    block ``N* - 1`` caused it, so that block is the first high-precision one
    (``block_position``). ``no_cut_needed`` means the whole model can stay low-precision.
    """

    curve_index: int | None
    block_position: int
    block_name: str | None
    no_cut_needed: bool = False


def select_cut_block(curve, policy: str = "largest_drop", threshold_db: float | None = None) -> CutChoice:
    """Pick the cut from a sweep curve.

    ``largest_drop`` takes the ``N`` maximizing ``curve[N-1] - curve[N]``; drops
    from a zero-noise point (``CAP_DB``, nothing quantized yet) are skipped since
    that value is a sentinel. ``threshold`` takes the smallest ``N`` whose value falls
    below ``threshold_db``.
    """
    points = curve.points if isinstance(curve, BlockSweepCurve) else None
    values = [float(v) for v in (curve.values if points is not None else curve)]
    if len(values) < 2:
        raise ValueError("sweep curve needs at least two points")
    n_blocks = len(values) - 1

    def choice(n):
        name = points[n].block_name if points is not None else None
        return CutChoice(n, n - 1, name)

    if policy == "largest_drop":
        candidates = [n for n in range(1, len(values)) if values[n - 1] < CAP_DB]
        if not candidates:
            candidates = list(range(1, len(values)))
        drops = [values[n - 1] - values[n] for n in candidates]
        best = candidates[int(np.argmax(drops))]
        if drops[int(np.argmax(drops))] <= 0:
            return CutChoice(None, n_blocks, None, no_cut_needed=True)
        return choice(best)
    if policy == "threshold":
        if threshold_db is None:
            raise ValueError("threshold policy needs threshold_db")
        for n, v in enumerate(values):
            if v < threshold_db:
                return choice(n) if n > 0 else CutChoice(0, 0, None)
        return CutChoice(None, n_blocks, None, no_cut_needed=True)
    raise ValueError(f"unknown cut policy {policy!r}")


@dataclass(frozen=True)
class ModuleRanking:
    order: tuple[str, ...]  # most sensitive (lowest SQNR) first
    average_db: dict
    first_step_db: dict
    last_step_db: dict
    selected: tuple[str, ...]

    @property
    def step_gap_db(self) -> dict:
        return {k: self.first_step_db[k] - self.last_step_db[k] for k in self.order}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "node_id", "avg_sqnr_db", "first_step_db", "last_step_db", "gap_db", "selected"])
        sel = set(self.selected)
        gap = self.step_gap_db
        for i, k in enumerate(self.order):
            w.writerow([i, k, repr(self.average_db[k]), repr(self.first_step_db[k]),
                        repr(self.last_step_db[k]), repr(gap[k]), int(k in sel)])
        return buf.getvalue()


def selection_size(k_percent: float, count: int) -> int:
    if not 0 < k_percent <= 100:
        raise ValueError(f"k_percent must be in (0, 100], got {k_percent}")
    return max(1, math.floor(k_percent * count / 100 + 1e-9))


def rank_modules(trace: SensitivityTrace, k_percent: float = DEFAULT_TOP_K, modules=None) -> ModuleRanking:
    """Sort modules by time-averaged SQNR, most sensitive first, and select the top ``k%``.

    ``modules`` restricts (and orders, for tie-breaking) the candidates; pass the
    graph's parameterized modules in execution order. Defaults to every node in
    the trace.
    """
    if not trace.records:
        raise ValueError("cannot rank modules from an empty trace")
    avg = trace.module_average()
    modules = list(modules) if modules is not None else trace.node_ids()
    missing = [m for m in modules if m not in avg]
    if missing:
        raise KeyError(f"trace has no records for {missing[0]!r}")
    steps = trace.timesteps
    first, last = trace.at_step(steps[-1]), trace.at_step(steps[0])
    pos = {m: i for i, m in enumerate(modules)}
    order = tuple(sorted(modules, key=lambda m: (avg[m], pos[m])))
    selected = order[: selection_size(k_percent, len(order))]
    return ModuleRanking(
        order,
        {m: avg[m] for m in order},
        {m: first[m] for m in order},
        {m: last[m] for m in order},
        selected,
    )
