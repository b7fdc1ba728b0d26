"""Relative quantization noise (SQNR) per module and at the model output.

The dual-path executor evaluates the full-precision and quantized states of every
node in one pass over the graph. Batches use the chunk layout
``[q_cond, fp_cond, q_uncond, fp_uncond]`` (or ``[q, fp]`` when unconditional) at
the graph input and output so the two streams never mix.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import formats
from .diffusion import (
    DEFAULT_GUIDANCE,
    SchedulerConfig,
    guided_noise,
    initial_latent,
    make_condition,
    reverse_step,
    step_noise,
)
from .graph import fp_node_fn, graph_inputs

CAP_DB = 200.0
TRACE_FORMAT = "ldmquant.trace"
CSV_COLUMNS = ("node_id", "t", "sqnr_db", "samples")


def per_sample_sqnr(fp: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``20 log10(||fp_i|| / ||fp_i - q_i||)`` for each batch element ``i``, clamped to ``+-CAP_DB``."""
    fp = np.asarray(fp, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if fp.shape != q.shape:
        raise ValueError(f"SQNR operands differ in shape: {fp.shape} vs {q.shape}")
    if fp.ndim <= 1:
        fp, q = fp.reshape(1, -1), q.reshape(1, -1)
    ps = np.linalg.norm(fp.reshape(fp.shape[0], -1), axis=1)
    pn = np.linalg.norm((fp - q).reshape(fp.shape[0], -1), axis=1)
    db = np.full(ps.shape, CAP_DB)
    noisy = pn > 0
    with np.errstate(divide="ignore"):
        db[noisy] = 20.0 * np.log10(ps[noisy] / pn[noisy])
    return np.clip(db, -CAP_DB, CAP_DB)


def sqnr_db(fp, q) -> float:
    """Mean over the batch of per-element SQNR in decibels.

    The leading axis is the batch axis for inputs of rank >= 2; a 1-D input is one
    sample. Zero noise gives ``CAP_DB``.
    """
    fp = np.asarray(fp, dtype=np.float64)
    if not np.any(fp):
        raise ValueError("SQNR undefined: full-precision signal is all zero")
    return float(np.mean(per_sample_sqnr(fp, q)))


@dataclass(frozen=True)
class SqnrRecord:
    node_id: str
    t: int
    sqnr_db: float
    sample_count: int


@dataclass
class SensitivityTrace:
    """All per-node records of a run plus the output SQNR at each timestep."""

    records: list[SqnrRecord]
    output_sqnr_per_t: dict[int, float] = field(default_factory=dict)

    @property
    def output_avg_db(self) -> float:
        return float(np.mean([self.output_sqnr_per_t[t] for t in sorted(self.output_sqnr_per_t)]))

    @property
    def timesteps(self) -> list[int]:
        return sorted({r.t for r in self.records})

    def node_ids(self) -> list[str]:
        return list(dict.fromkeys(r.node_id for r in self.records))

    def module_average(self) -> dict[str, float]:
        """Time-averaged SQNR per node."""
        acc = defaultdict(list)
        for r in self.records:
            acc[r.node_id].append(r.sqnr_db)
        return {k: float(np.mean(v)) for k, v in acc.items()}

    def at_step(self, t: int) -> dict[str, float]:
        return {r.node_id: r.sqnr_db for r in self.records if r.t == t}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in sorted(self.records, key=lambda r: -r.t):
            writer.writerow([r.node_id, r.t, repr(r.sqnr_db), r.sample_count])
        return buf.getvalue()

    def to_text(self) -> str:
        body = {
            "output_avg_db": self.output_avg_db,
            "output_sqnr_per_t": [[t, self.output_sqnr_per_t[t]] for t in sorted(self.output_sqnr_per_t)],
            "records": [[r.node_id, r.t, r.sqnr_db, r.sample_count] for r in self.records],
        }
        return formats.dumps(TRACE_FORMAT, body)

    @classmethod
    def from_text(cls, text) -> "SensitivityTrace":
        doc = formats.loads(text, TRACE_FORMAT)
        try:
            records = [SqnrRecord(str(n), int(t), float(v), int(c)) for n, t, v, c in doc["records"]]
            per_t = {int(t): float(v) for t, v in doc["output_sqnr_per_t"]}
        except (KeyError, TypeError, ValueError) as exc:
            raise formats.FormatError(f"malformed trace: {exc}") from None
        return cls(records, per_t)


class DualPathResult(NamedTuple):
    fp: np.ndarray
    q: np.ndarray
    records: list[SqnrRecord]


def pack_streams(q: np.ndarray, fp: np.ndarray, conditional: bool) -> np.ndarray:
    """Interleave two ``[2n]`` (conditional) or ``[n]`` streams into the dual-path layout."""
    if not conditional:
        return np.concatenate([q, fp])
    qc, qu = np.split(q, 2)
    fc, fu = np.split(fp, 2)
    return np.concatenate([qc, fc, qu, fu])


def unpack_streams(batch: np.ndarray, conditional: bool) -> tuple[np.ndarray, np.ndarray]:
    if not conditional:
        q, fp = np.split(batch, 2)
        return q, fp
    chunks = np.split(batch, 4)
    return np.concatenate([chunks[0], chunks[2]]), np.concatenate([chunks[1], chunks[3]])


def _dual_sums(qgraph, batch, t, cond, conditional, instrument):
    if not getattr(qgraph, "dual_state", False):
        raise TypeError("dual-path evaluation needs a graph carrying quantized and full-precision states")
    graph = qgraph.graph
    if conditional:
        if cond is None:
            raise ValueError("conditional dual-path batch needs a condition")
        if batch.shape[0] % 4:
            raise ValueError(f"conditional dual-path batch must split into 4 chunks, got {batch.shape[0]}")
    elif batch.shape[0] % 2:
        raise ValueError(f"dual-path batch must split into 2 halves, got {batch.shape[0]}")
    z_q, z_fp = unpack_streams(batch, conditional)
    if conditional:
        n = z_q.shape[0] // 2
        cond = np.asarray(cond, dtype=np.float64)
        cond_stream = np.concatenate([cond, np.zeros_like(cond)])
        if cond.shape[0] != n:
            raise ValueError(f"condition batch {cond.shape[0]} does not match latent chunk {n}")
    else:
        cond_stream = None
    env_q = graph_inputs(graph, z_q, t, cond_stream)
    env_fp = graph_inputs(graph, z_fp, t, cond_stream)
    values = {k: (env_q[k], env_fp[k]) for k in env_q}
    sums = {}
    for nid in graph.execution_order:
        node = graph.nodes[nid]
        q_args = [values[s][0] for s in node.inputs]
        fp_args = [values[s][1] for s in node.inputs]
        q_out = qgraph.quantized_node_fn(node, q_args)
        fp_out = fp_node_fn(node, fp_args)
        if instrument is None or nid in instrument:
            db = per_sample_sqnr(fp_out, q_out)
            sums[nid] = (float(np.sum(db)), db.size)
        values[nid] = (q_out, fp_out)
    q_out, fp_out = values[graph.output]
    return fp_out, q_out, sums


def dual_path_forward(qgraph, batch: np.ndarray, t: int, cond: np.ndarray | None = None,
                      conditional: bool | None = None, instrument=None) -> DualPathResult:
    """Evaluate the quantized and full-precision states together.

    Args:
        qgraph: A ``QuantizedGraph``.
        batch: Latents laid out ``[q_cond, fp_cond, q_uncond, fp_uncond]`` when
            ``cond`` is given, else ``[q, fp]``.
        t: Timestep.
        cond: ``[n, cond_dim]`` condition for the conditional chunks; the
            unconditional chunks get a zero condition.
        instrument: Optional set of node ids to record; all nodes by default.

    Returns:
        ``(fp, q, records)`` where ``fp`` and ``q`` are the output streams, each
        ordered ``[cond, uncond]``, and one record per instrumented node.
    """
    if conditional is None:
        conditional = cond is not None
    batch = np.asarray(batch, dtype=np.float64)
    fp_out, q_out, sums = _dual_sums(qgraph, batch, t, cond, conditional, instrument)
    records = [SqnrRecord(nid, t, total / count, count) for nid, (total, count) in sums.items()]
    return DualPathResult(fp_out, q_out, records)


def packed_output(result: DualPathResult, conditional: bool) -> np.ndarray:
    """Output rearranged back into the dual-path chunk layout."""
    return pack_streams(result.q, result.fp, conditional)


def time_averaged_output_sqnr(
    qgraph,
    scheduler: SchedulerConfig,
    n_samples: int,
    seed: int = 0,
    guidance: float = DEFAULT_GUIDANCE,
    conditional: bool = True,
    batch_size: int = 256,
    instrument=None,
) -> SensitivityTrace:
    """Run the whole reverse loop on both streams and collect SQNR at every step.

    Both streams start from the same seeded ``z_T`` and share the per-step noise;
    each then follows its own trajectory. The output SQNR at step ``t`` compares the
    model outputs of the two streams.
    """
    if scheduler.T < 1:
        raise ValueError("T must be >= 1")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    graph = qgraph.graph
    rng = np.random.default_rng(seed)
    z_q = initial_latent(rng, n_samples, graph.latent_shape)
    z_fp = z_q.copy()
    cond = make_condition(n_samples, graph.cond_dim, seed) if conditional else None
    records, per_t = [], {}
    for t in range(scheduler.T, 0, -1):
        totals: dict[str, list] = {}
        eps_q, eps_fp = [], []
        for start in range(0, n_samples, batch_size):
            sl = slice(start, start + batch_size)
            if conditional:
                q_in = np.concatenate([z_q[sl], z_q[sl]])
                fp_in = np.concatenate([z_fp[sl], z_fp[sl]])
                c = cond[sl]
            else:
                q_in, fp_in, c = z_q[sl], z_fp[sl], None
            fp_out, q_out, sums = _dual_sums(qgraph, pack_streams(q_in, fp_in, conditional), t, c,
                                             conditional, instrument)
            for nid, (total, count) in sums.items():
                acc = totals.setdefault(nid, [0.0, 0])
                acc[0] += total
                acc[1] += count
            out_db = per_sample_sqnr(fp_out, q_out)
            totals.setdefault("__output__", [0.0, 0])
            totals["__output__"][0] += float(np.sum(out_db))
            totals["__output__"][1] += out_db.size
            if conditional:
                k = q_out.shape[0] // 2
                eps_q.append(guided_noise(q_out[:k], q_out[k:], guidance))
                eps_fp.append(guided_noise(fp_out[:k], fp_out[k:], guidance))
            else:
                eps_q.append(q_out)
                eps_fp.append(fp_out)
        out_total, out_count = totals.pop("__output__")
        per_t[t] = out_total / out_count
        records.extend(SqnrRecord(nid, t, total / count, count) for nid, (total, count) in totals.items())
        noise = step_noise(rng, t, z_q.shape)
        z_q = reverse_step(scheduler, z_q, np.concatenate(eps_q), t, noise)
        z_fp = reverse_step(scheduler, z_fp, np.concatenate(eps_fp), t, noise)
    return SensitivityTrace(records, per_t)
