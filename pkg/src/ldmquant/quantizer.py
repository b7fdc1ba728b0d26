"""Symmetric min-max fake quantization, fp16 emulation, calibration and
per-module precision assignment."""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import formats
from .diffusion import SchedulerConfig, gen_calibration_batches
from .graph import (
    ModuleGraph,
    apply_node,
    divide_channels,
    execute,
    fp_node_fn,
    graph_inputs,
    list_parameterized_modules,
)

EPS_SCALE = 1e-8
FP16_MAX = 65504.0
CALIB_FORMAT = "ldmquant.calibration"
CONFIG_HEADER = "# ldmquant precision-config version {}"

FORMAT_BITS = {"fp32": 32, "fp16": 16, "int8": 8, "int4": 4}
INTEGER_FORMATS = frozenset({"int8", "int4"})
PRESETS = {
    "8W8A": ("int8", "int8"),
    "4W8A": ("int4", "int8"),
    "FP16": ("fp16", "fp16"),
    "FP32": ("fp32", "fp32"),
}


class CalibrationError(KeyError):
    def __str__(self):
        return str(self.args[0])


def clip_bounds(bits: int) -> tuple[int, int]:
    """Symmetric signed integer range, e.g. ``(-127, 127)`` for 8 bits."""
    if bits not in (4, 8):
        raise ValueError(f"integer quantization supports 4 or 8 bits, got {bits}")
    c_max = 2 ** (bits - 1) - 1
    return -c_max, c_max


@dataclass(frozen=True, eq=False)
class QuantParams:
    """Scale and clip range for one tensor.

    ``scale`` is a scalar for per-tensor params and a vector along ``axis`` for
    per-channel (weight) params.
    """

    scale: np.ndarray
    bits: int
    granularity: str = "per_tensor"
    axis: int = 0

    @property
    def c_min(self) -> int:
        return clip_bounds(self.bits)[0]

    @property
    def c_max(self) -> int:
        return clip_bounds(self.bits)[1]

    def broadcast_scale(self, ndim: int) -> np.ndarray:
        if self.granularity == "per_tensor":
            return self.scale
        shape = [1] * ndim
        shape[self.axis] = -1
        return self.scale.reshape(shape)


def params_from_absmax(absmax, bits: int, granularity: str = "per_tensor", axis: int = 0) -> QuantParams:
    _, c_max = clip_bounds(bits)
    absmax = np.asarray(absmax, dtype=np.float64)
    scale = np.where(absmax > 0, absmax / c_max, EPS_SCALE)
    return QuantParams(scale, bits, granularity, axis)


def minmax_params(values, bits: int, granularity: str = "per_tensor", axis: int = 0) -> QuantParams:
    """Symmetric min-max scale ``max|v| / c_max`` (``EPS_SCALE`` for an all-zero range)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot calibrate quantization parameters from an empty tensor")
    if not np.all(np.isfinite(values)):
        raise ValueError("quantization calibration values must be finite")
    if granularity == "per_tensor":
        absmax = np.max(np.abs(values))
    elif granularity == "per_channel":
        reduce = tuple(i for i in range(values.ndim) if i != axis)
        absmax = np.max(np.abs(values), axis=reduce)
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    return params_from_absmax(absmax, bits, granularity, axis)


def fake_quantize(v, p: QuantParams) -> np.ndarray:
    """Quantize-dequantize: ``s * clip(round(v / s), c_min, c_max)``, rounding half to even."""
    v = np.asarray(v, dtype=np.float64)
    s = p.broadcast_scale(v.ndim)
    return s * np.clip(np.rint(v / s), p.c_min, p.c_max)


def emulate_fp16(v) -> np.ndarray:
    """Round to the nearest half-precision value; overflow saturates at +-65504."""
    v = np.asarray(v, dtype=np.float64)
    return np.clip(v, -FP16_MAX, FP16_MAX).astype(np.float16).astype(np.float64)


# -- precision configs -----------------------------------------------------------------


def parse_format_pair(text: str) -> tuple[str, str]:
    """Accept ``8W8A``-style presets, a single format, or ``weight/activation``."""
    text = text.strip()
    if text.upper() in PRESETS:
        return PRESETS[text.upper()]
    parts = [p.strip().lower() for p in text.split("/")]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or any(p not in FORMAT_BITS for p in parts):
        raise ValueError(f"bad precision {text!r}; expected e.g. int8/int8, fp16 or 4W8A")
    return parts[0], parts[1]


def format_pair_text(pair: tuple[str, str]) -> str:
    return f"{pair[0]}/{pair[1]}"


@dataclass(frozen=True)
class PrecisionConfig:
    """Per-module (weight, activation) formats.

    Rules are exact node ids or glob patterns such as ``up_blocks.2.*``. An exact id
    wins over a pattern; among patterns the longest literal prefix wins, then the
    later rule.
    """

    default: tuple[str, str] = ("fp32", "fp32")
    rules: tuple[tuple[str, tuple[str, str]], ...] = field(default_factory=tuple)

    @classmethod
    def homogeneous(cls, pair) -> "PrecisionConfig":
        if isinstance(pair, str):
            pair = parse_format_pair(pair)
        return cls(default=tuple(pair))

    def resolve(self, node_id: str) -> tuple[str, str]:
        best, best_key = self.default, (-1, -1)
        for i, (pattern, pair) in enumerate(self.rules):
            if pattern == node_id:
                key = (10**9, i)
            elif any(ch in pattern for ch in "*?[") and fnmatch.fnmatchcase(node_id, pattern):
                key = (len(pattern.split("*")[0]), i)
            else:
                continue
            if key > best_key:
                best, best_key = pair, key
        return best

    def assignments(self, graph: ModuleGraph) -> dict[str, tuple[str, str]]:
        """Resolved formats for every parameterized node, in execution order."""
        self.validate(graph)
        return {nid: self.resolve(nid) for nid in list_parameterized_modules(graph)}

    def validate(self, graph: ModuleGraph) -> None:
        for nid in graph.execution_order:
            if graph.nodes[nid].parameterized:
                continue
            for pattern, pair in self.rules:
                if pattern == nid and set(pair) & INTEGER_FORMATS:
                    raise ValueError(f"non-parameterized node {nid!r} cannot carry integer format {pair}")

    def to_text(self) -> str:
        lines = [CONFIG_HEADER.format(formats.FORMAT_VERSION), f"default = {format_pair_text(self.default)}"]
        lines += [f"{pattern} = {format_pair_text(pair)}" for pattern, pair in self.rules]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PrecisionConfig":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# ldmquant precision-config version "):
            raise formats.FormatError("precision config must start with its version header", 0)
        version = lines[0].rsplit(" ", 1)[1]
        if version != str(formats.FORMAT_VERSION):
            raise formats.UnsupportedVersionError(f"unsupported precision-config version {version!r}")
        default, rules = ("fp32", "fp32"), []
        for lineno, raw in enumerate(lines[1:], start=2):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise formats.FormatError(f"line {lineno}: expected 'pattern = format', got {raw!r}")
            try:
                pair = parse_format_pair(value)
            except ValueError as exc:
                raise formats.FormatError(f"line {lineno}: {exc}") from None
            if key.strip() == "default":
                default = pair
            else:
                rules.append((key.strip(), pair))
        return cls(default, tuple(rules))


# -- calibration -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ActivationStats:
    min: float
    max: float
    channel_absmax: np.ndarray

    @property
    def absmax(self) -> float:
        return max(abs(self.min), abs(self.max))


@dataclass(eq=False)
class CalibrationTable:
    """Observed input ranges of parameterized nodes."""

    stats: dict[str, ActivationStats]
    sample_count: int
    steps: tuple[int, ...]

    def __getitem__(self, node_id: str) -> ActivationStats:
        try:
            return self.stats[node_id]
        except KeyError:
            raise CalibrationError(f"no calibration entry for node {node_id!r}") from None

    def __contains__(self, node_id) -> bool:
        return node_id in self.stats

    def __eq__(self, other):
        if not isinstance(other, CalibrationTable):
            return NotImplemented
        if (self.sample_count, self.steps, list(self.stats)) != (other.sample_count, other.steps, list(other.stats)):
            return False
        for k, a in self.stats.items():
            b = other.stats[k]
            if (a.min, a.max) != (b.min, b.max) or a.channel_absmax.tobytes() != b.channel_absmax.tobytes():
                return False
        return True

    def to_text(self) -> str:
        body = {
            "sample_count": self.sample_count,
            "steps": list(self.steps),
            "nodes": [
                {"id": k, "min": s.min, "max": s.max, "channel_absmax": formats.encode_array(s.channel_absmax)}
                for k, s in self.stats.items()
            ],
        }
        return formats.dumps(CALIB_FORMAT, body)

    @classmethod
    def from_text(cls, text) -> "CalibrationTable":
        doc = formats.loads(text, CALIB_FORMAT)
        try:
            stats = {
                n["id"]: ActivationStats(float(n["min"]), float(n["max"]),
                                         formats.decode_array(n["channel_absmax"], n["id"]))
                for n in doc["nodes"]
            }
            return cls(stats, int(doc["sample_count"]), tuple(int(t) for t in doc["steps"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise formats.FormatError(f"malformed calibration table: {exc}") from None


class _RangeObserver:
    def __init__(self, node_ids: Iterable[str]):
        self.watch = set(node_ids)
        self.min: dict[str, float] = {}
        self.max: dict[str, float] = {}
        self.chan: dict[str, np.ndarray] = {}

    def __call__(self, node, args, out):
        if node.id not in self.watch:
            return
        x = args[0]
        reduce = tuple(i for i in range(x.ndim) if i != 1)
        lo, hi = float(x.min()), float(x.max())
        chan = np.max(np.abs(x), axis=reduce)
        if node.id in self.min:
            lo, hi = min(lo, self.min[node.id]), max(hi, self.max[node.id])
            chan = np.maximum(chan, self.chan[node.id])
        self.min[node.id], self.max[node.id], self.chan[node.id] = lo, hi, chan


def calibrate(
    graph: ModuleGraph,
    scheduler: SchedulerConfig,
    steps: Iterable[int],
    n_samples: int,
    seed: int = 0,
    batch_size: int = 64,
) -> CalibrationTable:
    """Record input min/max and per-channel ``|max|`` at every parameterized node.

    Runs unconditional full-precision forwards on ``n_samples`` noised latents at
    each requested timestep.
    """
    steps = sorted(set(int(t) for t in steps))
    if not steps:
        raise ValueError("calibration step set is empty")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    observer = _RangeObserver(list_parameterized_modules(graph))
    for batch in gen_calibration_batches(scheduler, steps, n_samples, seed, graph.latent_shape):
        for start in range(0, n_samples, batch_size):
            graph.forward(batch.z[start:start + batch_size], batch.t, None, hooks=observer)
    stats = {
        nid: ActivationStats(observer.min[nid], observer.max[nid], observer.chan[nid])
        for nid in list_parameterized_modules(graph)
    }
    return CalibrationTable(stats, n_samples, tuple(steps))


# -- quantized execution ---------------------------------------------------------------


def _quantize_weight(w: np.ndarray, fmt: str, granularity: str) -> np.ndarray:
    if fmt == "fp32":
        return w
    if fmt == "fp16":
        return emulate_fp16(w)
    return fake_quantize(w, minmax_params(w, FORMAT_BITS[fmt], granularity, axis=0))


def activation_absmax(graph: ModuleGraph, table: CalibrationTable, node_id: str) -> float:
    """Calibrated input ``|max|`` as seen by the node's weighted op (after any smoothing divide)."""
    stats = table[node_id]
    node = graph.nodes[node_id]
    if node.smooth is None:
        return stats.absmax
    return float(np.max(stats.channel_absmax / node.smooth))


class QuantizedGraph:
    """A graph plus fake-quantized weights and activation quantizers.

    Carries both states: ``forward(..., quantized=False)`` runs the underlying
    full-precision graph and ``quantized=True`` the quantized one. Integer weights
    are quantized per tensor unless ``weight_granularity='per_channel'``; biases
    stay in full precision except under fp16, where they are rounded too.
    """

    dual_state = True

    def __init__(self, graph: ModuleGraph, config: PrecisionConfig, table: CalibrationTable | None,
                 weight_granularity: str = "per_tensor"):
        self.graph = graph
        self.config = config
        self.table = table
        self.weight_granularity = weight_granularity
        self.formats = config.assignments(graph)
        self.weights: dict[str, np.ndarray] = {}
        self.biases: dict[str, np.ndarray] = {}
        self.act_params: dict[str, QuantParams] = {}
        for nid, (wf, af) in self.formats.items():
            node = graph.nodes[nid]
            self.weights[nid] = _quantize_weight(node.weight, wf, weight_granularity)
            self.biases[nid] = emulate_fp16(node.bias) if wf == "fp16" and node.bias is not None else node.bias
            if af in INTEGER_FORMATS:
                if table is None:
                    raise CalibrationError(f"no calibration entry for node {nid!r}")
                self.act_params[nid] = params_from_absmax(activation_absmax(graph, table, nid), FORMAT_BITS[af])

    @property
    def latent_shape(self):
        return self.graph.latent_shape

    def quantize_activation(self, node_id: str, x: np.ndarray) -> np.ndarray:
        af = self.formats[node_id][1]
        if af == "fp32":
            return x
        if af == "fp16":
            return emulate_fp16(x)
        return fake_quantize(x, self.act_params[node_id])

    def quantized_node_fn(self, node, args):
        if node.id not in self.formats:
            return fp_node_fn(node, args)
        x = args[0]
        if node.smooth is not None:
            x = divide_channels(x, node.smooth)
        x = self.quantize_activation(node.id, x)
        return apply_node(node, [x], weight=self.weights[node.id], bias=self.biases[node.id])

    def node_fn(self, quantized: bool):
        return self.quantized_node_fn if quantized else fp_node_fn

    def forward(self, z_t, t, cond=None, hooks=None, quantized: bool = True) -> np.ndarray:
        env = graph_inputs(self.graph, z_t, t, cond)
        return execute(self.graph, env, self.node_fn(quantized), hooks)

    def precision_listing(self) -> list[tuple[str, str, str]]:
        return [(nid, wf, af) for nid, (wf, af) in self.formats.items()]


def apply_config(graph: ModuleGraph, config: PrecisionConfig, table: CalibrationTable | None,
                 weight_granularity: str = "per_tensor") -> QuantizedGraph:
    return QuantizedGraph(graph, config, table, weight_granularity)
