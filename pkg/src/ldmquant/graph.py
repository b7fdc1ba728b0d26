"""UNet-like module graph: node/block types, toy builder, executor and file format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import formats
from .tensor import ConvSpec, ShapeError, combine, conv2d, group_norm, linear, resample, silu

PARAMETERIZED_KINDS = frozenset(
    {"conv", "linear", "attention_projection", "shortcut_conv", "downsample_conv", "upsample_conv"}
)
NODE_KINDS = PARAMETERIZED_KINDS | {"norm", "activation", "combine"}
CONV_KINDS = frozenset({"conv", "shortcut_conv", "downsample_conv", "upsample_conv"})

# graph-level inputs that nodes may reference
INPUT_LATENT = "@z"
INPUT_TIME = "@temb"
INPUT_COND = "@cond"
GRAPH_INPUTS = (INPUT_LATENT, INPUT_TIME, INPUT_COND)

GRAPH_FORMAT = "ldmquant.graph"

Hook = Callable[["ModuleNode", list, np.ndarray], None]


@dataclass(frozen=True, eq=False)
class ModuleNode:
    """One operation in the graph.

    ``inputs`` names producer node ids (or one of ``GRAPH_INPUTS``). ``smooth`` holds
    per-input-channel smoothing scales once the node has been smoothed; the node then
    divides its input by them before the weighted op.
    """

    id: str
    kind: str
    inputs: tuple[str, ...]
    params: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)
    macs: int = 0
    smooth: np.ndarray | None = None

    @property
    def parameterized(self) -> bool:
        return self.kind in PARAMETERIZED_KINDS

    @property
    def weight(self) -> np.ndarray | None:
        return self.params.get("weight")

    @property
    def bias(self) -> np.ndarray | None:
        return self.params.get("bias")

    @property
    def param_count(self) -> int:
        if not self.parameterized:
            return 0
        return sum(int(p.size) for p in self.params.values())

    @property
    def in_channels(self) -> int:
        return int(self.weight.shape[1])

    def __eq__(self, other):
        if not isinstance(other, ModuleNode):
            return NotImplemented
        if (self.id, self.kind, self.inputs, self.attrs, self.macs) != (
            other.id, other.kind, other.inputs, other.attrs, other.macs
        ):
            return False
        if self.params.keys() != other.params.keys():
            return False
        if any(not _bit_equal(self.params[k], other.params[k]) for k in self.params):
            return False
        if (self.smooth is None) != (other.smooth is None):
            return False
        return self.smooth is None or _bit_equal(self.smooth, other.smooth)

    __hash__ = None


@dataclass(frozen=True)
class BlockGroup:
    name: str
    node_ids: tuple[str, ...]
    position_index: int


def _bit_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def _block_rank(name: str, depth: int) -> int:
    if name == "in_blocks":
        return 0
    if name == "mid_block":
        return depth + 1
    if name == "out_blocks":
        return 2 * depth + 2
    kind, _, idx = name.partition(".")
    if kind == "down_blocks":
        return 1 + int(idx)
    if kind == "up_blocks":
        return depth + 2 + int(idx)
    raise ValueError(f"unknown block name {name!r}")


class ModuleGraph:
    """Immutable UNet-like block graph used as the noise predictor.

    Nodes execute in block order, then in listed order within each block.
    """

    def __init__(
        self,
        blocks: Sequence[BlockGroup],
        nodes: Iterable[ModuleNode],
        output: str,
        latent_shape: Sequence[int],
        time_dim: int,
        cond_dim: int,
    ):
        self.blocks = tuple(blocks)
        node_map = {}
        for node in nodes:
            if node.id in node_map:
                raise ValueError(f"duplicate node id {node.id!r}")
            node_map[node.id] = node
        self.nodes = node_map
        self.output = output
        self.latent_shape = tuple(int(d) for d in latent_shape)
        self.time_dim = int(time_dim)
        self.cond_dim = int(cond_dim)
        self._order = tuple(nid for block in self.blocks for nid in block.node_ids)
        self._block_of = {nid: block.name for block in self.blocks for nid in block.node_ids}
        self._validate()

    # -- structure -----------------------------------------------------------------

    def _validate(self) -> None:
        if len(self.latent_shape) != 4:
            raise ValueError(f"latent shape must be [N,C,H,W], got {self.latent_shape}")
        if sorted(self._order) != sorted(self.nodes) or len(set(self._order)) != len(self._order):
            raise ValueError("every node must belong to exactly one block")
        depth = sum(1 for b in self.blocks if b.name.startswith("down_blocks."))
        ranks = [_block_rank(b.name, depth) for b in self.blocks]
        if ranks != list(range(len(self.blocks))) or [b.position_index for b in self.blocks] != ranks:
            raise ValueError("blocks must be ordered in, down 0..D-1, mid, up 0..D-1, out")
        seen = set(GRAPH_INPUTS)
        for nid in self._order:
            node = self.nodes[nid]
            if node.kind not in NODE_KINDS:
                raise ValueError(f"node {nid!r} has unknown kind {node.kind!r}")
            if not nid.startswith(self._block_of[nid] + "."):
                raise ValueError(f"node id {nid!r} must start with its block name")
            if node.parameterized != (node.macs > 0):
                raise ValueError(f"node {nid!r}: macs must be positive exactly for parameterized kinds")
            for src in node.inputs:
                if src not in seen:
                    raise ValueError(f"node {nid!r} reads {src!r} before it is produced (cycle or dangling edge)")
            seen.add(nid)
        if self.output not in self.nodes:
            raise ValueError(f"output node {self.output!r} not in graph")
        for up in self.blocks:
            if not up.name.startswith("up_blocks."):
                continue
            mirror = f"down_blocks.{depth - 1 - int(up.name.split('.')[1])}"
            skips = [(s, d) for s, d in self.edges if self._block_of.get(d) == up.name
                     and self._block_of.get(s, "").startswith("down_blocks.")]
            if len(skips) != 1 or self._block_of[skips[0][0]] != mirror:
                raise ValueError(f"{up.name} must receive exactly one skip edge from {mirror}")

    @property
    def execution_order(self) -> tuple[str, ...]:
        return self._order

    @property
    def depth(self) -> int:
        return sum(1 for b in self.blocks if b.name.startswith("down_blocks."))

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(src, nid) for nid in self._order for src in self.nodes[nid].inputs]

    @property
    def skip_edges(self) -> list[tuple[str, str]]:
        return [
            (s, d) for s, d in self.edges
            if self._block_of.get(s, "").startswith("down_blocks.")
            and self._block_of[d].startswith("up_blocks.")
        ]

    def block_of(self, node_id: str) -> str:
        return self._block_of[node_id]

    def block_position(self, node_id: str) -> int:
        return _block_rank(self._block_of[node_id], self.depth)

    def forward(self, z_t, t, cond=None, hooks: Hook | None = None) -> np.ndarray:
        return forward(self, z_t, t, cond, hooks)

    def with_nodes(self, replacements: dict[str, ModuleNode]) -> "ModuleGraph":
        for nid, node in replacements.items():
            if nid not in self.nodes or node.id != nid:
                raise KeyError(f"cannot replace unknown node {nid!r}")
        nodes = [replacements.get(nid, self.nodes[nid]) for nid in self._order]
        return ModuleGraph(self.blocks, nodes, self.output, self.latent_shape, self.time_dim, self.cond_dim)

    def __eq__(self, other):
        if not isinstance(other, ModuleGraph):
            return NotImplemented
        return (
            self.blocks == other.blocks
            and self.output == other.output
            and self.latent_shape == other.latent_shape
            and (self.time_dim, self.cond_dim) == (other.time_dim, other.cond_dim)
            and self._order == other._order
            and all(self.nodes[n] == other.nodes[n] for n in self._order)
        )

    __hash__ = None

    def __repr__(self):
        return (f"ModuleGraph(depth={self.depth}, nodes={len(self.nodes)}, "
                f"latent={self.latent_shape})")


def list_blocks(graph: ModuleGraph) -> list[BlockGroup]:
    return list(graph.blocks)


def list_parameterized_modules(graph: ModuleGraph) -> list[str]:
    return [nid for nid in graph.execution_order if graph.nodes[nid].parameterized]


# -- execution -------------------------------------------------------------------------


def timestep_embedding(t, n: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape ``[n, dim]``."""
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((n, 1))], axis=1)
    return emb


def divide_channels(x: np.ndarray, scales: np.ndarray) -> np.ndarray:
    shape = [1] * x.ndim
    shape[1] = -1
    return x / scales.reshape(shape)


def apply_node(node: ModuleNode, args: list, weight=None, bias=None) -> np.ndarray:
    """Evaluate one node on already-prepared inputs.

    ``weight`` and ``bias`` override the node's own parameters (quantized copies).
    The smoothing divide is not applied here; callers prepare the activation first.
    """
    kind = node.kind
    if node.parameterized:
        w = node.weight if weight is None else weight
        b = node.bias if bias is None else bias
        x = args[0]
        if kind in CONV_KINDS:
            a = node.attrs
            spec = ConvSpec(w.shape[1], w.shape[0], a["kernel"], a.get("stride", 1), a.get("padding", 0))
            if kind == "upsample_conv":
                x = resample(x, "up_nearest_2x")
            return conv2d(x, w, b, spec)
        if kind == "linear":
            return linear(x, w, b)
        # attention_projection: per-token linear over the channel axis
        if x.ndim != 4:
            raise ShapeError(f"{node.id}: attention projection expects [N,C,H,W], got {x.shape}")
        n, c, h, wd = x.shape
        tokens = x.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
        out = linear(tokens, w, b)
        return np.ascontiguousarray(out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2))
    if kind == "norm":
        return group_norm(args[0], node.attrs["groups"], node.params["gamma"], node.params["beta"],
                          node.attrs.get("eps", 1e-5))
    if kind == "activation":
        return silu(args[0])
    if kind == "combine":
        return combine(args[0], args[1], node.attrs["mode"])
    raise ValueError(f"unknown node kind {kind!r}")


def fp_node_fn(node: ModuleNode, args: list) -> np.ndarray:
    if node.smooth is not None:
        args = [divide_channels(args[0], node.smooth)]
    return apply_node(node, args)


def graph_inputs(graph: ModuleGraph, z: np.ndarray, t, cond: np.ndarray | None) -> dict:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 4 or z.shape[1:] != graph.latent_shape[1:]:
        raise ShapeError(f"latent must have shape [N, {', '.join(map(str, graph.latent_shape[1:]))}], got {z.shape}")
    n = z.shape[0]
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or not np.all(np.equal(np.mod(t_arr, 1), 0)):
        raise ValueError(f"timestep must be a positive integer, got {t}")
    if cond is None:
        cond = np.zeros((n, graph.cond_dim))
    cond = np.asarray(cond, dtype=np.float64)
    if cond.shape != (n, graph.cond_dim):
        raise ShapeError(f"cond must have shape ({n}, {graph.cond_dim}), got {cond.shape}")
    return {INPUT_LATENT: z, INPUT_TIME: timestep_embedding(t_arr, n, graph.time_dim), INPUT_COND: cond}


def execute(graph: ModuleGraph, env: dict, node_fn, hooks: Hook | None = None):
    """Run every node once in execution order and return the graph output."""
    values = dict(env)
    for nid in graph.execution_order:
        node = graph.nodes[nid]
        args = [values[src] for src in node.inputs]
        out = node_fn(node, args)
        if hooks is not None:
            hooks(node, args, out)
        values[nid] = out
    return values[graph.output]


def forward(graph: ModuleGraph, z_t, t, cond=None, hooks: Hook | None = None) -> np.ndarray:
    """Predict noise for latent ``z_t`` at timestep ``t``; ``cond=None`` is unconditional."""
    return execute(graph, graph_inputs(graph, z_t, t, cond), fp_node_fn, hooks)


# -- toy model -------------------------------------------------------------------------


def _groups_for(channels: int) -> int:
    for g in (4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class _Builder:
    def __init__(self, rng: np.random.Generator, bias: bool, channel_spread: float, outlier_gain: float):
        self.rng = rng
        self.bias = bias
        self.channel_spread = channel_spread
        self.outlier_gain = outlier_gain
        self.nodes: list[ModuleNode] = []
        self.blocks: list[BlockGroup] = []
        self._current: list[str] = []
        self.shape: dict[str, tuple] = {}

    def start_block(self, name: str):
        self._block_name = name
        self._current = []

    def end_block(self):
        self.blocks.append(BlockGroup(self._block_name, tuple(self._current), len(self.blocks)))

    def _add(self, node: ModuleNode, shape: tuple) -> str:
        self.nodes.append(node)
        self._current.append(node.id)
        self.shape[node.id] = shape
        return node.id

    def _weight(self, shape, fan_in):
        return self.rng.standard_normal(shape) / math.sqrt(fan_in)

    def _bias(self, n):
        return 0.1 * self.rng.standard_normal(n) if self.bias else np.zeros(n)

    def conv(self, nid, src, cout, kind="conv", kernel=3, stride=1):
        c, h, w = self.shape[src]
        padding = kernel // 2
        if kind == "upsample_conv":
            h, w = 2 * h, 2 * w
        spec = ConvSpec(c, cout, kernel, stride, padding)
        ho, wo = spec.output_extent(h), spec.output_extent(w)
        node = ModuleNode(
            nid, kind, (src,),
            params={"weight": self._weight((cout, c, kernel, kernel), c * kernel * kernel), "bias": self._bias(cout)},
            attrs={"kernel": kernel, "stride": stride, "padding": padding},
            macs=c * cout * kernel * kernel * ho * wo,
        )
        return self._add(node, (cout, ho, wo))

    def linear(self, nid, src, dout, kind="linear"):
        shape = self.shape[src]
        din = shape[0]
        tokens = shape[1] * shape[2] if len(shape) == 3 else 1
        weight, bias = self._weight((dout, din), din), self._bias(dout)
        if kind == "attention_projection" and self.outlier_gain != 1.0:
            j = self.rng.integers(dout)
            weight[j] *= self.outlier_gain
            bias[j] *= self.outlier_gain
        node = ModuleNode(nid, kind, (src,), params={"weight": weight, "bias": bias}, macs=din * dout * tokens)
        return self._add(node, (dout,) + tuple(shape[1:]))

    def norm(self, nid, src):
        c = self.shape[src][0]
        gamma = np.exp(self.channel_spread * self.rng.standard_normal(c)) if self.channel_spread else np.ones(c)
        node = ModuleNode(nid, "norm", (src,), params={"gamma": gamma, "beta": np.zeros(c)},
                          attrs={"groups": _groups_for(c), "eps": 1e-5})
        return self._add(node, self.shape[src])

    def act(self, nid, src):
        return self._add(ModuleNode(nid, "activation", (src,)), self.shape[src])

    def combine(self, nid, a, b, mode):
        sa, sb = self.shape[a], self.shape[b]
        shape = (sa[0] + sb[0],) + sa[1:] if mode == "concat_channels" else sa
        return self._add(ModuleNode(nid, "combine", (a, b), attrs={"mode": mode}), shape)

    def resnet(self, p, src, cout, emb):
        cin = self.shape[src][0]
        h = self.norm(f"{p}.norm1", src)
        h = self.act(f"{p}.act1", h)
        h = self.conv(f"{p}.conv1", h, cout)
        e = self.linear(f"{p}.time_emb_proj", emb, cout)
        h = self.combine(f"{p}.emb_add", h, e, "add_channel")
        h = self.norm(f"{p}.norm2", h)
        h = self.act(f"{p}.act2", h)
        h = self.conv(f"{p}.conv2", h, cout)
        skip = src
        if cin != cout:
            skip = self.conv(f"{p}.conv_shortcut", src, cout, kind="shortcut_conv", kernel=1)
        return self.combine(f"{p}.residual", h, skip, "add")

    def attention(self, p, src):
        c = self.shape[src][0]
        h = self.norm(f"{p}.norm", src)
        h = self.linear(f"{p}.proj_in", h, c, kind="attention_projection")
        h = self.act(f"{p}.act", h)
        h = self.linear(f"{p}.proj_out", h, c, kind="attention_projection")
        return self.combine(f"{p}.residual", h, src, "add")


def build_toy_unet(
    depth: int = 3,
    base_channels: int = 8,
    latent: Sequence[int] = (1, 4, 16, 16),
    seed: int = 0,
    bias: bool = True,
    channel_spread: float = 0.5,
    outlier_gain: float = 1.0,
) -> ModuleGraph:
    """Build a seeded toy UNet: ``depth`` down blocks, a mid block and ``depth`` up blocks.

    Level ``i`` has ``base_channels * 2**i`` channels. Weights are standard normal
    scaled by ``1/sqrt(fan_in)``. Norm gains are log-normal with log-std
    ``channel_spread`` so that some channels carry larger activations than others.
    """
    if depth < 2:
        raise ValueError(f"depth must be >= 2, got {depth}")
    if base_channels < 4:
        raise ValueError(f"base_channels must be >= 4, got {base_channels}")
    latent = tuple(int(d) for d in latent)
    if len(latent) != 4 or min(latent) < 1:
        raise ShapeError(f"latent must be a positive [N,C,H,W] shape, got {latent}")
    _, c_lat, height, width = latent
    step = 2 ** depth
    for name, extent in (("H", height), ("W", width)):
        if extent % step:
            raise ShapeError(f"latent {name}={extent} not divisible by 2**depth={step}")

    b = _Builder(np.random.default_rng(seed), bias, channel_spread, outlier_gain)
    time_dim = 2 * base_channels
    emb_dim = cond_dim = 4 * base_channels
    b.shape.update({INPUT_LATENT: (c_lat, height, width), INPUT_TIME: (time_dim,), INPUT_COND: (cond_dim,)})
    chans = [base_channels * 2 ** i for i in range(depth)]

    b.start_block("in_blocks")
    e = b.linear("in_blocks.time_embedding.linear_1", INPUT_TIME, emb_dim)
    e = b.act("in_blocks.time_embedding.act", e)
    e = b.linear("in_blocks.time_embedding.linear_2", e, emb_dim)
    e = b.combine("in_blocks.embedding.combine", e, INPUT_COND, "add")
    emb = b.act("in_blocks.embedding.act", e)
    x = b.conv("in_blocks.conv_in", INPUT_LATENT, chans[0])
    b.end_block()

    skips = []
    for i in range(depth):
        p = f"down_blocks.{i}"
        b.start_block(p)
        x = b.resnet(f"{p}.resnets.0", x, chans[i], emb)
        x = b.attention(f"{p}.attentions.0", x)
        skips.append(x)
        x = b.conv(f"{p}.downsamplers.0.conv", x, chans[i], kind="downsample_conv", stride=2)
        b.end_block()

    b.start_block("mid_block")
    x = b.resnet("mid_block.resnets.0", x, chans[-1], emb)
    x = b.attention("mid_block.attentions.0", x)
    x = b.resnet("mid_block.resnets.1", x, chans[-1], emb)
    b.end_block()

    for j in range(depth):
        m = depth - 1 - j
        p = f"up_blocks.{j}"
        b.start_block(p)
        x = b.conv(f"{p}.upsamplers.0.conv", x, b.shape[x][0], kind="upsample_conv")
        x = b.combine(f"{p}.skip_concat", x, skips[m], "concat_channels")
        x = b.resnet(f"{p}.resnets.0", x, chans[m], emb)
        x = b.attention(f"{p}.attentions.0", x)
        b.end_block()

    b.start_block("out_blocks")
    x = b.norm("out_blocks.norm_out", x)
    x = b.act("out_blocks.act_out", x)
    x = b.conv("out_blocks.conv_out", x, c_lat)
    b.end_block()

    return ModuleGraph(b.blocks, b.nodes, x, latent, time_dim, cond_dim)


# -- serialization ---------------------------------------------------------------------


def _node_to_obj(node: ModuleNode) -> dict:
    obj = {
        "id": node.id,
        "kind": node.kind,
        "inputs": list(node.inputs),
        "attrs": node.attrs,
        "macs": node.macs,
        "params": {k: formats.encode_array(v) for k, v in node.params.items()},
    }
    if node.smooth is not None:
        obj["smooth"] = formats.encode_array(node.smooth)
    return obj


def graph_to_obj(graph: ModuleGraph) -> dict:
    return {
        "latent_shape": list(graph.latent_shape),
        "time_dim": graph.time_dim,
        "cond_dim": graph.cond_dim,
        "output": graph.output,
        "blocks": [{"name": b.name, "position": b.position_index, "nodes": list(b.node_ids)} for b in graph.blocks],
        "nodes": [_node_to_obj(graph.nodes[n]) for n in graph.execution_order],
        "edges": [list(e) for e in graph.edges],
    }


def graph_from_obj(doc: dict) -> ModuleGraph:
    try:
        nodes = []
        for i, obj in enumerate(doc["nodes"]):
            where = f"node #{i} ({obj.get('id', '?')})"
            params = {k: formats.decode_array(v, where) for k, v in obj["params"].items()}
            smooth = formats.decode_array(obj["smooth"], where) if "smooth" in obj else None
            nodes.append(ModuleNode(obj["id"], obj["kind"], tuple(obj["inputs"]), params,
                                    dict(obj["attrs"]), int(obj["macs"]), smooth))
        blocks = [BlockGroup(b["name"], tuple(b["nodes"]), int(b["position"])) for b in doc["blocks"]]
        graph = ModuleGraph(blocks, nodes, doc["output"], doc["latent_shape"], doc["time_dim"], doc["cond_dim"])
    except formats.FormatError:
        raise
    except (KeyError, TypeError, AttributeError) as exc:
        raise formats.FormatError(f"graph stream missing or malformed field: {exc}") from None
    except ValueError as exc:
        raise formats.FormatError(f"invalid graph: {exc}") from None
    if "edges" in doc and [tuple(e) for e in doc["edges"]] != graph.edges:
        raise formats.FormatError("edge list does not match node inputs")
    return graph


def serialize(graph: ModuleGraph) -> bytes:
    return formats.dumps(GRAPH_FORMAT, graph_to_obj(graph)).encode("utf-8")


def deserialize(data: bytes | str) -> ModuleGraph:
    return graph_from_obj(formats.loads(data, GRAPH_FORMAT))


def save_graph(graph: ModuleGraph, path) -> None:
    formats.write_atomic(path, serialize(graph))


def load_graph(path) -> ModuleGraph:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
