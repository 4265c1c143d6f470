"""Network assembly: encoder prototypes, the cascade decoder, baseline
decoders, and the ablation variants.

Networks are explicit DAGs of primitive nodes (conv, deconv, bn, relu,
maxpool, add, concat, average, softmax). A node may list several inputs;
layer nodes with multiple inputs concatenate them along the channel axis
before applying the layer, so structural edges in the emitted graph summary
correspond one-to-one with data dependencies.

Channel schedule: the decoding block that lands on scale s produces the
encoder's channel count at that scale by default (overridable through
``DecoderSpec.block_channels``). Every prediction head is a 3^D convolution
(padding 1) to ``num_classes`` logits at full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .ops import (BatchNormState, ConvParams, add_elementwise, batch_norm,
                  concat_channels, conv_forward, deconv_forward, maxpool,
                  mean_tensors, relu, softmax_channels)
from .tensor import Tensor

ENCODER_PROTOTYPES = ("linear", "residual", "dense")
DECODER_PROTOTYPES = ("cascade", "model_wise", "scale_wise", "layer_wise")


@dataclass
class EncoderSpec:
    prototype: str
    k: int
    channels: tuple[int, ...]
    convs_per_block: int = 2
    spatial_dims: int = 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.prototype not in ENCODER_PROTOTYPES:
            raise ConfigError(f"unknown encoder prototype {self.prototype!r}")
        if self.k < 2:
            raise ConfigError("encoder needs at least 2 blocks (k >= 2)")
        if len(self.channels) != self.k:
            raise ConfigError(f"channels must list {self.k} entries, "
                              f"got {len(self.channels)}")
        if any(c < 1 for c in self.channels):
            raise ConfigError("channel counts must be >= 1")
        if self.convs_per_block < 1:
            raise ConfigError("convs_per_block must be >= 1")
        if self.spatial_dims not in (2, 3):
            raise ConfigError("spatial_dims must be 2 or 3")
        if self.prototype == "dense":
            cpb = self.convs_per_block
            if self.channels[0] % (cpb + 1) != 0:
                raise ConfigError("dense encoder: first channel count must be "
                                  f"divisible by convs_per_block+1 ({cpb + 1})")
            for i in range(1, self.k):
                delta = self.channels[i] - self.channels[i - 1]
                if delta < cpb or delta % cpb != 0:
                    raise ConfigError(
                        "dense encoder: channel counts must grow by a positive "
                        f"multiple of convs_per_block between blocks {i} and {i + 1}")


@dataclass
class DecoderSpec:
    prototype: str
    with_side_branches: bool = True
    with_fusion_layer: bool = True
    with_db_sequence: bool = True
    num_classes: int = 2
    block_channels: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.prototype not in DECODER_PROTOTYPES:
            raise ConfigError(f"unknown decoder prototype {self.prototype!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.block_channels is not None:
            self.block_channels = tuple(int(c) for c in self.block_channels)
        if self.prototype != "cascade":
            defaults = (self.with_side_branches, self.with_fusion_layer,
                        self.with_db_sequence)
            if defaults != (True, True, True):
                raise ConfigError("ablation flags only apply to the cascade "
                                  "decoder prototype")


@dataclass
class NetworkOutput:
    """Fused probability map plus the raw per-branch class logits."""

    fused: Tensor
    branch_logits: list[Tensor]
    fused_logits: Tensor


# ---------------------------------------------------------------------------
# parameterized layers

class ConvLayer:
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 spatial_dims=2, dtype=np.float32, bias=True):
        self.params = ConvParams.create(in_channels, out_channels, kernel, stride,
                                        padding, spatial_dims, transposed=False,
                                        bias=bias, dtype=dtype)

    def forward(self, x: Tensor, name: str = "") -> Tensor:
        return conv_forward(x, self.params, name or "conv")

    @property
    def fan_in(self) -> int:
        return self.params.in_channels * int(np.prod(self.params.kernel))

    def named_parameters(self):
        out = [("weight", self.params.weights)]
        if self.params.bias is not None:
            out.append(("bias", self.params.bias))
        return out

    def named_buffers(self):
        return []


class DeconvLayer:
    def __init__(self, in_channels, out_channels, kernel, stride, padding,
                 spatial_dims=2, dtype=np.float32, bias=True):
        self.params = ConvParams.create(in_channels, out_channels, kernel, stride,
                                        padding, spatial_dims, transposed=True,
                                        bias=bias, dtype=dtype)

    def forward(self, x: Tensor, name: str = "") -> Tensor:
        return deconv_forward(x, self.params, name or "deconv")

    @property
    def fan_in(self) -> int:
        return self.params.in_channels * int(np.prod(self.params.kernel))

    def named_parameters(self):
        out = [("weight", self.params.weights)]
        if self.params.bias is not None:
            out.append(("bias", self.params.bias))
        return out

    def named_buffers(self):
        return []


class BatchNormLayer:
    def __init__(self, channels, dtype=np.float32, momentum=0.9, epsilon=1e-5):
        self.state = BatchNormState.create(channels, momentum, epsilon, dtype)

    def forward(self, x: Tensor, name: str = "") -> Tensor:
        return batch_norm(x, self.state, name or "batch_norm")

    def named_parameters(self):
        return [("gamma", self.state.gamma), ("beta", self.state.beta)]

    def named_buffers(self):
        return [("running_mean", self.state.running_mean),
                ("running_var", self.state.running_var)]


# ---------------------------------------------------------------------------
# graph machinery

@dataclass
class GraphNode:
    idx: int
    kind: str
    inputs: tuple[int, ...]
    layer: object | None
    name: str
    meta: dict = field(default_factory=dict)


class ComputeGraph:
    """Topologically ordered node list with a simple executor."""

    def __init__(self):
        self.nodes: list[GraphNode] = []

    def add(self, kind: str, inputs, layer=None, name: str = "", **meta) -> int:
        idx = len(self.nodes)
        inputs = tuple(int(i) for i in inputs)
        if any(i >= idx for i in inputs):
            raise ValueError("graph nodes must reference earlier nodes")
        self.nodes.append(GraphNode(idx, kind, inputs, layer, name, meta))
        return idx

    def run(self, x: Tensor, mode: str = "train") -> list:
        values: list = [None] * len(self.nodes)
        for node in self.nodes:
            if node.kind == "input":
                values[node.idx] = x
                continue
            ins = [values[i] for i in node.inputs]
            if node.kind in ("conv", "deconv", "bn", "relu", "maxpool"):
                xin = ins[0] if len(ins) == 1 else concat_channels(ins, node.name + ":concat")
                if node.kind == "bn":
                    node.layer.state.mode = mode
                    values[node.idx] = node.layer.forward(xin, node.name)
                elif node.kind == "relu":
                    values[node.idx] = relu(xin, node.name)
                elif node.kind == "maxpool":
                    values[node.idx] = maxpool(xin, node.meta["window"],
                                               node.meta["stride"], node.name)
                else:
                    values[node.idx] = node.layer.forward(xin, node.name)
            elif node.kind == "concat":
                values[node.idx] = concat_channels(ins, node.name)
            elif node.kind == "add":
                values[node.idx] = add_elementwise(ins[0], ins[1], node.name)
            elif node.kind == "average":
                values[node.idx] = mean_tensors(ins, node.name)
            elif node.kind == "softmax":
                values[node.idx] = softmax_channels(ins[0], node.name)
            else:
                raise ValueError(f"unknown node kind {node.kind!r}")
        return values

    def named_parameters(self):
        out = []
        for node in self.nodes:
            if node.layer is None:
                continue
            for leaf, tensor in node.layer.named_parameters():
                out.append((f"{node.name}/{leaf}", tensor))
        return out

    def named_buffers(self):
        out = []
        for node in self.nodes:
            if node.layer is None:
                continue
            for leaf, arr in node.layer.named_buffers():
                out.append((f"{node.name}/{leaf}", arr))
        return out

    def layers(self):
        return [(node.name, node.layer) for node in self.nodes
                if node.layer is not None]

    def edges(self) -> list[tuple[int, int]]:
        return [(src, node.idx) for node in self.nodes for src in node.inputs]

    def summary_nodes(self) -> list[dict]:
        out = []
        for node in self.nodes:
            entry = {"id": node.idx, "kind": node.kind, "name": node.name,
                     "inputs": list(node.inputs)}
            for key, value in node.meta.items():
                if isinstance(value, tuple):
                    value = list(value)
                entry[key] = value
            out.append(entry)
        return out


def _conv_bn_relu(g: ComputeGraph, inputs, in_ch, out_ch, kernel, stride, padding,
                  dims, dtype, prefix, scale, **meta) -> int:
    conv = ConvLayer(in_ch, out_ch, kernel, stride, padding, dims, dtype)
    cid = g.add("conv", inputs, conv, f"{prefix}/conv",
                in_channels=in_ch, out_channels=out_ch,
                kernel=conv.params.kernel, stride=conv.params.stride,
                padding=conv.params.padding, scale_divisor=scale, **meta)
    bid = g.add("bn", (cid,), BatchNormLayer(out_ch, dtype), f"{prefix}/norm",
                out_channels=out_ch, scale_divisor=scale, **meta)
    return g.add("relu", (bid,), None, f"{prefix}/relu",
                 out_channels=out_ch, scale_divisor=scale, **meta)


# ---------------------------------------------------------------------------
# encoders

def _build_encoder_graph(g: ComputeGraph, spec: EncoderSpec, in_channels, dtype,
                         input_id: int) -> list[int]:
    dims = spec.spatial_dims
    cpb = spec.convs_per_block
    chans = spec.channels
    features: list[int] = []
    cur, cur_ch = input_id, in_channels

    for i in range(1, spec.k + 1):
        scale = 2 ** (i - 1)
        prefix = f"encoder/stage{i}"
        if spec.prototype == "linear":
            if i > 1:
                cur = g.add("maxpool", (cur,), None, f"{prefix}/pool",
                            window=(2,) * dims, stride=(2,) * dims,
                            out_channels=cur_ch, scale_divisor=scale)
            for u in range(1, cpb + 1):
                out_ch = chans[i - 1]
                cur = _conv_bn_relu(g, (cur,), cur_ch, out_ch, 3, 1, 1, dims, dtype,
                                    f"{prefix}/layer{u}", scale)
                cur_ch = out_ch
        elif spec.prototype == "residual":
            if i == 1:
                cur = _conv_bn_relu(g, (cur,), cur_ch, chans[0], 3, 1, 1, dims, dtype,
                                    f"{prefix}/stem", scale, role="stem")
            else:
                cur = _conv_bn_relu(g, (cur,), cur_ch, chans[i - 1], 2, 2, 0, dims,
                                    dtype, f"{prefix}/down", scale, role="downsample")
            cur_ch = chans[i - 1]
            unit_in = cur
            for u in range(1, cpb + 1):
                cur = _conv_bn_relu(g, (cur,), cur_ch, cur_ch, 3, 1, 1, dims, dtype,
                                    f"{prefix}/unit/layer{u}", scale)
            cur = g.add("add", (unit_in, cur), None, f"{prefix}/residual_add",
                        out_channels=cur_ch, scale_divisor=scale)
        else:  # dense
            if i == 1:
                growth = chans[0] // (cpb + 1)
                cur = _conv_bn_relu(g, (cur,), cur_ch, growth, 3, 1, 1, dims, dtype,
                                    f"{prefix}/stem", scale, role="stem")
                cur_ch = growth
            else:
                growth = (chans[i - 1] - chans[i - 2]) // cpb
                cur = _conv_bn_relu(g, (cur,), cur_ch, cur_ch, 2, 2, 0, dims, dtype,
                                    f"{prefix}/down", scale, role="downsample")
            collected = [cur]
            for u in range(1, cpb + 1):
                unit = _conv_bn_relu(g, tuple(collected), cur_ch, growth, 3, 1, 1,
                                     dims, dtype, f"{prefix}/unit{u}", scale)
                collected.append(unit)
                cur_ch += growth
            cur = g.add("concat", tuple(collected), None, f"{prefix}/concat",
                        out_channels=cur_ch, scale_divisor=scale)
        assert cur_ch == chans[i - 1]
        features.append(cur)
    return features


class Encoder:
    """Runnable encoder exposing the per-scale feature maps."""

    def __init__(self, graph: ComputeGraph, spec: EncoderSpec, in_channels: int,
                 input_id: int, feature_ids: list[int], dtype):
        self.graph = graph
        self.spec = spec
        self.in_channels = in_channels
        self.input_id = input_id
        self.feature_ids = feature_ids
        self.dtype = dtype

    def forward(self, x: Tensor, mode: str = "train") -> list[Tensor]:
        _validate_input(x, self.in_channels, self.spec.k, self.spec.spatial_dims)
        values = self.graph.run(x, mode)
        return [values[i] for i in self.feature_ids]

    def named_parameters(self):
        return self.graph.named_parameters()

    def named_buffers(self):
        return self.graph.named_buffers()

    def layers(self):
        return self.graph.layers()

    def graph_summary(self) -> dict:
        return {
            "kind": "encoder",
            "spatial_dims": self.spec.spatial_dims,
            "in_channels": self.in_channels,
            "encoder": _encoder_dict(self.spec),
            "nodes": self.graph.summary_nodes(),
            "edges": [list(e) for e in self.graph.edges()],
            "feature_nodes": list(self.feature_ids),
            "param_count": sum(t.size for _, t in self.graph.named_parameters()),
        }


def build_encoder(spec: EncoderSpec, in_channels: int = 1, dtype=np.float32,
                  image_size=None) -> Encoder:
    """Build an encoder whose block i output sits at spatial scale 1/2^(i-1)."""
    if image_size is not None:
        _validate_image_size(image_size, spec.k, spec.spatial_dims)
    g = ComputeGraph()
    input_id = g.add("input", (), None, "input", out_channels=in_channels,
                     scale_divisor=1)
    features = _build_encoder_graph(g, spec, in_channels, dtype, input_id)
    return Encoder(g, spec, in_channels, input_id, features, dtype)


# ---------------------------------------------------------------------------
# decoding block

class DecodingBlock:
    """Upsampling unit: deconv(4^D, stride 2, pad 1)+BN+ReLU followed by two
    (3^D conv, pad 1)+BN+ReLU stages. Output spatial extents exactly double."""

    def __init__(self, in_channels, out_channels, spatial_dims=2, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.spatial_dims = spatial_dims
        self.deconv = DeconvLayer(in_channels, out_channels, 4, 2, 1, spatial_dims,
                                  dtype)
        self.norm0 = BatchNormLayer(out_channels, dtype)
        self.conv1 = ConvLayer(out_channels, out_channels, 3, 1, 1, spatial_dims,
                               dtype)
        self.norm1 = BatchNormLayer(out_channels, dtype)
        self.conv2 = ConvLayer(out_channels, out_channels, 3, 1, 1, spatial_dims,
                               dtype)
        self.norm2 = BatchNormLayer(out_channels, dtype)

    def conv_layers(self):
        return [self.deconv, self.conv1, self.conv2]

    def norm_layers(self):
        return [self.norm0, self.norm1, self.norm2]

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        for norm in self.norm_layers():
            norm.state.mode = mode
        h = relu(self.norm0.forward(self.deconv.forward(x)))
        h = relu(self.norm1.forward(self.conv1.forward(h)))
        return relu(self.norm2.forward(self.conv2.forward(h)))

    def named_parameters(self, prefix: str = "block"):
        out = []
        for sub, layer in (("deconv", self.deconv), ("norm0", self.norm0),
                           ("conv1", self.conv1), ("norm1", self.norm1),
                           ("conv2", self.conv2), ("norm2", self.norm2)):
            for leaf, tensor in layer.named_parameters():
                out.append((f"{prefix}/{sub}/{leaf}", tensor))
        return out


def build_decoding_block(in_channels: int, out_channels: int, spatial_dims: int = 2,
                         dtype=np.float32) -> DecodingBlock:
    if in_channels < 1 or out_channels < 1:
        raise ConfigError("decoding block channel counts must be positive")
    return DecodingBlock(in_channels, out_channels, spatial_dims, dtype)


def _add_decoding_block(g: ComputeGraph, inputs, in_ch, out_ch, dims, dtype,
                        prefix, scale_after, branch, block_index) -> int:
    block = DecodingBlock(in_ch, out_ch, dims, dtype)
    label = f"branch{branch}/block{block_index}"
    common = {"branch": branch, "block": label, "scale_divisor": scale_after}
    cur = g.add("deconv", inputs, block.deconv, f"{prefix}/deconv",
                in_channels=in_ch, out_channels=out_ch,
                kernel=block.deconv.params.kernel, stride=block.deconv.params.stride,
                padding=block.deconv.params.padding, **common)
    cur = g.add("bn", (cur,), block.norm0, f"{prefix}/norm0",
                out_channels=out_ch, **common)
    cur = g.add("relu", (cur,), None, f"{prefix}/relu0", out_channels=out_ch, **common)
    for j, (conv, norm) in enumerate(((block.conv1, block.norm1),
                                      (block.conv2, block.norm2)), start=1):
        cur = g.add("conv", (cur,), conv, f"{prefix}/conv{j}",
                    in_channels=out_ch, out_channels=out_ch,
                    kernel=conv.params.kernel, stride=conv.params.stride,
                    padding=conv.params.padding, **common)
        cur = g.add("bn", (cur,), norm, f"{prefix}/norm{j}",
                    out_channels=out_ch, **common)
        cur = g.add("relu", (cur,), None, f"{prefix}/relu{j}",
                    out_channels=out_ch, **common)
    return cur


def _add_head(g: ComputeGraph, inputs, in_ch, classes, dims, dtype, branch) -> int:
    head = ConvLayer(in_ch, classes, 3, 1, 1, dims, dtype)
    return g.add("conv", inputs, head, f"decoder/branch{branch}/head",
                 in_channels=in_ch, out_channels=classes,
                 kernel=head.params.kernel, stride=head.params.stride,
                 padding=head.params.padding, scale_divisor=1,
                 branch=branch, role="head")


# ---------------------------------------------------------------------------
# full networks

class Network:
    """Encoder plus decoder, runnable end to end."""

    def __init__(self, graph, enc_spec, dec_spec, in_channels, input_id,
                 encoder_feature_ids, branch_head_ids, fused_logits_id, fused_id,
                 decoding_blocks, side_branches, fusion_node, dtype):
        self.graph = graph
        self.enc_spec = enc_spec
        self.dec_spec = dec_spec
        self.in_channels = in_channels
        self.input_id = input_id
        self.encoder_feature_ids = encoder_feature_ids
        self.branch_head_ids = branch_head_ids
        self.fused_logits_id = fused_logits_id
        self.fused_id = fused_id
        self.decoding_blocks = decoding_blocks
        self.side_branches = side_branches
        self.fusion_node = fusion_node
        self.dtype = dtype

    @property
    def num_classes(self) -> int:
        return self.dec_spec.num_classes

    @property
    def spatial_dims(self) -> int:
        return self.enc_spec.spatial_dims

    def forward(self, x: Tensor, mode: str = "train") -> NetworkOutput:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        _validate_input(x, self.in_channels, self.enc_spec.k, self.spatial_dims)
        values = self.graph.run(x, mode)
        return NetworkOutput(
            fused=values[self.fused_id],
            branch_logits=[values[i] for i in self.branch_head_ids],
            fused_logits=values[self.fused_logits_id],
        )

    def named_parameters(self):
        return self.graph.named_parameters()

    def named_buffers(self):
        return self.graph.named_buffers()

    def layers(self):
        return self.graph.layers()

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def graph_summary(self) -> dict:
        return {
            "kind": "network",
            "spatial_dims": self.spatial_dims,
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "encoder": _encoder_dict(self.enc_spec),
            "decoder": _decoder_dict(self.dec_spec),
            "nodes": self.graph.summary_nodes(),
            "edges": [list(e) for e in self.graph.edges()],
            "encoder_features": list(self.encoder_feature_ids),
            "decoding_blocks": list(self.decoding_blocks),
            "branches": [{"index": i + 1, "head_node": h,
                          "num_blocks": sum(1 for b in self.decoding_blocks
                                            if b["branch"] == i + 1)}
                         for i, h in enumerate(self.branch_head_ids)],
            "side_branches": list(self.side_branches),
            "fusion": {"present": self.fusion_node is not None,
                       "node": self.fusion_node},
            "param_count": self.param_count(),
        }


def _encoder_dict(spec: EncoderSpec) -> dict:
    return {"prototype": spec.prototype, "k": spec.k,
            "channels": list(spec.channels),
            "convs_per_block": spec.convs_per_block,
            "spatial_dims": spec.spatial_dims}


def _decoder_dict(spec: DecoderSpec) -> dict:
    return {"prototype": spec.prototype,
            "with_side_branches": spec.with_side_branches,
            "with_fusion_layer": spec.with_fusion_layer,
            "with_db_sequence": spec.with_db_sequence,
            "num_classes": spec.num_classes,
            "block_channels": (None if spec.block_channels is None
                               else list(spec.block_channels))}


def _validate_image_size(image_size, k: int, dims: int) -> None:
    image_size = tuple(int(s) for s in image_size)
    if len(image_size) != dims:
        raise ShapeError(f"image size {image_size} must have {dims} dims")
    divisor = 2 ** (k - 1)
    bad = [s for s in image_size if s % divisor != 0 or s < divisor]
    if bad:
        raise ShapeError(
            f"input spatial extents {image_size} must be divisible by "
            f"2^(k-1) = {divisor} for k = {k} encoder scales")


def _validate_input(x: Tensor, in_channels: int, k: int, dims: int) -> None:
    if x.data.ndim != dims + 2:
        raise ShapeError(f"input must be (batch, channels, {dims} spatial dims), "
                         f"got shape {x.shape}")
    if x.shape[1] != in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, network expects "
                         f"{in_channels}")
    _validate_image_size(x.shape[2:], k, dims)


def _land_channels(enc_spec: EncoderSpec, dec_spec: DecoderSpec, scale_index: int) -> int:
    """Output channels of decoding blocks landing on the given scale (1-based)."""
    if dec_spec.block_channels is not None:
        return dec_spec.block_channels[scale_index - 1]
    return enc_spec.channels[scale_index - 1]


def _build_branches(g, enc_spec, dec_spec, enc_ids, dtype, *, side_branches: bool,
                    collapse_sequences: bool):
    """Decoding branches k..2 plus the full-resolution head branch 1.

    Returns (head ids ordered branch 1..k, decoding block records, side-branch
    records). Branch i consists of i-1 decoding blocks (the first taking the
    scale-i encoder feature plus, when side branches are on and i < k, the
    guidance output of branch i+1's first block) followed by a head. When
    collapse_sequences is true, blocks 2..i-1 of branch i >= 3 are replaced by
    one upsampling deconvolution with kernel 2^(i-2)+2 and stride 2^(i-2).
    """
    dims = enc_spec.spatial_dims
    classes = dec_spec.num_classes
    k = enc_spec.k
    heads: dict[int, int] = {}
    blocks: list[dict] = []
    sides: list[dict] = []
    first_block_out: dict[int, int] = {}

    for i in range(k, 1, -1):
        enc_feat = enc_ids[i - 1]
        in_ch = enc_spec.channels[i - 1]
        inputs = (enc_feat,)
        if side_branches and i < k:
            inputs = (first_block_out[i + 1], enc_feat)
            in_ch += _land_channels(enc_spec, dec_spec, i)
            sides.append({"from_branch": i + 1, "into_branch": i,
                          "from_node": first_block_out[i + 1],
                          "into_block": f"branch{i}/block1"})
        out_ch = _land_channels(enc_spec, dec_spec, i - 1)
        cur = _add_decoding_block(g, inputs, in_ch, out_ch, dims, dtype,
                                  f"decoder/branch{i}/block1", 2 ** (i - 2), i, 1)
        first_block_out[i] = cur
        blocks.append({"branch": i, "index": 1, "name": f"branch{i}/block1"})
        cur_ch = out_ch

        if collapse_sequences and i >= 3:
            t = 2 ** (i - 2) + 2
            stride = 2 ** (i - 2)
            up = DeconvLayer(cur_ch, _land_channels(enc_spec, dec_spec, 1), t,
                             stride, 1, dims, dtype)
            cur = g.add("deconv", (cur,), up, f"decoder/branch{i}/upsample",
                        in_channels=cur_ch,
                        out_channels=up.params.out_channels,
                        kernel=up.params.kernel, stride=up.params.stride,
                        padding=up.params.padding, scale_divisor=1,
                        branch=i, role="collapsed_upsample")
            cur_ch = up.params.out_channels
        else:
            for j in range(2, i):
                out_ch = _land_channels(enc_spec, dec_spec, i - j)
                cur = _add_decoding_block(g, (cur,), cur_ch, out_ch, dims, dtype,
                                          f"decoder/branch{i}/block{j}",
                                          2 ** (i - j - 1), i, j)
                blocks.append({"branch": i, "index": j,
                               "name": f"branch{i}/block{j}"})
                cur_ch = out_ch
        heads[i] = _add_head(g, (cur,), cur_ch, classes, dims, dtype, i)

    heads[1] = _add_head(g, (enc_ids[0],), enc_spec.channels[0], classes, dims,
                         dtype, 1)
    ordered = [heads[i] for i in range(1, k + 1)]
    return ordered, blocks, sides


def _finish_network(g, enc_spec, dec_spec, in_channels, input_id, enc_ids,
                    head_ids, blocks, sides, dtype, *, fusion: bool):
    classes = dec_spec.num_classes
    dims = enc_spec.spatial_dims
    fusion_node = None
    if fusion and len(head_ids) > 1:
        layer = ConvLayer(len(head_ids) * classes, classes, 1, 1, 0, dims, dtype)
        fused_logits = g.add("conv", tuple(head_ids), layer, "decoder/fusion",
                             in_channels=len(head_ids) * classes,
                             out_channels=classes, kernel=layer.params.kernel,
                             stride=layer.params.stride,
                             padding=layer.params.padding, scale_divisor=1,
                             role="fusion")
        fusion_node = fused_logits
    elif len(head_ids) > 1:
        fused_logits = g.add("average", tuple(head_ids), None,
                             "decoder/branch_average", out_channels=classes,
                             scale_divisor=1)
    else:
        fused_logits = head_ids[0]
    fused = g.add("softmax", (fused_logits,), None, "output/softmax",
                  out_channels=classes, scale_divisor=1)
    return Network(g, enc_spec, dec_spec, in_channels, input_id, enc_ids,
                   head_ids, fused_logits, fused, blocks, sides, fusion_node,
                   dtype)


def build_cascade_decoder(enc_spec: EncoderSpec, dec_spec: DecoderSpec,
                          in_channels: int = 1, dtype=np.float32,
                          image_size=None) -> Network:
    """Cascade network: one decoding branch per encoder scale, coarse-to-fine
    side branches between the first blocks, and a learned fusion layer."""
    if dec_spec.prototype != "cascade":
        raise ConfigError("build_cascade_decoder needs decoder prototype 'cascade'")
    _check_block_channels(enc_spec, dec_spec)
    if image_size is not None:
        _validate_image_size(image_size, enc_spec.k, enc_spec.spatial_dims)
    g = ComputeGraph()
    input_id = g.add("input", (), None, "input", out_channels=in_channels,
                     scale_divisor=1)
    enc_ids = _build_encoder_graph(g, enc_spec, in_channels, dtype, input_id)
    head_ids, blocks, sides = _build_branches(
        g, enc_spec, dec_spec, enc_ids, dtype,
        side_branches=dec_spec.with_side_branches,
        collapse_sequences=not dec_spec.with_db_sequence)
    return _finish_network(g, enc_spec, dec_spec, in_channels, input_id, enc_ids,
                           head_ids, blocks, sides, dtype,
                           fusion=dec_spec.with_fusion_layer)


def build_baseline_decoder(enc_spec: EncoderSpec, dec_spec: DecoderSpec,
                           in_channels: int = 1, dtype=np.float32,
                           image_size=None) -> Network:
    """One of the three baseline prototypes: model_wise, scale_wise, layer_wise."""
    if dec_spec.prototype == "cascade":
        raise ConfigError("use build_cascade_decoder for the cascade prototype")
    _check_block_channels(enc_spec, dec_spec)
    if image_size is not None:
        _validate_image_size(image_size, enc_spec.k, enc_spec.spatial_dims)
    dims = enc_spec.spatial_dims
    classes = dec_spec.num_classes
    k = enc_spec.k
    g = ComputeGraph()
    input_id = g.add("input", (), None, "input", out_channels=in_channels,
                     scale_divisor=1)
    enc_ids = _build_encoder_graph(g, enc_spec, in_channels, dtype, input_id)

    if dec_spec.prototype == "scale_wise":
        head_ids, blocks, sides = _build_branches(
            g, enc_spec, dec_spec, enc_ids, dtype,
            side_branches=False, collapse_sequences=False)
        return _finish_network(g, enc_spec, dec_spec, in_channels, input_id,
                               enc_ids, head_ids, blocks, sides, dtype, fusion=True)

    blocks: list[dict] = []
    if dec_spec.prototype == "model_wise":
        cur = enc_ids[k - 1]
        cur_ch = enc_spec.channels[k - 1]
        for j in range(1, k):
            out_ch = _land_channels(enc_spec, dec_spec, k - j)
            cur = _add_decoding_block(g, (cur,), cur_ch, out_ch, dims, dtype,
                                      f"decoder/branch1/block{j}",
                                      2 ** (k - j - 1), 1, j)
            blocks.append({"branch": 1, "index": j, "name": f"branch1/block{j}"})
            cur_ch = out_ch
        head = _add_head(g, (cur,), cur_ch, classes, dims, dtype, 1)
    else:  # layer_wise
        cur = enc_ids[k - 1]
        cur_ch = enc_spec.channels[k - 1]
        for j in range(1, k):
            inputs = (cur,)
            in_ch = cur_ch
            if j > 1:
                skip = enc_ids[k - j]  # feature at the scale the path reached
                inputs = (cur, skip)
                in_ch += enc_spec.channels[k - j]
            out_ch = _land_channels(enc_spec, dec_spec, k - j)
            cur = _add_decoding_block(g, inputs, in_ch, out_ch, dims, dtype,
                                      f"decoder/branch1/block{j}",
                                      2 ** (k - j - 1), 1, j)
            blocks.append({"branch": 1, "index": j, "name": f"branch1/block{j}"})
            cur_ch = out_ch
        head = _add_head(g, (cur, enc_ids[0]), cur_ch + enc_spec.channels[0],
                         classes, dims, dtype, 1)
    return _finish_network(g, enc_spec, dec_spec, in_channels, input_id, enc_ids,
                           [head], blocks, [], dtype, fusion=False)


def _check_block_channels(enc_spec: EncoderSpec, dec_spec: DecoderSpec) -> None:
    if dec_spec.block_channels is not None:
        if len(dec_spec.block_channels) != enc_spec.k - 1:
            raise ConfigError(f"block_channels must list k-1 = {enc_spec.k - 1} "
                              "entries (one per landing scale)")
        if any(c < 1 for c in dec_spec.block_channels):
            raise ConfigError("block_channels entries must be >= 1")


def build_network(enc_spec: EncoderSpec, dec_spec: DecoderSpec,
                  in_channels: int = 1, dtype=np.float32,
                  image_size=None) -> Network:
    if dec_spec.prototype == "cascade":
        return build_cascade_decoder(enc_spec, dec_spec, in_channels, dtype,
                                     image_size)
    return build_baseline_decoder(enc_spec, dec_spec, in_channels, dtype,
                                  image_size)


def collapse_db_sequence(net: Network) -> Network:
    """The decoding-block-sequence ablation as a graph transform.

    Rebuilds the network with blocks 2..i-1 of every branch i >= 3 replaced by
    a single deconvolution (kernel 2^(i-2)+2, stride 2^(i-2), padding 1) that
    lifts the first block's output straight to full resolution. Parameters of
    the returned network are freshly allocated.
    """
    if net.dec_spec.prototype != "cascade":
        raise ConfigError("the decoding-block-sequence ablation applies only to "
                          "the cascade decoder")
    dec = replace(net.dec_spec, with_db_sequence=False)
    return build_cascade_decoder(net.enc_spec, dec, net.in_channels, net.dtype)


def forward_network(net: Network, x: Tensor, mode: str = "train") -> NetworkOutput:
    """Run the network; in infer mode batch norm uses running statistics."""
    return net.forward(x, mode)


def average_logits(branch_logits) -> Tensor:
    """Arithmetic mean of branch logits (the fusion-free combination path)."""
    return mean_tensors(branch_logits, "branch_average")
