"""
Depth-aware CNN toolkit - segmentation models
Declarative layer stacks (baseline and depth-aware presets), parameter
initialization and counting, the segmentation forward pass and checkpoints.
"""

import logging
import math
import struct
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from autograd import Graph, Node, Parameter
from errors import DatasetIOError, FormatError, ShapeError, SpecError
from nnops import IGNORE_LABEL, ConvSpec, PoolSpec
from similarity import DepthMap, SimilaritySpec
from tensor_core import DTYPE, Rng, Tensor, tensor_rand_uniform

logger = logging.getLogger(__name__)

LAYER_KINDS = ('conv', 'dconv', 'relu', 'maxpool', 'avgpool', 'davgpool', 'global_concat', 'classifier_1x1')
DEPTH_AWARE_KINDS = ('dconv', 'davgpool')
CONV_KINDS = ('conv', 'dconv', 'classifier_1x1')
POOL_KINDS = ('maxpool', 'avgpool', 'davgpool')

PRESETS = ('baseline-mini', 'dcnn-mini', 'dcnn-late-mini', 'dcnn-conv-only-mini')

CHECKPOINT_MAGIC = b'DCNN'
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ''
    conv: Optional[ConvSpec] = None
    pool: Optional[PoolSpec] = None
    similarity: Optional[SimilaritySpec] = None
    depth_level: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.kind in CONV_KINDS and self.conv is None:
            raise SpecError(f"layer {self.name or self.kind} needs a ConvSpec")
        if self.kind in POOL_KINDS and self.pool is None:
            raise SpecError(f"layer {self.name or self.kind} needs a PoolSpec")
        if self.kind == 'classifier_1x1' and (self.conv.kernel_h, self.conv.kernel_w) != (1, 1):
            raise SpecError("classifier_1x1 must use a 1x1 kernel")
        if self.kind in DEPTH_AWARE_KINDS and self.similarity is None:
            raise SpecError(f"depth-aware layer {self.name or self.kind} needs a SimilaritySpec")
        if self.depth_level < 0:
            raise SpecError("depth_level must be >= 0")

    @property
    def depth_aware(self) -> bool:
        return self.kind in DEPTH_AWARE_KINDS

    @property
    def parameter_count(self) -> int:
        return self.conv.parameter_count if self.kind in CONV_KINDS else 0


@dataclass(frozen=True)
class ModelSpec:
    layers: Tuple[LayerSpec, ...]
    num_classes: int
    preset: str = 'custom'
    in_channels: int = 3

    def __post_init__(self):
        if self.num_classes < 1:
            raise SpecError("num_classes must be >= 1")

    @property
    def max_depth_level(self) -> int:
        return max((l.depth_level for l in self.layers if l.depth_aware), default=0)


def _conv(name, cin, cout, kernel=3, dilation=1, depth_aware=False, level=0, sim=None) -> LayerSpec:
    padding = dilation * (kernel // 2)
    spec = ConvSpec(cin, cout, kernel, kernel, stride=1, padding=padding, dilation=dilation)
    if depth_aware:
        return LayerSpec('dconv', name, conv=spec, similarity=sim, depth_level=level)
    return LayerSpec('conv', name, conv=spec)


def preset_spec(preset: str, num_classes: int = 4, sim: Optional[SimilaritySpec] = None) -> ModelSpec:
    """
    Miniature baseline / depth-aware networks. Each block opens with the
    layer the depth-aware presets swap for a depth-aware convolution:

        conv1_x  C3-16-1 x2, maxpool        (level 0)
        conv2_x  C3-32-1 x2, maxpool        (level 1)
        conv3_x  C3-64-2 x2, avgpool        (level 2)
        conv6    C3-64-4, conv7 C1-64, globalpool+concat, classifier
    """
    if preset not in PRESETS:
        raise SpecError(f"unknown preset {preset!r}; choose from {PRESETS}")
    sim = sim or SimilaritySpec.exponential()
    depth_first = {
        'baseline-mini': (False, False, False, False),
        'dcnn-mini': (True, True, True, True),
        'dcnn-late-mini': (False, True, True, True),
        'dcnn-conv-only-mini': (True, True, True, True),
    }[preset]
    depth_pool = preset in ('dcnn-mini', 'dcnn-late-mini')
    maxpool = PoolSpec(3, 3, stride=2, padding=1, mode='max')
    avgpool = PoolSpec(3, 3, stride=1, padding=1, mode='depth_avg' if depth_pool else 'avg')
    layers = [
        _conv('conv1_1', 3, 16, depth_aware=depth_first[0], level=0, sim=sim), LayerSpec('relu', 'relu1_1'),
        _conv('conv1_2', 16, 16), LayerSpec('relu', 'relu1_2'),
        LayerSpec('maxpool', 'pool1', pool=maxpool),
        _conv('conv2_1', 16, 32, depth_aware=depth_first[1], level=1, sim=sim), LayerSpec('relu', 'relu2_1'),
        _conv('conv2_2', 32, 32), LayerSpec('relu', 'relu2_2'),
        LayerSpec('maxpool', 'pool2', pool=maxpool),
        _conv('conv3_1', 32, 64, dilation=2, depth_aware=depth_first[2], level=2, sim=sim), LayerSpec('relu', 'relu3_1'),
        _conv('conv3_2', 64, 64, dilation=2), LayerSpec('relu', 'relu3_2'),
        LayerSpec('davgpool', 'pool3', pool=avgpool, similarity=sim, depth_level=2) if depth_pool
        else LayerSpec('avgpool', 'pool3', pool=avgpool),
        _conv('conv6', 64, 64, dilation=4, depth_aware=depth_first[3], level=2, sim=sim), LayerSpec('relu', 'relu6'),
        _conv('conv7', 64, 64, kernel=1), LayerSpec('relu', 'relu7'),
        LayerSpec('global_concat', 'global_concat'),
        LayerSpec('classifier_1x1', 'classifier', conv=ConvSpec(128, num_classes, 1, 1)),
    ]
    return ModelSpec(tuple(layers), num_classes, preset)


def with_similarity(spec: ModelSpec, sim: SimilaritySpec) -> ModelSpec:
    layers = tuple(replace(l, similarity=sim) if l.depth_aware else l for l in spec.layers)
    return replace(spec, layers=layers)


def validate_spec(spec: ModelSpec) -> None:
    """Channel chaining and depth-level/resolution agreement (cumulative stride == 2**level)"""
    channels = spec.in_channels
    scale = 1
    names = set()
    for layer in spec.layers:
        if layer.name in names and layer.name:
            raise SpecError(f"duplicate layer name {layer.name!r}")
        names.add(layer.name)
        if layer.depth_aware and scale != 2 ** layer.depth_level:
            raise SpecError(f"layer {layer.name} reads depth level {layer.depth_level} "
                            f"but its input is downsampled by {scale}")
        if layer.kind in CONV_KINDS:
            if layer.conv.in_channels != channels:
                raise SpecError(f"layer {layer.name} expects {layer.conv.in_channels} channels, gets {channels}")
            channels = layer.conv.out_channels
            scale *= layer.conv.stride
        elif layer.kind in POOL_KINDS:
            if layer.pool.mode == 'global_avg':
                raise SpecError(f"layer {layer.name}: global pooling only appears via global_concat")
            scale *= layer.pool.stride
        elif layer.kind == 'global_concat':
            channels *= 2
    if channels != spec.num_classes:
        raise SpecError(f"stack ends with {channels} channels, expected num_classes={spec.num_classes}")


class Model:
    """Parameters plus the spec that wires them; single-threaded during forward/backward"""

    def __init__(self, spec: ModelSpec, params: Dict[str, Parameter]):
        self.spec = spec
        self.params = params

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def state_dict(self) -> Dict[str, Tensor]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, Tensor]) -> None:
        missing = set(self.params) - set(state)
        unexpected = set(state) - set(self.params)
        if missing or unexpected:
            raise SpecError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, value in state.items():
            if value.shape != self.params[name].value.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != model shape {self.params[name].value.shape}")
            self.params[name].value = np.array(value, dtype=DTYPE, copy=True)

    def build_graph(self, rgb: Tensor, pyramid: Sequence[DepthMap],
                    graph: Optional[Graph] = None) -> Tuple[Graph, Node]:
        """Declare the forward graph for one image; the RGB feed is named 'rgb'"""
        if rgb.ndim != 3 or rgb.shape[0] != self.spec.in_channels:
            raise ShapeError(f"expected input [{self.spec.in_channels}, h, w], got {rgb.shape}")
        graph = graph or Graph()
        x = graph.input('rgb')
        height, width = rgb.shape[1:]
        cur_h, cur_w = height, width
        for layer in self.spec.layers:
            depth = None
            if layer.depth_aware:
                if layer.depth_level >= len(pyramid):
                    raise SpecError(f"layer {layer.name} needs depth level {layer.depth_level}, "
                                    f"pyramid has {len(pyramid)} levels")
                depth = pyramid[layer.depth_level]
                if depth.shape != (cur_h, cur_w):
                    raise SpecError(f"layer {layer.name}: depth level {layer.depth_level} is {depth.shape}, "
                                    f"features are {(cur_h, cur_w)}")
            if layer.kind in CONV_KINDS:
                weight = graph.param(self.params[f"{layer.name}.weight"])
                bias = graph.param(self.params[f"{layer.name}.bias"]) if layer.conv.has_bias else None
                sim = layer.similarity if layer.kind == 'dconv' else None
                x = graph.conv(x, weight, bias, layer.conv, depth if sim else None, sim)
                cur_h, cur_w = layer.conv.output_hw(cur_h, cur_w)
            elif layer.kind == 'relu':
                x = graph.relu(x)
            elif layer.kind == 'maxpool':
                x = graph.maxpool(x, layer.pool)
                cur_h, cur_w = layer.pool.output_hw(cur_h, cur_w)
            elif layer.kind == 'avgpool':
                x = graph.avgpool(x, replace(layer.pool, mode='avg'))
                cur_h, cur_w = layer.pool.output_hw(cur_h, cur_w)
            elif layer.kind == 'davgpool':
                x = graph.avgpool(x, replace(layer.pool, mode='depth_avg'), depth, layer.similarity)
                cur_h, cur_w = layer.pool.output_hw(cur_h, cur_w)
            elif layer.kind == 'global_concat':
                x = graph.global_concat(x)
        if (cur_h, cur_w) != (height, width):
            x = graph.upsample(x, height, width)
        return graph, x

    def forward_segmentation(self, rgb: Tensor, pyramid: Sequence[DepthMap]) -> Tensor:
        graph, logits = self.build_graph(rgb, pyramid)
        graph.forward({'rgb': rgb})
        return logits.value

    def loss_graph(self, rgb: Tensor, pyramid: Sequence[DepthMap], labels: np.ndarray,
                   ignore_label: int = IGNORE_LABEL) -> Tuple[Graph, Node, Node]:
        graph, logits = self.build_graph(rgb, pyramid)
        loss = graph.cross_entropy(logits, labels, ignore_label)
        return graph, loss, logits


def build(spec: ModelSpec, rng: Rng) -> Model:
    """He-uniform conv weights, bound sqrt(6 / fan_in); zero biases"""
    validate_spec(spec)
    params: Dict[str, Parameter] = {}
    for layer in spec.layers:
        if layer.kind not in CONV_KINDS:
            continue
        bound = math.sqrt(6.0 / layer.conv.fan_in)
        weights = tensor_rand_uniform(rng, layer.conv.weight_shape, -bound, bound)
        params[f"{layer.name}.weight"] = Parameter(f"{layer.name}.weight", weights)
        if layer.conv.has_bias:
            params[f"{layer.name}.bias"] = Parameter(f"{layer.name}.bias", np.zeros(layer.conv.out_channels))
    logger.debug(f"🔍 built {spec.preset} with {sum(p.size for p in params.values())} parameters")
    return Model(spec, params)


def parameter_count(model) -> int:
    if isinstance(model, ModelSpec):
        return sum(l.parameter_count for l in model.layers)
    return sum(p.size for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpoints: "DCNN", u32 version, u32 count, then per tensor
# u32 name length, UTF-8 name, u32 ndim, u64 dims, float64 data (all little-endian)

def encode_checkpoint(state: Dict[str, Tensor]) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack('<II', CHECKPOINT_VERSION, len(state))]
    for name, value in state.items():
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<I', value.ndim))
        chunks.append(struct.pack(f'<{value.ndim}Q', *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype='<f8').tobytes())
    return b''.join(chunks)


def decode_checkpoint(blob: bytes, path: Optional[str] = None) -> Dict[str, Tensor]:
    offset = 0

    def take(size: int, what: str) -> bytes:
        nonlocal offset
        if offset + size > len(blob):
            raise FormatError(f"truncated checkpoint while reading {what}", offset, path)
        chunk = blob[offset:offset + size]
        offset += size
        return chunk

    if take(4, 'magic') != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0, path)
    version, count = struct.unpack('<II', take(8, 'header'))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4, path)
    state: Dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack('<I', take(4, 'name length'))
        start = offset
        try:
            name = take(name_len, 'name').decode('utf-8')
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", start, path)
        (ndim,) = struct.unpack('<I', take(4, 'ndim'))
        dims = struct.unpack(f'<{ndim}Q', take(8 * ndim, 'dims'))
        size = math.prod(dims)
        if 8 * size > len(blob) - offset:
            raise FormatError(f"{name} needs {8 * size} bytes, {len(blob) - offset} left", offset, path)
        data = np.frombuffer(take(8 * size, f'{name} data'), dtype='<f8')
        state[name] = data.astype(DTYPE).reshape(dims)
    if offset != len(blob):
        raise FormatError("trailing bytes after last tensor", offset, path)
    return state


def save_checkpoint(path: str, model: Model) -> None:
    try:
        with open(path, 'wb') as f:
            f.write(encode_checkpoint(model.state_dict()))
    except OSError as e:
        raise DatasetIOError(f"cannot write checkpoint ({e.strerror})", path)


def load_checkpoint(path: str) -> Dict[str, Tensor]:
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise DatasetIOError(f"cannot read checkpoint ({e.strerror})", path)
    return decode_checkpoint(blob, path)
