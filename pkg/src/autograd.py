"""
Depth-aware CNN toolkit - reverse-mode tape
A static graph is declared node by node, evaluated by forward() and
differentiated by backward(). Graphs are rebuilt per batch; saved tensors
are never mutated in place.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

import nnops
from errors import GraphError, ShapeError, StateError
from nnops import ConvKernel, ConvSpec, PoolSpec
from similarity import DepthMap, SimilaritySpec
from tensor_core import DTYPE, Tensor

logger = logging.getLogger(__name__)


@dataclass
class Parameter:
    name: str
    value: Tensor
    grad: Optional[Tensor] = None
    trainable: bool = True

    def __post_init__(self):
        self.value = np.array(self.value, dtype=DTYPE, copy=True)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"parameter {self.name}: gradient {self.grad.shape} != value {self.value.shape}")

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


@dataclass
class Node:
    id: int
    op: str
    inputs: Tuple[int, ...]
    attrs: Dict[str, Any] = field(default_factory=dict)
    value: Optional[Tensor] = None
    ctx: Any = None


def zero_grad(params: Iterable[Parameter]) -> None:
    for param in params:
        param.zero_grad()


# ---------------------------------------------------------------------------
# op table: forward(node, inputs) -> (value, ctx); backward(node, inputs, grad) -> input grads

def _fwd_conv(node, xs):
    kernel = ConvKernel(xs[1], xs[2] if len(xs) > 2 else None)
    return nnops.conv_forward_saved(node.attrs['spec'], kernel, xs[0],
                                    node.attrs.get('depth'), node.attrs.get('sim'))


def _bwd_conv(node, xs, grad):
    kernel = ConvKernel(xs[1], xs[2] if len(xs) > 2 else None)
    grad_x, grad_w, grad_b = nnops.conv_backward_saved(node.attrs['spec'], kernel, node.ctx, grad)
    return (grad_x, grad_w) if grad_b is None else (grad_x, grad_w, grad_b)


def _fwd_relu(node, xs):
    return nnops.relu_forward(xs[0]), xs[0] > 0


def _bwd_relu(node, xs, grad):
    return (grad * node.ctx,)


def _fwd_maxpool(node, xs):
    return nnops.max_pool_forward_saved(node.attrs['spec'], xs[0])


def _bwd_maxpool(node, xs, grad):
    return (nnops.max_pool_backward_saved(node.attrs['spec'], node.ctx, grad),)


def _fwd_avgpool(node, xs):
    return nnops.avg_pool_forward_saved(node.attrs['spec'], xs[0], node.attrs.get('depth'), node.attrs.get('sim'))


def _bwd_avgpool(node, xs, grad):
    return (nnops.avg_pool_backward_saved(node.attrs['spec'], node.ctx, grad),)


def _fwd_global_concat(node, xs):
    return nnops.global_pool_concat(xs[0]), None


def _bwd_global_concat(node, xs, grad):
    return (nnops.global_pool_concat_backward(xs[0], grad),)


def _fwd_upsample(node, xs):
    return nnops.upsample_nearest(xs[0], node.attrs['out_h'], node.attrs['out_w']), None


def _bwd_upsample(node, xs, grad):
    return (nnops.upsample_nearest_backward(xs[0].shape, grad),)


def _fwd_cross_entropy(node, xs):
    loss, grad = nnops.softmax_cross_entropy(xs[0], node.attrs['labels'], node.attrs['ignore_label'])
    return np.array(loss, dtype=DTYPE), grad


def _bwd_cross_entropy(node, xs, grad):
    return (node.ctx * float(grad),)


def _fwd_dot(node, xs):
    return np.array(np.sum(xs[0] * node.attrs['weights']), dtype=DTYPE), None


def _bwd_dot(node, xs, grad):
    return (node.attrs['weights'] * float(grad),)


def _fwd_add(node, xs):
    if xs[0].shape != xs[1].shape:
        raise ShapeError(f"add: shape mismatch {xs[0].shape} vs {xs[1].shape}")
    return xs[0] + xs[1], None


def _bwd_add(node, xs, grad):
    return grad, grad


OPS: Dict[str, Tuple[Callable, Callable]] = {
    'conv': (_fwd_conv, _bwd_conv),
    'relu': (_fwd_relu, _bwd_relu),
    'maxpool': (_fwd_maxpool, _bwd_maxpool),
    'avgpool': (_fwd_avgpool, _bwd_avgpool),
    'global_concat': (_fwd_global_concat, _bwd_global_concat),
    'upsample': (_fwd_upsample, _bwd_upsample),
    'cross_entropy': (_fwd_cross_entropy, _bwd_cross_entropy),
    'dot': (_fwd_dot, _bwd_dot),
    'add': (_fwd_add, _bwd_add),
}

LEAF_OPS = ('input', 'param')


class Graph:
    """Static computation graph; single-threaded, one instance per batch"""

    def __init__(self):
        self.nodes: List[Node] = []
        self._param_nodes: Dict[int, int] = {}
        self._input_nodes: Dict[str, int] = {}
        self.input_grads: Dict[str, Tensor] = {}
        self.forward_done = False

    def _add(self, op: str, inputs: Tuple[Node, ...], **attrs) -> Node:
        if op not in OPS and op not in LEAF_OPS:
            raise GraphError(f"unknown op kind {op!r}")
        ids = []
        for item in inputs:
            if not isinstance(item, Node) or item.id >= len(self.nodes) or self.nodes[item.id] is not item:
                raise GraphError(f"{op}: input is not a node of this graph")
            ids.append(item.id)
        node = Node(id=len(self.nodes), op=op, inputs=tuple(ids), attrs=attrs)
        self.nodes.append(node)
        self.forward_done = False
        return node

    # -- leaves --------------------------------------------------------------

    def input(self, name: str) -> Node:
        if name in self._input_nodes:
            return self.nodes[self._input_nodes[name]]
        node = self._add('input', (), name=name)
        self._input_nodes[name] = node.id
        return node

    def param(self, parameter: Parameter) -> Node:
        """One node per parameter, so shared parameters accumulate through every consumer"""
        key = id(parameter)
        if key in self._param_nodes:
            return self.nodes[self._param_nodes[key]]
        node = self._add('param', (), parameter=parameter)
        self._param_nodes[key] = node.id
        return node

    # -- layers --------------------------------------------------------------

    def conv(self, x: Node, weight: Node, bias: Optional[Node], spec: ConvSpec,
             depth: Optional[DepthMap] = None, sim: Optional[SimilaritySpec] = None) -> Node:
        inputs = (x, weight) if bias is None else (x, weight, bias)
        return self._add('conv', inputs, spec=spec, depth=depth, sim=sim)

    def relu(self, x: Node) -> Node:
        return self._add('relu', (x,))

    def maxpool(self, x: Node, spec: PoolSpec) -> Node:
        return self._add('maxpool', (x,), spec=spec)

    def avgpool(self, x: Node, spec: PoolSpec, depth: Optional[DepthMap] = None,
                sim: Optional[SimilaritySpec] = None) -> Node:
        return self._add('avgpool', (x,), spec=spec, depth=depth, sim=sim)

    def global_concat(self, x: Node) -> Node:
        return self._add('global_concat', (x,))

    def upsample(self, x: Node, out_h: int, out_w: int) -> Node:
        return self._add('upsample', (x,), out_h=out_h, out_w=out_w)

    def cross_entropy(self, logits: Node, labels: np.ndarray, ignore_label: int = nnops.IGNORE_LABEL) -> Node:
        return self._add('cross_entropy', (logits,), labels=labels, ignore_label=ignore_label)

    def dot(self, x: Node, weights: Tensor) -> Node:
        """Scalar sum(x * weights) with constant weights; a generic projection loss"""
        return self._add('dot', (x,), weights=weights)

    def add(self, a: Node, b: Node) -> Node:
        return self._add('add', (a, b))

    # -- evaluation ----------------------------------------------------------

    def topological_order(self) -> List[int]:
        indegree = [0] * len(self.nodes)
        consumers: Dict[int, List[int]] = {}
        for node in self.nodes:
            for src in node.inputs:
                if src < 0 or src >= len(self.nodes):
                    raise GraphError(f"node {node.id} references unknown node {src}")
                consumers.setdefault(src, []).append(node.id)
                indegree[node.id] += 1
        ready = [n.id for n in self.nodes if indegree[n.id] == 0]
        order = []
        while ready:
            current = ready.pop(0)
            order.append(current)
            for dst in consumers.get(current, []):
                indegree[dst] -= 1
                if indegree[dst] == 0:
                    ready.append(dst)
        if len(order) != len(self.nodes):
            raise GraphError("cycle detected in computation graph")
        return order

    def forward(self, feeds: Dict[str, Tensor]) -> Dict[int, Tensor]:
        """Evaluate every node; returns the values of sink nodes keyed by node id"""
        order = self.topological_order()
        for name in self._input_nodes:
            if name not in feeds:
                raise GraphError(f"missing feed for input {name!r}")
        consumed = set()
        for node_id in order:
            node = self.nodes[node_id]
            if node.op == 'input':
                node.value, node.ctx = np.asarray(feeds[node.attrs['name']], dtype=DTYPE), None
            elif node.op == 'param':
                node.value, node.ctx = node.attrs['parameter'].value, None
            else:
                forward_fn = OPS[node.op][0]
                node.value, node.ctx = forward_fn(node, [self.nodes[i].value for i in node.inputs])
            consumed.update(node.inputs)
        self.forward_done = True
        self.input_grads = {}
        return {n.id: n.value for n in self.nodes if n.id not in consumed}

    def backward(self, loss: Node) -> None:
        """Accumulate d(loss)/d(parameter) into every trainable parameter's grad"""
        if not self.forward_done:
            raise StateError("backward called before forward")
        if loss.value is None or loss.value.size != 1:
            raise GraphError(f"loss node must be scalar, got shape {None if loss.value is None else loss.value.shape}")
        grads: Dict[int, Tensor] = {loss.id: np.ones_like(loss.value)}
        for node_id in reversed(self.topological_order()):
            grad = grads.pop(node_id, None)
            if grad is None:
                continue
            node = self.nodes[node_id]
            if node.op == 'param':
                parameter = node.attrs['parameter']
                if parameter.trainable:
                    parameter.grad = parameter.grad + grad
                continue
            if node.op == 'input':
                self.input_grads[node.attrs['name']] = grad
                continue
            backward_fn = OPS[node.op][1]
            input_grads = backward_fn(node, [self.nodes[i].value for i in node.inputs], grad)
            for src, g in zip(node.inputs, input_grads):
                if g is None:
                    continue
                grads[src] = g if src not in grads else grads[src] + g

    def activation_pattern(self) -> Tuple[bytes, ...]:
        """ReLU masks and max-pool argmax indices of the last forward pass"""
        if not self.forward_done:
            raise StateError("activation pattern requested before forward")
        pattern = []
        for node in self.nodes:
            if node.op == 'relu':
                pattern.append(np.packbits(node.ctx).tobytes())
            elif node.op == 'maxpool':
                pattern.append(node.ctx.argmax.tobytes())
        return tuple(pattern)


def forward(graph: Graph, inputs: Dict[str, Tensor]) -> Dict[int, Tensor]:
    return graph.forward(inputs)


def backward(graph: Graph, loss_node: Node) -> None:
    graph.backward(loss_node)
