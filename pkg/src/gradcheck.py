"""
Depth-aware CNN toolkit - gradient checks
Central-difference checks of every differentiable op and of whole models.
Relative error is |a - n| / max(|a|, |n|, 1e-8). Samples whose +-eps
perturbation flips a ReLU mask or a max-pool argmax are rejected and
redrawn, so differences are never taken across a kink. Samples whose
gradient is below what a central difference resolves at the loss scale
(rounding of f divided by eps) are rejected the same way.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from autograd import Graph, Node, Parameter
from config import SETTINGS
from data import build_pyramid
from errors import ArgumentError
from model import build, preset_spec
from nnops import ConvSpec, PoolSpec
from similarity import DepthMap, SimilaritySpec
from tensor_core import DTYPE, Rng, Tensor

logger = logging.getLogger(__name__)

EPS = SETTINGS['gradcheck_eps']
OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-5
REL_FLOOR = 1e-8
RESOLUTION_ULPS = 64  # rounding headroom of one central difference, in machine epsilons

OP_TARGETS = ('conv', 'dconv', 'avgpool', 'davgpool', 'maxpool', 'relu', 'global_concat', 'upsample',
              'cross_entropy')
TARGETS = OP_TARGETS + ('ops', 'model')

# (block name, array perturbed in place, feed name or None for a parameter)
Target = Tuple[str, Tensor, Optional[str]]


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


@dataclass
class BlockResult:
    name: str
    checked: int = 0
    rejected: int = 0
    max_rel_err: float = 0.0
    mean_rel_err: float = 0.0
    errors: List[float] = field(default_factory=list, repr=False)

    def add(self, err: float) -> None:
        self.errors.append(err)
        self.checked = len(self.errors)
        self.max_rel_err = max(self.max_rel_err, err)
        self.mean_rel_err = float(np.mean(self.errors))

    def to_dict(self) -> Dict:
        d = asdict(self)
        d.pop('errors')
        return d


@dataclass
class GradcheckReport:
    target: str
    eps: float
    tolerance: float
    instances: int = 0
    blocks: Dict[str, BlockResult] = field(default_factory=dict)

    def block(self, name: str) -> BlockResult:
        return self.blocks.setdefault(name, BlockResult(name))

    @property
    def max_rel_err(self) -> float:
        return max((b.max_rel_err for b in self.blocks.values()), default=0.0)

    @property
    def checked(self) -> int:
        return sum(b.checked for b in self.blocks.values())

    @property
    def rejected(self) -> int:
        return sum(b.rejected for b in self.blocks.values())

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_err < self.tolerance

    def to_dict(self) -> Dict:
        return {
            'target': self.target,
            'eps': self.eps,
            'tolerance': self.tolerance,
            'instances': self.instances,
            'max_rel_err': self.max_rel_err,
            'checked': self.checked,
            'rejected': self.rejected,
            'passed': self.passed,
            'blocks': [b.to_dict() for b in self.blocks.values()],
        }


def _graph_params(graph: Graph) -> List[Parameter]:
    return [n.attrs['parameter'] for n in graph.nodes if n.op == 'param']


def check_graph(graph: Graph, loss: Node, feeds: Dict[str, Tensor], targets: Sequence[Target],
                rng: Rng, report: GradcheckReport, samples: int, eps: float) -> None:
    """
    Compare analytic gradients of `loss` with central differences on up to
    `samples` entries per target. Arrays are perturbed in place and restored:
    feeds through the feed dict, parameters through Parameter.value.
    """
    graph.forward(feeds)
    for param in _graph_params(graph):
        param.zero_grad()
    graph.backward(loss)
    by_value = {id(p.value): p for p in _graph_params(graph)}
    analytic = {}
    for name, array, feed in targets:
        grad = graph.input_grads.get(feed) if feed is not None else by_value[id(array)].grad
        analytic[name] = np.zeros_like(array) if grad is None else grad.copy()
    base_pattern = graph.activation_pattern()

    def evaluate() -> Tuple[float, Tuple[bytes, ...]]:
        graph.forward(feeds)
        return float(loss.value), graph.activation_pattern()

    for name, array, _ in targets:
        result = report.block(name)
        flat = array.reshape(-1)
        grad = analytic[name].reshape(-1)
        accepted = 0
        for index in rng.permutation(flat.size):
            if accepted >= samples:
                break
            original = flat[index]
            flat[index] = original + eps
            f_plus, pattern_plus = evaluate()
            flat[index] = original - eps
            f_minus, pattern_minus = evaluate()
            flat[index] = original
            if pattern_plus != base_pattern or pattern_minus != base_pattern:
                result.rejected += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * eps)
            noise = RESOLUTION_ULPS * np.finfo(DTYPE).eps * max(abs(f_plus), abs(f_minus), 1.0) / eps
            if max(abs(float(grad[index])), abs(numeric)) * report.tolerance < noise:
                result.rejected += 1
                continue
            result.add(rel_error(float(grad[index]), numeric))
            accepted += 1
    graph.forward(feeds)


# ---------------------------------------------------------------------------
# random single-op instances

def _random_depth(rng: Rng, height: int, width: int) -> DepthMap:
    values = rng.uniform(0.5, 3.0, (height, width))
    valid = rng.uniform(0.0, 1.0, (height, width)) > 0.1
    return DepthMap.from_meters(values, valid)


def _random_sim(rng: Rng) -> SimilaritySpec:
    if rng.uniform(0.0, 1.0) < 0.75:
        return SimilaritySpec.exponential(float(rng.uniform(0.5, 10.0)))
    return SimilaritySpec.clip(float(rng.uniform(0.2, 1.5)))


def _random_projection(graph: Graph, y: Node, feeds: Dict[str, Tensor], rng: Rng) -> Node:
    """Scalar loss sum(y * r) with random r, so every output entry carries gradient"""
    graph.forward(feeds)
    return graph.dot(y, rng.normal(0.0, 1.0, y.value.shape))


def _conv_instance(rng: Rng, depth_aware: bool):
    kernel = int((1, 3, 5)[int(rng.integers(0, 3))])
    dilation = int(rng.integers(1, 3))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, dilation * (kernel // 2) + 1))
    size = dilation * (kernel - 1) + 1 + int(rng.integers(0, 4))
    spec = ConvSpec(int(rng.integers(1, 4)), int(rng.integers(1, 4)), kernel, kernel, stride, padding, dilation,
                    has_bias=bool(rng.integers(0, 2)))
    x_value = rng.normal(0.0, 1.0, (spec.in_channels, size, size))
    weight = Parameter('weight', rng.normal(0.0, 1.0, spec.weight_shape))
    bias = Parameter('bias', rng.normal(0.0, 1.0, spec.out_channels)) if spec.has_bias else None
    depth, sim = (_random_depth(rng, size, size), _random_sim(rng)) if depth_aware else (None, None)
    graph = Graph()
    y = graph.conv(graph.input('x'), graph.param(weight), graph.param(bias) if bias else None, spec, depth, sim)
    feeds = {'x': x_value}
    targets = [('x', x_value, 'x'), ('weight', weight.value, None)]
    if bias:
        targets.append(('bias', bias.value, None))
    return graph, _random_projection(graph, y, feeds, rng), feeds, targets


def _pool_instance(rng: Rng, mode: str):
    kernel = int(rng.integers(2, 4))
    spec = PoolSpec(kernel, kernel, int(rng.integers(1, 3)), int(rng.integers(0, kernel // 2 + 1)), mode)
    size = kernel + int(rng.integers(0, 4))
    x_value = rng.normal(0.0, 1.0, (int(rng.integers(1, 4)), size, size))
    graph = Graph()
    x = graph.input('x')
    if mode == 'max':
        y = graph.maxpool(x, spec)
    elif mode == 'depth_avg':
        y = graph.avgpool(x, spec, _random_depth(rng, size, size), _random_sim(rng))
    else:
        y = graph.avgpool(x, spec)
    feeds = {'x': x_value}
    return graph, _random_projection(graph, y, feeds, rng), feeds, [('x', x_value, 'x')]


def _unary_instance(rng: Rng, op: str):
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(2, 6)))
    graph = Graph()
    x = graph.input('x')
    if op == 'relu':
        # every input well away from the kink at 0
        signs = np.where(rng.uniform(0.0, 1.0, shape) < 0.5, -1.0, 1.0)
        x_value = signs * rng.uniform(0.1, 1.0, shape)
        y = graph.relu(x)
    elif op == 'global_concat':
        x_value = rng.normal(0.0, 1.0, shape)
        y = graph.global_concat(x)
    else:
        x_value = rng.normal(0.0, 1.0, shape)
        y = graph.upsample(x, shape[1] * int(rng.integers(1, 4)) + int(rng.integers(0, 3)),
                           shape[2] * int(rng.integers(1, 4)) + int(rng.integers(0, 3)))
    feeds = {'x': x_value}
    return graph, _random_projection(graph, y, feeds, rng), feeds, [('x', x_value, 'x')]


def _cross_entropy_instance(rng: Rng):
    classes, height, width = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    x_value = rng.normal(0.0, 2.0, (classes, height, width))
    labels = rng.integers(0, classes, (height, width))
    labels[rng.uniform(0.0, 1.0, (height, width)) < 0.2] = SETTINGS['ignore_label']
    labels[0, 0] = 0
    graph = Graph()
    loss = graph.cross_entropy(graph.input('x'), labels, SETTINGS['ignore_label'])
    return graph, loss, {'x': x_value}, [('x', x_value, 'x')]


INSTANCE_BUILDERS: Dict[str, Callable] = {
    'conv': lambda rng: _conv_instance(rng, False),
    'dconv': lambda rng: _conv_instance(rng, True),
    'avgpool': lambda rng: _pool_instance(rng, 'avg'),
    'davgpool': lambda rng: _pool_instance(rng, 'depth_avg'),
    'maxpool': lambda rng: _pool_instance(rng, 'max'),
    'relu': lambda rng: _unary_instance(rng, 'relu'),
    'global_concat': lambda rng: _unary_instance(rng, 'global_concat'),
    'upsample': lambda rng: _unary_instance(rng, 'upsample'),
    'cross_entropy': _cross_entropy_instance,
}


def _log_report(report: GradcheckReport) -> None:
    for block in report.blocks.values():
        logger.info(f"🔍 {block.name}: {block.checked} checked, {block.rejected} rejected, "
                    f"max {block.max_rel_err:.2e} mean {block.mean_rel_err:.2e}")
    marker = '✅' if report.passed else '❌'
    logger.info(f"{marker} gradcheck {report.target}: max rel err {report.max_rel_err:.2e} "
                f"(tolerance {report.tolerance:.0e})")


def check_op(op: str, instances: int = 20, samples: int = 8, eps: float = EPS, seed: int = SETTINGS['seed'],
             tolerance: float = OP_TOLERANCE, report: Optional[GradcheckReport] = None) -> GradcheckReport:
    """`instances` random configurations of one op, `samples` entries per input/parameter each"""
    builder = INSTANCE_BUILDERS.get(op)
    if builder is None:
        raise ArgumentError(f"unknown gradcheck op {op!r}; choose from {OP_TARGETS}")
    if instances < 1 or samples < 1:
        raise ArgumentError("instances and samples must be >= 1")
    report = report or GradcheckReport(op, eps, tolerance)
    report.instances += instances
    root = Rng(seed)
    for instance in range(instances):
        rng = root.spawn(instance)
        graph, loss, feeds, targets = builder(rng)
        named = [(f"{op}/{name}", array, feed) for name, array, feed in targets]
        check_graph(graph, loss, feeds, named, rng, report, samples, eps)
    return report


def check_ops(instances: int = 20, samples: int = 8, eps: float = EPS, seed: int = SETTINGS['seed'],
              tolerance: float = OP_TOLERANCE) -> GradcheckReport:
    report = GradcheckReport('ops', eps, tolerance)
    for op in OP_TARGETS:
        check_op(op, instances, samples, eps, seed, tolerance, report)
    return report


def check_model(preset: str = 'dcnn-mini', instances: int = 1, samples: int = 20, eps: float = EPS,
                seed: int = SETTINGS['seed'], tolerance: float = MODEL_TOLERANCE, size: int = 12,
                num_classes: int = 3) -> GradcheckReport:
    """
    End-to-end check of the segmentation loss w.r.t. every parameter block
    and the RGB input. Each instance draws fresh parameters, RGB, depth
    (with holes) and labels; all of them land in one report.
    """
    if instances < 1 or samples < 1:
        raise ArgumentError("instances and samples must be >= 1")
    spec = preset_spec(preset, num_classes)
    report = GradcheckReport(preset, eps, tolerance, instances)
    root = Rng(seed)
    for instance in range(instances):
        stream = root.spawn(instance)
        model = build(spec, stream.spawn(0))
        rng = stream.spawn(1)
        rgb = rng.uniform(0.0, 1.0, (3, size, size))
        depth = _random_depth(rng, size, size)
        labels = rng.integers(0, num_classes, (size, size))
        graph, loss, _ = model.loss_graph(rgb, build_pyramid(depth, model.spec.max_depth_level), labels)
        targets: List[Target] = [(p.name, p.value, None) for p in model.parameters()]
        targets.append(('rgb', rgb, 'rgb'))
        check_graph(graph, loss, {'rgb': rgb}, targets, rng, report, samples, eps)
    return report


def run(target: str, instances: int = 20, samples: Optional[int] = None, eps: float = EPS,
        seed: int = SETTINGS['seed'], tolerance: Optional[float] = None) -> GradcheckReport:
    if target == 'model':
        report = check_model(instances=instances, samples=samples or 20, eps=eps, seed=seed,
                             tolerance=tolerance or MODEL_TOLERANCE)
    elif target == 'ops':
        report = check_ops(instances, samples or 8, eps, seed, tolerance or OP_TOLERANCE)
    elif target in OP_TARGETS:
        report = check_op(target, instances, samples or 8, eps, seed, tolerance or OP_TOLERANCE)
    else:
        raise ArgumentError(f"unknown gradcheck target {target!r}; choose from {TARGETS}")
    _log_report(report)
    return report
