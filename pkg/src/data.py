"""
Depth-aware CNN toolkit - synthetic RGB-D data
Scene generation (objects that look alike but sit at different depths),
depth pyramids, binary PPM/PGM codecs and the on-disk dataset layout:

    <root>/rgb/000000.ppm    P6, maxval 255
    <root>/depth/000000.pgm  P5, maxval 65535, millimeters big-endian, 0 = missing
    <root>/label/000000.pgm  P5, maxval 255, 255 = ignore
    <root>/manifest.txt      one index per line
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import SETTINGS
from errors import ArgumentError, DataError, DatasetIOError, FormatError, ShapeError, SpecError
from similarity import DepthMap
from tensor_core import DTYPE, Rng, Tensor

logger = logging.getLogger(__name__)

IGNORE_LABEL = SETTINGS['ignore_label']
MAX_DEPTH_METERS = 65.535

# Mean colors per palette; the ambiguous pair (classes 1 and 2) shares palette 1
PALETTES = (
    (0.35, 0.35, 0.35),
    (0.80, 0.30, 0.20),
    (0.20, 0.60, 0.80),
    (0.30, 0.80, 0.30),
    (0.85, 0.80, 0.25),
    (0.60, 0.30, 0.75),
    (0.90, 0.55, 0.70),
    (0.45, 0.25, 0.10),
)
COLOR_SPREAD = 0.1
BACKGROUND_SPREAD = 0.2  # meters, width of the background band
NEAR_OFFSET = (0.10, 0.25)  # ambiguous partner sits just in front of the background


@dataclass(frozen=True)
class DatasetSpec:
    num_images: int = 200
    height: int = 64
    width: int = 64
    num_classes: int = 4
    shapes_per_image: int = 4
    depth_near: float = 0.5
    depth_far: float = 6.0
    ambiguous: bool = True
    noise_sigma: float = 0.0
    depth_noise_sigma: float = 0.0
    hole_prob: float = 0.0
    seed: int = 42

    def __post_init__(self):
        if self.num_images < 1:
            raise SpecError(f"num_images must be >= 1, got {self.num_images}")
        if self.num_classes < 1:
            raise SpecError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.num_classes > len(PALETTES):
            raise SpecError(f"at most {len(PALETTES)} classes are supported")
        if self.height < 4 or self.width < 4:
            raise SpecError(f"image size must be at least 4x4, got {self.height}x{self.width}")
        if self.shapes_per_image < 0:
            raise SpecError("shapes_per_image must be >= 0")
        if not 0.0 <= self.hole_prob <= 1.0:
            raise SpecError(f"hole_prob must be in [0, 1], got {self.hole_prob}")
        if self.noise_sigma < 0 or self.depth_noise_sigma < 0:
            raise SpecError("noise sigmas must be >= 0")
        if not 0 < self.depth_near < self.depth_far <= MAX_DEPTH_METERS:
            raise SpecError(f"need 0 < depth_near < depth_far <= {MAX_DEPTH_METERS}")
        deepest = max((hi for lo, hi in self.class_offsets().values()), default=0.0)
        if self.depth_far - BACKGROUND_SPREAD - deepest < self.depth_near:
            raise SpecError(f"depth range [{self.depth_near}, {self.depth_far}] too shallow for "
                            f"{self.num_classes} classes")

    @property
    def ambiguous_pair(self) -> Optional[Tuple[int, int]]:
        return (1, 2) if self.ambiguous and self.num_classes >= 3 else None

    def class_offsets(self) -> Dict[int, Tuple[float, float]]:
        """Distance in front of the background (meters) for each foreground class"""
        offsets = {}
        slot = 0
        for cls in range(1, self.num_classes):
            if self.ambiguous_pair and cls == self.ambiguous_pair[1]:
                offsets[cls] = NEAR_OFFSET
                continue
            offsets[cls] = (0.75 + 0.5 * slot, 1.0 + 0.5 * slot)
            slot += 1
        return offsets

    def palette(self, cls: int) -> Tuple[float, float, float]:
        if self.ambiguous_pair and cls == self.ambiguous_pair[1]:
            return PALETTES[self.ambiguous_pair[0]]
        return PALETTES[cls]


@dataclass(frozen=True)
class Scene:
    rgb: Tensor  # [3, h, w] in [0, 1]
    depth: DepthMap
    labels: np.ndarray  # uint8 [h, w]

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ShapeError(f"rgb must be [3, h, w], got {self.rgb.shape}")
        if self.depth.shape != self.rgb.shape[1:] or self.labels.shape != self.rgb.shape[1:]:
            raise ShapeError(f"rgb {self.rgb.shape[1:]}, depth {self.depth.shape} and labels "
                             f"{self.labels.shape} must share a resolution")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape


class DepthPyramid:
    """Depth at h/2^k x w/2^k for k = 0..L (each level ceil of the previous)"""

    def __init__(self, levels: List[DepthMap]):
        if not levels:
            raise SpecError("depth pyramid needs at least one level")
        self.levels = levels

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> DepthMap:
        return self.levels[level]

    def __iter__(self):
        return iter(self.levels)


def build_pyramid(depth: DepthMap, levels: int) -> DepthPyramid:
    """Nearest-neighbour downsampling keeping the top-left sample of each 2x2 block"""
    if levels < 0:
        raise ArgumentError(f"pyramid levels must be >= 0, got {levels}")
    maps = [depth]
    for _ in range(levels):
        prev = maps[-1]
        maps.append(DepthMap.from_meters(prev.values[::2, ::2], prev.valid[::2, ::2]))
    return DepthPyramid(maps)


# ---------------------------------------------------------------------------
# generation

def _paint_shape(rng: Rng, mask: np.ndarray) -> None:
    height, width = mask.shape
    shape_h = max(2, int(round(rng.uniform(0.2, 0.45) * height)))
    shape_w = max(2, int(round(rng.uniform(0.2, 0.45) * width)))
    top = int(rng.integers(0, height - shape_h + 1))
    left = int(rng.integers(0, width - shape_w + 1))
    if rng.uniform(0.0, 1.0) < 0.5:
        mask[top:top + shape_h, left:left + shape_w] = True
        return
    rows, cols = np.ogrid[:height, :width]
    cy, cx = top + (shape_h - 1) / 2.0, left + (shape_w - 1) / 2.0
    radius = min(shape_h, shape_w) / 2.0
    mask |= (rows - cy) ** 2 + (cols - cx) ** 2 <= radius ** 2


def generate_scene(spec: DatasetSpec, rng: Rng) -> Scene:
    height, width = spec.height, spec.width
    labels = np.zeros((height, width), dtype=np.uint8)
    rgb = np.empty((3, height, width), dtype=DTYPE)
    depth = np.empty((height, width), dtype=DTYPE)

    background = rng.uniform(spec.depth_far - BACKGROUND_SPREAD, spec.depth_far)
    offsets = spec.class_offsets()
    class_depth = {0: background}
    for cls, (lo, hi) in offsets.items():
        class_depth[cls] = background - rng.uniform(lo, hi)

    base = np.array(spec.palette(0), dtype=DTYPE) + rng.uniform(-COLOR_SPREAD, COLOR_SPREAD, 3)
    rgb[:] = base[:, None, None]
    depth[:] = background

    if spec.num_classes > 1:
        for _ in range(spec.shapes_per_image):
            cls = int(rng.integers(1, spec.num_classes))
            mask = np.zeros((height, width), dtype=bool)
            _paint_shape(rng, mask)
            color = np.array(spec.palette(cls), dtype=DTYPE) + rng.uniform(-COLOR_SPREAD, COLOR_SPREAD, 3)
            labels[mask] = cls
            rgb[:, mask] = color[:, None]
            depth[mask] = class_depth[cls]

    if spec.noise_sigma > 0:
        rgb += rng.normal(0.0, spec.noise_sigma, rgb.shape)
    if spec.depth_noise_sigma > 0:
        depth += rng.normal(0.0, spec.depth_noise_sigma, depth.shape)
    # quantize to what the file formats store so scenes round-trip exactly
    rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0
    depth = np.round(np.clip(depth, 0.001, MAX_DEPTH_METERS) * 1000.0) / 1000.0
    valid = rng.uniform(0.0, 1.0, depth.shape) >= spec.hole_prob if spec.hole_prob > 0 else np.ones(depth.shape, bool)
    return Scene(rgb, DepthMap.from_meters(depth, valid), labels)


def generate(spec: DatasetSpec) -> List[Scene]:
    """Deterministic in spec.seed; scene i draws from its own stream"""
    if spec.ambiguous and spec.ambiguous_pair is None:
        logger.warning(f"⚠️ color ambiguity needs >= 3 classes, got {spec.num_classes}; generating unambiguous data")
    root = Rng(spec.seed)
    scenes = [generate_scene(spec, root.spawn(i)) for i in range(spec.num_images)]
    logger.info(f"✅ generated {len(scenes)} scenes {spec.height}x{spec.width}, {spec.num_classes} classes")
    return scenes


def derived_seed(seed: int, purpose: str) -> int:
    """Stable seed for a secondary split, e.g. the held-out test set"""
    mix = int.from_bytes(purpose.encode('utf-8')[:8].ljust(8, b'\0'), 'little')
    return (seed * 0x9E3779B97F4A7C15 + mix) % 2 ** 64


def _mutual_information(x: np.ndarray, y: np.ndarray) -> float:
    _, xi = np.unique(x, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    joint = np.zeros((xi.max() + 1, yi.max() + 1), dtype=np.float64)
    np.add.at(joint, (xi, yi), 1.0)
    joint /= joint.sum()
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (px @ py)[nz])))


def label_information(scenes: Sequence[Scene], classes: Tuple[int, int], color_bins: int = 4,
                      depth_bin: float = 0.25) -> Dict[str, float]:
    """Mutual information (nats) of quantized color and of depth band with the label, over pixels of two classes"""
    colors, depths, labels = [], [], []
    for scene in scenes:
        mask = np.isin(scene.labels, classes) & scene.depth.valid
        q = np.minimum((scene.rgb[:, mask] * color_bins).astype(np.int64), color_bins - 1)
        colors.append((q[0] * color_bins + q[1]) * color_bins + q[2])
        depths.append(np.floor(scene.depth.values[mask] / depth_bin).astype(np.int64))
        labels.append(scene.labels[mask])
    if not labels or sum(l.size for l in labels) == 0:
        raise DataError(f"no valid pixels of classes {classes}")
    y = np.concatenate(labels)
    return {'color': _mutual_information(np.concatenate(colors), y),
            'depth': _mutual_information(np.concatenate(depths), y)}


# ---------------------------------------------------------------------------
# PPM / PGM codecs

def _parse_header(blob: bytes, magic: bytes, path: Optional[str]) -> Tuple[int, int, int, int]:
    if blob[:2] != magic:
        raise FormatError(f"expected magic {magic.decode()}", 0, path)
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos < len(blob) and not (blob[pos:pos + 1].isspace() or blob[pos:pos + 1] == b'#'):
            raise FormatError("expected whitespace in header", pos, path)
        while pos < len(blob) and (blob[pos:pos + 1].isspace() or blob[pos:pos + 1] == b'#'):
            if blob[pos:pos + 1] == b'#':
                end = blob.find(b'\n', pos)
                pos = len(blob) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise FormatError("expected a header integer", start, path)
        fields.append(int(blob[start:pos]))
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise FormatError("expected a single whitespace before pixel data", pos, path)
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"invalid image size {width}x{height}", 2, path)
    return width, height, maxval, pos + 1


def _payload(blob: bytes, start: int, size: int, path: Optional[str]) -> bytes:
    if len(blob) - start < size:
        raise FormatError(f"truncated payload: need {size} bytes, have {len(blob) - start}", len(blob), path)
    if len(blob) - start > size:
        raise FormatError("trailing bytes after pixel data", start + size, path)
    return blob[start:start + size]


def encode_ppm_rgb(rgb: Tensor) -> bytes:
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"rgb must be [3, h, w], got {rgb.shape}")
    _, height, width = rgb.shape
    samples = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P6\n{width} {height}\n255\n".encode('ascii') + samples.transpose(1, 2, 0).tobytes()


def decode_ppm_rgb(blob: bytes, path: Optional[str] = None) -> Tensor:
    width, height, maxval, start = _parse_header(blob, b'P6', path)
    if maxval != 255:
        raise FormatError(f"rgb maxval must be 255, got {maxval}", start - 1, path)
    data = np.frombuffer(_payload(blob, start, width * height * 3, path), dtype=np.uint8)
    return data.reshape(height, width, 3).transpose(2, 0, 1).astype(DTYPE) / 255.0


def encode_pgm16_depth(depth: DepthMap) -> bytes:
    values = np.where(depth.valid, depth.values, 0.0)
    if np.any(values > MAX_DEPTH_METERS):
        raise DataError(f"depth above {MAX_DEPTH_METERS} m cannot be stored as 16-bit millimeters")
    mm = np.round(values * 1000.0).astype(np.int64)
    # a valid depth that rounds to 0 mm would read back as a hole
    mm = np.where(depth.valid, np.maximum(mm, 1), 0)
    return f"P5\n{depth.width} {depth.height}\n65535\n".encode('ascii') + mm.astype('>u2').tobytes()


def decode_pgm16_depth(blob: bytes, path: Optional[str] = None) -> DepthMap:
    width, height, maxval, start = _parse_header(blob, b'P5', path)
    if maxval != 65535:
        raise FormatError(f"depth maxval must be 65535, got {maxval}", start - 1, path)
    mm = np.frombuffer(_payload(blob, start, width * height * 2, path), dtype='>u2').reshape(height, width)
    return DepthMap.from_meters(mm.astype(DTYPE) / 1000.0, mm != 0)


def encode_pgm8(image: np.ndarray) -> bytes:
    """8-bit grayscale (labels, heatmaps)"""
    if image.ndim != 2:
        raise ShapeError(f"8-bit image must be [h, w], got {image.shape}")
    if image.size and (image.min() < 0 or image.max() > 255):
        raise DataError("8-bit sample values must fit in 0..255")
    height, width = image.shape
    return f"P5\n{width} {height}\n255\n".encode('ascii') + image.astype(np.uint8).tobytes()


encode_pgm8_labels = encode_pgm8


def decode_pgm8_labels(blob: bytes, path: Optional[str] = None) -> np.ndarray:
    width, height, maxval, start = _parse_header(blob, b'P5', path)
    if maxval != 255:
        raise FormatError(f"label maxval must be 255, got {maxval}", start - 1, path)
    return np.frombuffer(_payload(blob, start, width * height, path), dtype=np.uint8).reshape(height, width).copy()


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, 'rb') as f:
            return f.read()
    except OSError as e:
        raise DatasetIOError(f"cannot read file ({e.strerror})", path)


def _write_bytes(path: str, blob: bytes) -> None:
    try:
        with open(path, 'wb') as f:
            f.write(blob)
    except OSError as e:
        raise DatasetIOError(f"cannot write file ({e.strerror})", path)


def read_ppm_rgb(path: str) -> Tensor:
    return decode_ppm_rgb(_read_bytes(path), path)


def write_ppm_rgb(path: str, rgb: Tensor) -> None:
    _write_bytes(path, encode_ppm_rgb(rgb))


def read_pgm16_depth(path: str) -> DepthMap:
    return decode_pgm16_depth(_read_bytes(path), path)


def write_pgm16_depth(path: str, depth: DepthMap) -> None:
    _write_bytes(path, encode_pgm16_depth(depth))


def read_pgm8_labels(path: str) -> np.ndarray:
    return decode_pgm8_labels(_read_bytes(path), path)


def write_pgm8_labels(path: str, labels: np.ndarray) -> None:
    _write_bytes(path, encode_pgm8_labels(labels))


def write_pgm8(path: str, image: np.ndarray) -> None:
    _write_bytes(path, encode_pgm8(image))


# ---------------------------------------------------------------------------
# dataset directories

def _scene_paths(root: str, index: int) -> Tuple[str, str, str]:
    name = f"{index:06d}"
    return (os.path.join(root, 'rgb', f"{name}.ppm"),
            os.path.join(root, 'depth', f"{name}.pgm"),
            os.path.join(root, 'label', f"{name}.pgm"))


def write_dataset(root: str, scenes: Sequence[Scene]) -> None:
    for sub in ('rgb', 'depth', 'label'):
        path = os.path.join(root, sub)
        try:
            os.makedirs(path, exist_ok=True)
        except OSError as e:
            raise DatasetIOError(f"cannot create directory ({e.strerror})", path)
    for index, scene in enumerate(scenes):
        rgb_path, depth_path, label_path = _scene_paths(root, index)
        write_ppm_rgb(rgb_path, scene.rgb)
        write_pgm16_depth(depth_path, scene.depth)
        write_pgm8_labels(label_path, scene.labels)
    manifest = ''.join(f"{index}\n" for index in range(len(scenes)))
    _write_bytes(os.path.join(root, 'manifest.txt'), manifest.encode('ascii'))
    logger.info(f"✅ wrote {len(scenes)} scenes to {root}")


def read_manifest(root: str) -> List[int]:
    path = os.path.join(root, 'manifest.txt')
    if not os.path.isdir(root):
        raise DatasetIOError("dataset directory not found", root)
    lines = _read_bytes(path).decode('ascii', errors='replace').splitlines()
    indices = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            indices.append(int(line.strip()))
        except ValueError:
            raise DataError(f"{path}:{number}: manifest entry {line.strip()!r} is not an index")
    return indices


def read_dataset(root: str) -> List[Scene]:
    indices = read_manifest(root)
    if not indices:
        raise DataError(f"dataset {root} is empty")
    scenes = []
    for index in indices:
        rgb_path, depth_path, label_path = _scene_paths(root, index)
        rgb, depth, labels = read_ppm_rgb(rgb_path), read_pgm16_depth(depth_path), read_pgm8_labels(label_path)
        for path, shape in ((depth_path, depth.shape), (label_path, labels.shape)):
            if shape != rgb.shape[1:]:
                raise DataError(f"{path}: resolution {shape} does not match rgb {rgb.shape[1:]}")
        scenes.append(Scene(rgb, depth, labels))
    logger.debug(f"🔍 read {len(scenes)} scenes from {root}")
    return scenes


def infer_num_classes(scenes: Sequence[Scene], ignore_label: int = IGNORE_LABEL) -> int:
    top = -1
    for scene in scenes:
        present = scene.labels[scene.labels != ignore_label]
        if present.size:
            top = max(top, int(present.max()))
    if top < 0:
        raise DataError("dataset has no labeled pixels")
    return top + 1
