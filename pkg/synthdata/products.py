"""
Procedural products and stamped defects

A product is a fixed texture (same structure in every image) plus a low-frequency
per-image jitter. Defects are stamped with OpenCV onto a mask canvas first; the
image is changed exactly where the mask is set.
"""
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import cv2
import numpy as np

from recovery.errors import ConfigurationError, ValidationError
from training.config import DataConfig


class DefectFamily(Enum):
    SCRATCH = "scratch"
    BLOB = "blob"
    HOLE = "hole"


class TextureKind(Enum):
    STRIPED = "striped"
    CELLULAR = "cellular"
    CHECKER = "checker"


# Defect generation parameters (pixel units at 64x64)
DEFECT_PARAMS = {
    DefectFamily.SCRATCH: {
        'segments': (2, 4),
        'segment_length': (8, 16),
        'width_range': (1, 2),
        'color_range': ((0.08, 0.08, 0.10), (0.22, 0.22, 0.25)),
    },
    DefectFamily.BLOB: {
        'ellipses': (2, 4),
        'axis_range': (3, 7),
        'spread': 4,
        'color_range': ((0.70, 0.32, 0.12), (0.88, 0.48, 0.22)),
    },
    DefectFamily.HOLE: {
        'radius_range': (4, 8),
        'color_range': ((0.02, 0.02, 0.02), (0.08, 0.08, 0.08)),
    },
}

PIXEL_NOISE = 0.02


@dataclass
class ProductSpec:
    image_size: int = 64
    texture: TextureKind = TextureKind.STRIPED
    palette: Tuple[Tuple[float, float, float], ...] = ((0.60, 0.62, 0.66), (0.30, 0.32, 0.36), (0.80, 0.80, 0.82))
    texture_frequency: float = 6.0
    texture_angle: float = 0.4
    local_jitter: float = 0.04
    defect_families: List[DefectFamily] = field(default_factory=lambda: [DefectFamily.SCRATCH, DefectFamily.BLOB])

    def __post_init__(self):
        self.texture = TextureKind(self.texture)
        self.defect_families = [DefectFamily(f) for f in self.defect_families]
        if len(self.palette) != 3:
            raise ConfigurationError("product palette must have exactly 3 colours")
        if not self.defect_families:
            raise ConfigurationError("product needs at least one defect family")

    @classmethod
    def from_config(cls, config: DataConfig) -> 'ProductSpec':
        return cls(
            image_size=config.image_size,
            texture=config.texture,
            palette=tuple(tuple(c) for c in config.palette),
            texture_frequency=config.texture_frequency,
            texture_angle=config.texture_angle,
            local_jitter=config.local_jitter,
            defect_families=list(config.defect_families),
        )

    @property
    def num_types(self) -> int:
        return len(self.defect_families)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['texture'] = self.texture.value
        data['defect_families'] = [f.value for f in self.defect_families]
        data['palette'] = [list(c) for c in self.palette]
        return data


@dataclass
class AnomalySample:
    """image: H x W x 3 float32 in [0, 1]; mask: H x W uint8 in {0, 1}; anomaly_type 0 = normal"""
    image: np.ndarray
    mask: np.ndarray
    anomaly_type: int

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"image must be H x W x 3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ValidationError("mask and image sizes differ")
        if self.anomaly_type == 0 and self.mask.any():
            raise ValidationError("normal sample with a non-empty mask")
        if self.anomaly_type > 0 and not self.mask.any():
            raise ValidationError("abnormal sample with an empty mask")

    @property
    def is_normal(self) -> bool:
        return self.anomaly_type == 0


def texture_structure(spec: ProductSpec) -> np.ndarray:
    """Base structure s in [0, 1], identical for every image of the product"""
    size = spec.image_size
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) / size
    f = spec.texture_frequency
    if spec.texture is TextureKind.STRIPED:
        u = x * np.cos(spec.texture_angle) + y * np.sin(spec.texture_angle)
        return 0.5 + 0.5 * np.sin(2 * np.pi * f * u)
    if spec.texture is TextureKind.CHECKER:
        return 0.5 + 0.5 * np.tanh(4 * np.sin(np.pi * f * x) * np.sin(np.pi * f * y))
    # cellular: distance to a fixed lattice of jittered sites
    sites_rng = np.random.default_rng(int(f * 1000) + 7)
    cells = max(int(f), 2)
    grid = (np.stack(np.mgrid[0:cells, 0:cells], -1).reshape(-1, 2) + 0.5 +
            sites_rng.uniform(-0.3, 0.3, (cells * cells, 2))) / cells
    points = np.stack([y, x], -1).reshape(-1, 1, 2)
    distance = np.sqrt(((points - grid[None]) ** 2).sum(-1)).min(axis=1).reshape(size, size)
    return np.clip(distance * cells / 0.75, 0.0, 1.0)


def colorize(structure: np.ndarray, palette) -> np.ndarray:
    """Quadratic blend through the three palette colours"""
    p0, p1, p2 = [np.asarray(c, dtype=np.float64) for c in palette]
    s = structure[..., None]
    return (1 - s) ** 2 * p0 + 2 * s * (1 - s) * p1 + s ** 2 * p2


def low_frequency_field(size: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(-amplitude, amplitude, (4, 4)).astype(np.float32)
    return cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC).astype(np.float64)


def quantize(image: np.ndarray) -> np.ndarray:
    """8-bit quantisation so PNG round trips are lossless"""
    return (np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).astype(np.float32) / 255.0)


def render_normal(spec: ProductSpec, rng: np.random.Generator) -> np.ndarray:
    base = colorize(texture_structure(spec), spec.palette)
    jitter = low_frequency_field(spec.image_size, spec.local_jitter, rng)
    return np.clip(base + jitter[..., None], 0.0, 1.0)


def _random_color(color_range, rng: np.random.Generator) -> np.ndarray:
    low, high = (np.asarray(c, dtype=np.float64) for c in color_range)
    return low + (high - low) * rng.uniform()


def _stamp_scratch(canvas: np.ndarray, rng: np.random.Generator):
    params = DEFECT_PARAMS[DefectFamily.SCRATCH]
    size = canvas.shape[0]
    x, y = rng.uniform(size * 0.25, size * 0.75, 2)
    angle = rng.uniform(0, 2 * np.pi)
    points = [(int(round(x)), int(round(y)))]
    for _ in range(rng.integers(params['segments'][0], params['segments'][1] + 1)):
        length = rng.uniform(*params['segment_length'])
        angle += rng.uniform(-0.6, 0.6)
        x = float(np.clip(x + length * np.cos(angle), 2, size - 3))
        y = float(np.clip(y + length * np.sin(angle), 2, size - 3))
        points.append((int(round(x)), int(round(y))))
    width = int(rng.integers(params['width_range'][0], params['width_range'][1] + 1))
    cv2.polylines(canvas, [np.array(points, dtype=np.int32)], False, 1, width, lineType=cv2.LINE_8)


def _stamp_blob(canvas: np.ndarray, rng: np.random.Generator):
    params = DEFECT_PARAMS[DefectFamily.BLOB]
    size = canvas.shape[0]
    cx, cy = rng.uniform(size * 0.25, size * 0.75, 2)
    for _ in range(rng.integers(params['ellipses'][0], params['ellipses'][1] + 1)):
        center = (int(round(cx + rng.uniform(-params['spread'], params['spread']))),
                  int(round(cy + rng.uniform(-params['spread'], params['spread']))))
        axes = tuple(int(a) for a in rng.integers(params['axis_range'][0], params['axis_range'][1] + 1, 2))
        cv2.ellipse(canvas, center, axes, float(rng.uniform(0, 180)), 0, 360, 1, -1, lineType=cv2.LINE_8)


def _stamp_hole(canvas: np.ndarray, rng: np.random.Generator):
    params = DEFECT_PARAMS[DefectFamily.HOLE]
    size = canvas.shape[0]
    radius = int(rng.integers(params['radius_range'][0], params['radius_range'][1] + 1))
    cx, cy = (int(v) for v in rng.integers(radius + 2, size - radius - 2, 2))
    cv2.circle(canvas, (cx, cy), radius, 1, -1, lineType=cv2.LINE_8)


STAMPERS = {
    DefectFamily.SCRATCH: _stamp_scratch,
    DefectFamily.BLOB: _stamp_blob,
    DefectFamily.HOLE: _stamp_hole,
}


def stamp_defect(image: np.ndarray, family: DefectFamily,
                 rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Stamp one defect; returns (image, mask) with the image changed exactly on the mask"""
    canvas = np.zeros(image.shape[:2], dtype=np.uint8)
    STAMPERS[family](canvas, rng)
    mask = canvas.astype(bool)
    color = _random_color(DEFECT_PARAMS[family]['color_range'], rng)
    noise = rng.uniform(-PIXEL_NOISE, PIXEL_NOISE, (int(mask.sum()), 3))
    result = image.copy()
    result[mask] = np.clip(color[None, :] + noise, 0.0, 1.0)
    return result, mask.astype(np.uint8)


def generate_sample(spec: ProductSpec, anomaly_type: int, seed_sequence: np.random.SeedSequence) -> AnomalySample:
    """One normal (type 0) or abnormal (type n) sample from its own seed"""
    rng = np.random.default_rng(seed_sequence)
    image = render_normal(spec, rng)
    mask = np.zeros((spec.image_size, spec.image_size), dtype=np.uint8)
    if anomaly_type > 0:
        image, mask = stamp_defect(image, spec.defect_families[anomaly_type - 1], rng)
        before = quantize(render_normal(spec, np.random.default_rng(seed_sequence)))
        image = quantize(image)
        # quantisation may map a stamped colour onto the base colour; keep the mask exact
        changed = np.any(image != before, axis=-1)
        mask = (mask.astype(bool) & changed).astype(np.uint8)
        if not mask.any():
            raise ValidationError("stamped defect left the image unchanged")
        return AnomalySample(image, mask, anomaly_type)
    return AnomalySample(quantize(image), mask, 0)


def base_structure_correlation(images: List[np.ndarray], region: Optional[np.ndarray] = None) -> float:
    """Mean pairwise Pearson correlation of grayscale images, optionally on a pixel region"""
    flats = []
    for image in images:
        gray = image.mean(axis=-1)
        flats.append(gray[region] if region is not None else gray.ravel())
    correlations = []
    for i in range(len(flats)):
        for j in range(i + 1, len(flats)):
            c = np.corrcoef(flats[i], flats[j])[0, 1]
            correlations.append(0.0 if np.isnan(c) else c)
    return float(np.mean(correlations)) if correlations else 1.0
