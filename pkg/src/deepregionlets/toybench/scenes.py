"""Synthetic 64x64 single-channel scenes with 1-3 shapes each."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..rng import Rng

IMAGE_SIZE = 64
CLASSES = ("rectangle", "ellipse", "l_shape")
SUPERSAMPLE = 4
NOISE_STD = 0.04

# L-shape arm thickness as a fraction of the bounding box side
_L_ARM = 0.4


@dataclass(frozen=True)
class SceneObject:
    cls: int
    center: tuple[float, float]
    half_size: tuple[float, float]
    rotation: float
    brightness: float

    @property
    def name(self) -> str:
        return CLASSES[self.cls]

    @property
    def bbox(self) -> np.ndarray:
        """Tight (x0, y0, x1, y1) box in continuous pixel coordinates."""
        cx, cy = self.center
        a, b = self.half_size
        if self.cls == 1:
            c, s = abs(math.cos(self.rotation)), abs(math.sin(self.rotation))
            ex = math.sqrt((a * c) ** 2 + (b * s) ** 2)
            ey = math.sqrt((a * s) ** 2 + (b * c) ** 2)
            return np.array([cx - ex, cy - ey, cx + ex, cy + ey])
        u, v = self._outline()
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        x = cx + c * u - s * v
        y = cy + s * u + c * v
        return np.array([x.min(), y.min(), x.max(), y.max()])

    def _outline(self) -> tuple[np.ndarray, np.ndarray]:
        """Polygon vertices in the object frame (rectangle and L only)."""
        a, b = self.half_size
        if self.cls == 0:
            return np.array([-a, a, a, -a]), np.array([-b, -b, b, b])
        ua = -a + 2 * a * _L_ARM
        vb = b - 2 * b * _L_ARM
        return np.array([-a, ua, ua, a, a, -a]), np.array([-b, -b, vb, vb, b, b])

    def contains(self, x, y) -> np.ndarray:
        cx, cy = self.center
        a, b = self.half_size
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        dx, dy = x - cx, y - cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        if self.cls == 1:
            return (u / a) ** 2 + (v / b) ** 2 <= 1.0
        inside = (np.abs(u) <= a) & (np.abs(v) <= b)
        if self.cls == 2:
            notch = (u > -a + 2 * a * _L_ARM) & (v < b - 2 * b * _L_ARM)
            inside &= ~notch
        return inside


@dataclass
class SyntheticScene:
    image: np.ndarray
    objects: list[SceneObject]

    @property
    def boxes(self) -> np.ndarray:
        return np.array([o.bbox for o in self.objects]).reshape(-1, 4)

    @property
    def labels(self) -> np.ndarray:
        return np.array([o.cls for o in self.objects], dtype=np.int64)


def _subpixel_grid(size: int = IMAGE_SIZE, k: int = SUPERSAMPLE):
    off = (np.arange(k) + 0.5) / k
    coords = (np.arange(size)[:, None] + off[None, :]).reshape(-1)
    return np.meshgrid(coords, coords)  # x varies along columns


def render_objects(objects, size: int = IMAGE_SIZE) -> np.ndarray:
    """Anti-aliased (size, size) rendering by supersampled coverage."""
    xs, ys = _subpixel_grid(size)
    k = SUPERSAMPLE
    img = np.zeros((size, size))
    for obj in objects:
        cover = obj.contains(xs, ys).reshape(size, k, size, k).mean(axis=(1, 3))
        img = np.maximum(img, cover * obj.brightness)
    return img


def _overlaps(box, others, margin: float = 2.0) -> bool:
    for o in others:
        if (box[0] < o[2] + margin and o[0] < box[2] + margin
                and box[1] < o[3] + margin and o[1] < box[3] + margin):
            return True
    return False


def generate_scene(rng: Rng, max_tries: int = 100) -> SyntheticScene:
    """Deterministic for a given generator state."""
    n = rng.integers(1, 4)
    objects = []
    boxes = []
    tries = 0
    while len(objects) < n and tries < max_tries:
        tries += 1
        obj = SceneObject(
            cls=rng.integers(0, len(CLASSES)),
            center=(rng.uniform(12.0, IMAGE_SIZE - 12.0), rng.uniform(12.0, IMAGE_SIZE - 12.0)),
            half_size=(rng.uniform(5.0, 10.0), rng.uniform(5.0, 10.0)),
            rotation=rng.uniform(0.0, math.pi),
            brightness=rng.uniform(0.6, 1.0),
        )
        box = obj.bbox
        if box[0] < 1 or box[1] < 1 or box[2] > IMAGE_SIZE - 1 or box[3] > IMAGE_SIZE - 1:
            continue
        if _overlaps(box, boxes):
            continue
        objects.append(obj)
        boxes.append(box)
    img = render_objects(objects)
    img = np.clip(img + NOISE_STD * rng.normal_array(img.shape), 0.0, 1.0)
    return SyntheticScene(image=img[None], objects=objects)


def generate_scenes(rng: Rng, count: int) -> list[SyntheticScene]:
    return [generate_scene(rng) for _ in range(count)]
