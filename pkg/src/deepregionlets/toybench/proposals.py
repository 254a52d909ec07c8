"""Jittered ground-truth proposals standing in for a region proposal network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..rng import Rng
from .scenes import IMAGE_SIZE, SyntheticScene

BACKGROUND = 0
POSITIVE_IOU = 0.5
MIN_SIZE = 4.0


@dataclass(frozen=True)
class Proposal:
    bbox: np.ndarray  # (x0, y0, x1, y1), image pixels
    label: int  # 0 background, 1 + class index otherwise
    target: np.ndarray  # box deltas to the matched ground truth, zeros for background
    gt_index: int = -1


def iou(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def encode_deltas(proposal, gt) -> np.ndarray:
    pw, ph = proposal[2] - proposal[0], proposal[3] - proposal[1]
    gw, gh = gt[2] - gt[0], gt[3] - gt[1]
    return np.array([
        ((gt[0] + gt[2]) - (proposal[0] + proposal[2])) / (2 * pw),
        ((gt[1] + gt[3]) - (proposal[1] + proposal[3])) / (2 * ph),
        np.log(gw / pw),
        np.log(gh / ph),
    ])


def decode_deltas(proposals, deltas) -> np.ndarray:
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    cx = (p[:, 0] + p[:, 2]) / 2 + d[:, 0] * pw
    cy = (p[:, 1] + p[:, 3]) / 2 + d[:, 1] * ph
    w = pw * np.exp(np.clip(d[:, 2], -4, 4))
    h = ph * np.exp(np.clip(d[:, 3], -4, 4))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def clip_box(box) -> np.ndarray:
    x0, y0, x1, y1 = np.clip(box, 0.0, float(IMAGE_SIZE))
    if x1 - x0 < MIN_SIZE:
        x0 = min(x0, IMAGE_SIZE - MIN_SIZE)
        x1 = x0 + MIN_SIZE
    if y1 - y0 < MIN_SIZE:
        y0 = min(y0, IMAGE_SIZE - MIN_SIZE)
        y1 = y0 + MIN_SIZE
    return np.array([x0, y0, x1, y1])


def jitter_box(box, rng: Rng, scale: float = 0.3, shift: float = 0.2) -> np.ndarray:
    w, h = box[2] - box[0], box[3] - box[1]
    cx = (box[0] + box[2]) / 2 + rng.uniform(-shift, shift) * w
    cy = (box[1] + box[3]) / 2 + rng.uniform(-shift, shift) * h
    w *= 1.0 + rng.uniform(-scale, scale)
    h *= 1.0 + rng.uniform(-scale, scale)
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def random_box(rng: Rng) -> np.ndarray:
    w = rng.uniform(8.0, 28.0)
    h = rng.uniform(8.0, 28.0)
    x0 = rng.uniform(0.0, IMAGE_SIZE - w)
    y0 = rng.uniform(0.0, IMAGE_SIZE - h)
    return np.array([x0, y0, x0 + w, y0 + h])


def label_box(box, scene: SyntheticScene) -> Proposal:
    if not scene.objects:
        return Proposal(box, BACKGROUND, np.zeros(4))
    gts = scene.boxes
    ious = iou_matrix(box, gts)[0]
    j = int(np.argmax(ious))
    if ious[j] >= POSITIVE_IOU:
        return Proposal(box, 1 + scene.objects[j].cls, encode_deltas(box, gts[j]), j)
    return Proposal(box, BACKGROUND, np.zeros(4))


def make_proposals(scene: SyntheticScene, rng: Rng, n: int) -> list[Proposal]:
    """Alternate jittered ground-truth boxes and uniformly random boxes."""
    if n < 1:
        raise ValueError("need at least one proposal")
    out = []
    k = len(scene.objects)
    for i in range(n):
        if i % 2 == 0 and k:
            box = jitter_box(scene.objects[(i // 2) % k].bbox, rng)
        else:
            box = random_box(rng)
        out.append(label_box(clip_box(box), scene))
    return out
