"""Toy detector: three-conv backbone, regionlet module, classification and
box-regression heads. All gradients are hand-wired."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import net, regionlet
from ..net import Parameter
from ..rng import Rng
from .config import TrainConfig
from .scenes import CLASSES

NUM_OUTPUTS = len(CLASSES) + 1
# image position of the first backbone output pixel centre, and its stride
BACKBONE_OFFSET = 4.0
BACKBONE_STRIDE = 2.0


def _pool_weights(start, size, S: int, length: int) -> np.ndarray:
    """(N, S, length) weights: bin s averages the tent kernels at lattice
    samples 2s and 2s+1 of a 2S-point align-corners grid over [start,
    start + size - 1]. Samples off the map contribute nothing."""
    t = np.arange(2 * S) / (2 * S - 1)
    pos = start[:, None] + t[None, :] * (size[:, None] - 1.0)
    lattice = np.arange(length)
    k = np.maximum(0.0, 1.0 - np.abs(pos[:, :, None] - lattice[None, None, :]))
    return k.reshape(len(start), S, 2, length).mean(axis=2)


def boxes_to_rois(boxes) -> np.ndarray:
    """Image boxes (x0, y0, x1, y1) -> feature-map rois (w0, h0, w, h).

    The first and last covered pixel centres map through the backbone's
    offset and stride onto feature-map coordinates.
    """
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    first = (b[:, :2] + 0.5 - BACKBONE_OFFSET) / BACKBONE_STRIDE
    last = (b[:, 2:] - 0.5 - BACKBONE_OFFSET) / BACKBONE_STRIDE
    size = np.maximum(last - first, 0.0) + 1.0
    return np.concatenate([first, size], axis=1)


@dataclass
class ForwardCache:
    convs: list
    relus: list
    U: np.ndarray
    batch_index: np.ndarray
    roi_pool: object
    regionlets: regionlet.RegionletFeature
    fc_cache: object
    relu_cache: object
    hidden: np.ndarray


class Detector:
    def __init__(self, config: TrainConfig, rng: Rng):
        self.config = config
        C = config.backbone_channels
        mid = max(C // 2, 1)
        self.conv_specs = [(1, mid, 1), (mid, C, 2), (C, C, 1)]
        self.convs = []
        for cin, cout, _ in self.conv_specs:
            fan = cin * 9
            self.convs.append((
                Parameter(net.uniform_init(rng, fan, (cout, cin, 3, 3))),
                Parameter(np.zeros(cout)),
            ))
        K = config.num_regions
        self.heads = regionlet.rsn_init(
            K, config.roi_feature_dim, config.grid_rows, config.grid_cols, rng, mode=config.mode,
        )
        self.gate = regionlet.gating_init(
            C, config.H, config.W, rng, K=K, per_region=config.per_region_gate,
        )
        feat = K * C
        self.fc_w = Parameter(net.uniform_init(rng, feat, (feat, config.head_hidden)))
        self.fc_b = Parameter(np.zeros(config.head_hidden))
        self.cls_w = Parameter(net.uniform_init(rng, config.head_hidden, (config.head_hidden, NUM_OUTPUTS)))
        self.cls_b = Parameter(np.zeros(NUM_OUTPUTS))
        self.reg_w = Parameter(np.zeros((config.head_hidden, 4)))
        self.reg_b = Parameter(np.zeros(4))

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for i, (w, b) in enumerate(self.convs):
            out[f"conv{i + 1}.w"] = w
            out[f"conv{i + 1}.b"] = b
        for k, head in enumerate(self.heads):
            for name, p in head.parameters().items():
                out[f"rsn{k:02d}.{name}"] = p
        if self.config.gating_enabled:
            out["gate.w"] = self.gate.w
            out["gate.b"] = self.gate.b
        out.update({
            "fc.w": self.fc_w, "fc.b": self.fc_b,
            "cls.w": self.cls_w, "cls.b": self.cls_b,
            "reg.w": self.reg_w, "reg.b": self.reg_b,
        })
        return out

    # ------------------------------------------------------------ forward

    def backbone(self, images):
        x = np.asarray(images, dtype=np.float64)
        convs, relus = [], []
        for (w, b), (_, _, stride) in zip(self.convs, self.conv_specs):
            x, cc = net.conv2d_forward(x, w.value, b.value, stride)
            x, rc = net.relu_forward(x)
            convs.append(cc)
            relus.append(rc)
        return x, convs, relus

    def roi_features(self, U, batch_index, rois):
        """Average-pool each roi to an S x S grid, flattened to (N, C*S*S).

        Each bin averages a 2 x 2 block of bilinear samples from an
        align-corners 2S x 2S lattice over the roi. Bilinear sampling on an
        axis-aligned lattice is separable, so the pool is Ry @ U @ Rx^T with
        per-roi row/column weight matrices.
        """
        S = self.config.roi_pool_size
        Hin, Win = U.shape[2:]
        Ry = _pool_weights(rois[:, 1], rois[:, 3], S, Hin)
        Rx = _pool_weights(rois[:, 0], rois[:, 2], S, Win)
        pooled = Ry[:, None] @ U[batch_index] @ Rx[:, None].transpose(0, 1, 3, 2)
        return pooled.reshape(len(batch_index), -1), (Ry, Rx)

    def forward(self, images, batch_index, boxes):
        cfg = self.config
        U, convs, relus = self.backbone(images)
        batch_index = np.asarray(batch_index, dtype=np.int64)
        rois = boxes_to_rois(boxes)
        x, roi_pool = self.roi_features(U, batch_index, rois)
        feats = regionlet.regionlet_extract_batch_forward(
            self.heads, self.gate, U, batch_index, rois, x, cfg.H, cfg.W,
            cfg.pool_mode, cfg.gating_enabled,
        )
        flat = feats.pooled.reshape(len(batch_index), -1)
        a, fc_cache = net.fc_forward(flat, self.fc_w.value, self.fc_b.value)
        hidden, relu_cache = net.relu_forward(a)
        logits = hidden @ self.cls_w.value + self.cls_b.value
        deltas = hidden @ self.reg_w.value + self.reg_b.value
        cache = ForwardCache(convs, relus, U, batch_index, roi_pool, feats,
                             fc_cache, relu_cache, hidden)
        return logits, deltas, cache

    # ------------------------------------------------------------ backward

    def backward(self, cache: ForwardCache, grad_logits, grad_deltas):
        """Accumulate parameter gradients into each Parameter.grad."""
        h = cache.hidden
        self.cls_w.grad += h.T @ grad_logits
        self.cls_b.grad += grad_logits.sum(axis=0)
        self.reg_w.grad += h.T @ grad_deltas
        self.reg_b.grad += grad_deltas.sum(axis=0)
        g_h = grad_logits @ self.cls_w.value.T + grad_deltas @ self.reg_w.value.T
        g_a = net.relu_backward(cache.relu_cache, g_h)
        g_flat, gw, gb = net.fc_backward(cache.fc_cache, self.fc_w.value, g_a)
        self.fc_w.grad += gw
        self.fc_b.grad += gb

        feats = cache.regionlets
        g = regionlet.regionlet_extract_backward(feats, g_flat.reshape(feats.pooled.shape))
        for head, hg in zip(self.heads, g.heads):
            for name, p in head.parameters().items():
                p.grad += hg[name]
        if self.config.gating_enabled:
            self.gate.w.grad += g.gate["w"]
            self.gate.b.grad += g.gate["b"]

        grad_U = g.U
        S = self.config.roi_pool_size
        N, C = len(cache.batch_index), cache.U.shape[1]
        Ry, Rx = cache.roi_pool
        g_pool = g.roi_feature.reshape(N, C, S, S)
        g_rois = Ry[:, None].transpose(0, 1, 3, 2) @ g_pool @ Rx[:, None]
        for b in np.unique(cache.batch_index):
            grad_U[b] += g_rois[cache.batch_index == b].sum(axis=0)

        g = grad_U
        for i in reversed(range(len(self.convs))):
            g = net.relu_backward(cache.relus[i], g)
            g, gw, gb = net.conv2d_backward(cache.convs[i], g)
            self.convs[i][0].grad += gw
            self.convs[i][1].grad += gb
        return g


def detection_loss(logits, deltas, labels, targets, reg_weight: float = 1.0, num_images: int = 1):
    """Cross-entropy plus smooth-L1 on positive proposals, summed over each
    image's proposals and averaged over ``num_images``.

    Returns (loss, grad_logits, grad_deltas).
    """
    labels = np.asarray(labels, dtype=np.int64)
    N = len(labels)
    if num_images < 1:
        raise ValueError("num_images must be positive")
    ce, g_logits = net.softmax_ce(logits, labels)
    pos = labels > 0
    g_deltas = np.zeros_like(deltas)
    reg = 0.0
    if pos.any():
        reg, g_deltas[pos] = net.smooth_l1(deltas[pos], targets[pos])
    scale = 1.0 / num_images
    loss = (ce * N + reg_weight * reg) * scale
    return loss, g_logits * (N * scale), g_deltas * (reg_weight * scale)
