"""Training, evaluation and the four-way ablation runner."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .. import net
from ..rng import Rng
from .config import TrainConfig
from .detector import Detector, detection_loss
from .proposals import decode_deltas, iou_matrix, make_proposals
from .scenes import generate_scenes

log = logging.getLogger(__name__)

ABLATIONS = (
    ("global", dict(mode="global", grid_rows=1, grid_cols=1)),
    ("offset_only", dict(mode="offset_only")),
    ("non_gating", dict(gating_enabled=False)),
    ("full", dict()),
)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainReport:
    config: TrainConfig
    epoch_losses: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)
    iteration_losses: list[float] = field(default_factory=list)
    final_accuracy: float = float("nan")
    mean_iou: float = float("nan")
    diverged: bool = False

    @property
    def converged(self) -> bool:
        return not self.diverged and bool(np.all(np.isfinite(self.iteration_losses)))

    def metrics(self) -> np.ndarray:
        return np.array([self.final_accuracy, self.mean_iou, float(self.diverged)])

    def to_text(self) -> str:
        lines = ["# toy detector training report"]
        for f in dataclasses.fields(self.config):
            lines.append(f"config.{f.name} = {getattr(self.config, f.name)}")
        lines.append(f"diverged = {str(self.diverged).lower()}")
        lines.append(f"final_accuracy = {self.final_accuracy!r}")
        lines.append(f"mean_iou = {self.mean_iou!r}")
        for i, (loss, acc) in enumerate(zip(self.epoch_losses, self.epoch_accuracy)):
            lines.append(f"epoch {i + 1}: loss = {loss!r} accuracy = {acc!r}")
        return "\n".join(lines) + "\n"


@dataclass
class Dataset:
    images: np.ndarray  # (S, 1, 64, 64)
    scenes: list

    def __len__(self):
        return len(self.scenes)


@dataclass
class ProposalSet:
    scene_index: np.ndarray
    boxes: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    gt_boxes: np.ndarray  # matched ground truth, NaN for background


def build_dataset(rng: Rng, count: int) -> Dataset:
    scenes = generate_scenes(rng, count)
    return Dataset(np.stack([s.image for s in scenes]), scenes)


def sample_proposals(data: Dataset, rng: Rng, per_scene: int, scene_ids=None) -> ProposalSet:
    ids = range(len(data)) if scene_ids is None else scene_ids
    idx, boxes, labels, targets, gts = [], [], [], [], []
    for i in ids:
        scene = data.scenes[i]
        for p in make_proposals(scene, rng, per_scene):
            idx.append(i)
            boxes.append(p.bbox)
            labels.append(p.label)
            targets.append(p.target)
            gts.append(scene.boxes[p.gt_index] if p.gt_index >= 0 else np.full(4, np.nan))
    return ProposalSet(np.array(idx, dtype=np.int64), np.array(boxes).reshape(-1, 4),
                       np.array(labels, dtype=np.int64), np.array(targets).reshape(-1, 4),
                       np.array(gts).reshape(-1, 4))


def _batch_inputs(data: Dataset, props: ProposalSet, mask):
    scene_ids = props.scene_index[mask]
    uniq, local = np.unique(scene_ids, return_inverse=True)
    return data.images[uniq], local, props.boxes[mask]


def evaluate(model: Detector, data: Dataset, props: ProposalSet, chunk: int = 8):
    """Proposal classification accuracy and mean IoU of regressed positives."""
    correct = 0
    ious = []
    for start in range(0, len(data), chunk):
        sel = (props.scene_index >= start) & (props.scene_index < start + chunk)
        if not sel.any():
            continue
        images, local, boxes = _batch_inputs(data, props, sel)
        logits, deltas, _ = model.forward(images, local, boxes)
        correct += int((logits.argmax(axis=1) == props.labels[sel]).sum())
        pos = props.labels[sel] > 0
        if pos.any():
            pred = decode_deltas(boxes[pos], deltas[pos])
            gt = props.gt_boxes[sel][pos]
            ious.extend(iou_matrix(pred[i], gt[i])[0, 0] for i in range(len(pred)))
    acc = correct / max(len(props.labels), 1)
    return acc, float(np.mean(ious)) if ious else float("nan")


def train(config: TrainConfig, progress=None):
    """Train the toy detector; returns ``(report, model)``.

    Deterministic per ``config.seed``: scenes, proposals, initialization and
    shuffling all draw from dedicated child streams of one generator.
    """
    root = Rng(config.seed)
    train_rng, test_rng, init_rng, prop_rng, shuffle_rng = (root.spawn() for _ in range(5))
    train_data = build_dataset(train_rng, config.train_scenes)
    test_data = build_dataset(test_rng, config.test_scenes)
    test_props = sample_proposals(test_data, test_rng, config.proposals_per_scene)
    model = Detector(config, init_rng)
    params = list(model.named_parameters().values())
    report = TrainReport(config)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = config.lr_at(epoch)
        order = shuffle_rng.permutation(len(train_data))
        losses = []
        for start in range(0, len(order), config.batch_scenes):
            ids = order[start:start + config.batch_scenes]
            props = sample_proposals(train_data, prop_rng, config.proposals_per_scene, ids)
            images = train_data.images[ids]
            local = np.repeat(np.arange(len(ids)), config.proposals_per_scene)
            logits, deltas, cache = model.forward(images, local, props.boxes)
            loss, g_logits, g_deltas = detection_loss(
                logits, deltas, props.labels, props.targets, config.reg_weight, len(ids))
            if not np.isfinite(loss):
                report.diverged = True
                report.iteration_losses.append(float(loss))
                log.warning("non-finite loss at epoch %d", epoch + 1)
                return report, model
            model.backward(cache, g_logits, g_deltas)
            net.sgd_step(params, lr, config.momentum)
            loss *= len(ids) / len(props.labels)
            losses.append(loss)
            report.iteration_losses.append(float(loss))
        report.epoch_losses.append(float(np.mean(losses)))
        acc, mean_iou = evaluate(model, test_data, test_props)
        report.epoch_accuracy.append(acc)
        report.final_accuracy, report.mean_iou = acc, mean_iou
        log.info("epoch %d loss %.4f acc %.4f iou %.3f (%.1fs)", epoch + 1,
                 report.epoch_losses[-1], acc, mean_iou, time.perf_counter() - t0)
        if progress is not None:
            progress(epoch, report)
    return report, model


def ablation_configs(base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    return [(name, dataclasses.replace(base, **overrides)) for name, overrides in ABLATIONS]


def run_ablation(base: TrainConfig, progress=None) -> list[tuple[str, TrainReport]]:
    """Train the global / offset-only / non-gating / full variants on one seed."""
    rows = []
    for name, cfg in ablation_configs(base):
        log.info("ablation: %s", name)
        report, _ = train(cfg, progress)
        rows.append((name, report))
    return rows


def format_ablation(rows) -> str:
    lines = [f"{'variant':<12} {'mode':<12} {'gating':<7} {'accuracy':>9} {'mean_iou':>9} {'final_loss':>11}"]
    for name, rep in rows:
        cfg = rep.config
        final_loss = rep.epoch_losses[-1] if rep.epoch_losses else float("nan")
        lines.append(
            f"{name:<12} {cfg.mode:<12} {str(cfg.gating_enabled).lower():<7} "
            f"{rep.final_accuracy:>9.4f} {rep.mean_iou:>9.4f} {final_loss:>11.5f}"
        )
    return "\n".join(lines) + "\n"
