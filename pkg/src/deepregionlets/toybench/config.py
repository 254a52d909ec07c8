from __future__ import annotations

from dataclasses import dataclass

from ..regionlet import MODES, POOL_MODES


@dataclass(frozen=True)
class TrainConfig:
    """Toy detector training settings.

    The regionlet defaults are 16 regions on a 4x4 cell grid, each sampled
    on a 4x4 grid; the learning rate drops tenfold at ``lr_drop_epoch``.
    """

    grid_rows: int = 4
    grid_cols: int = 4
    H: int = 4
    W: int = 4
    mode: str = "projective"
    gating_enabled: bool = True
    pool_mode: str = "max"
    lr: float = 1e-3
    lr_final: float = 1e-4
    lr_drop_epoch: int = 15
    momentum: float = 0.9
    epochs: int = 20
    seed: int = 0
    train_scenes: int = 200
    test_scenes: int = 100
    proposals_per_scene: int = 16
    batch_scenes: int = 4
    backbone_channels: int = 16
    roi_pool_size: int = 8
    head_hidden: int = 128
    reg_weight: float = 1.0
    per_region_gate: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.pool_mode not in POOL_MODES:
            raise ValueError(f"pool_mode must be one of {POOL_MODES}, got {self.pool_mode!r}")
        if self.mode == "global" and (self.grid_rows, self.grid_cols) != (1, 1):
            raise ValueError("global mode needs grid_rows = grid_cols = 1")
        for name in ("grid_rows", "grid_cols", "H", "W", "epochs", "train_scenes",
                     "test_scenes", "proposals_per_scene", "batch_scenes",
                     "backbone_channels", "roi_pool_size", "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")

    @property
    def num_regions(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def roi_feature_dim(self) -> int:
        return self.backbone_channels * self.roi_pool_size ** 2

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.lr_drop_epoch else self.lr_final
