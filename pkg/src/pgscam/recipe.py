"""The frozen reference experiment: scene sets, training settings, model cache."""

from __future__ import annotations

import os
from dataclasses import dataclass

from .geometry import PointCloud, SceneConfig, scene_seed, synth_scene
from .segnet import ArchitectureSpec, Checkpoint, train

TRAIN_SEED = 0
HELDOUT_SEED = 1


@dataclass(frozen=True)
class Recipe:
    train_scenes: int = 20
    epochs: int = 30
    lr: float = 1e-3
    seed: int = 0


REFERENCE = Recipe()


def scenes(run_seed: int, count: int) -> list[PointCloud]:
    """Scenes ``0..count-1`` of a run; identical to ``pgscam synth --seed``."""
    return [synth_scene(SceneConfig(seed=scene_seed(run_seed, i))) for i in range(count)]


def train_reference(recipe: Recipe = REFERENCE) -> tuple[Checkpoint, list[float]]:
    return train(scenes(TRAIN_SEED, recipe.train_scenes), ArchitectureSpec(), recipe.epochs,
                 recipe.lr, recipe.seed)


def reference_checkpoint(cache_dir: str | None = None) -> Checkpoint:
    """Train the reference model, or load it from ``cache_dir`` if present."""
    path = os.path.join(cache_dir, "reference.pgsc") if cache_dir else None
    if path and os.path.exists(path):
        return Checkpoint.load(path)
    ckpt, _ = train_reference()
    if path:
        os.makedirs(cache_dir, exist_ok=True)
        ckpt.save(path)
    return ckpt
