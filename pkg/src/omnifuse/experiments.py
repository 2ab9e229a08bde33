"""Desk-scale experiment protocols shared by the scripts, the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .datacube import SynthParams, synth_scene
from .decoder import AblationFlags, ForwardOutput, ModelConfig, OmniFuse
from .encoders import STRIDE
from .metrics import MetricReport, spectral_redundancy
from .training import Scene, TrainConfig, TrainResult, evaluate, fit, predict, prepare_scene

OVERFIT_SCENES = 16
OVERFIT_STEPS = 200
OVERFIT_PARAMS = SynthParams(H=64, W=64, S=16, noise_sigma=0.05, band_correlation=0.9)


def synth_scenes(n: int, params: SynthParams, seed: int, input_mode: str = "hsi") -> List[Scene]:
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n):
        cube, mask = synth_scene(params, rng)
        cube.scene_id, cube.patient_id = f"scene_{i:04d}", f"patient_{i // 2:03d}"
        scenes.append(prepare_scene(cube, mask, input_mode))
    return scenes


@dataclass
class OverfitResult:
    seed: int
    flags: AblationFlags
    report: MetricReport
    result: TrainResult
    scenes: List[Scene] = field(repr=False, default_factory=list)


def overfit(
    seed: int = 0,
    flags: Optional[AblationFlags] = None,
    steps: int = OVERFIT_STEPS,
    n_scenes: int = OVERFIT_SCENES,
    params: SynthParams = OVERFIT_PARAMS,
    model_cfg: Optional[ModelConfig] = None,
    train_cfg: Optional[TrainConfig] = None,
    input_mode: str = "hsi",
) -> OverfitResult:
    """Train on a synthetic set and score the same set (training-set DSC)."""
    scenes = synth_scenes(n_scenes, params, seed, input_mode)
    cfg = train_cfg or TrainConfig(seed=seed, epochs=10**6, max_steps=steps)
    res = fit(scenes, scenes, cfg, model_cfg or ModelConfig(n_q=16), flags or AblationFlags())
    report, _ = evaluate(res.model, scenes, batch_size=cfg.batch_size)
    return OverfitResult(seed, flags or AblationFlags(), report, res, scenes)


def redundancy_pre_post(model: OmniFuse, scenes: Sequence[Scene]) -> Tuple[float, float]:
    """Mean spectral redundancy of encoder tokens and of enhanced tokens over scenes."""
    pre, post = [], []
    for out in predict(model, scenes):
        for a, b in zip(out.spec_tokens_pre, out.spec_tokens_post):
            pre.append(spectral_redundancy(a.numpy()))
            post.append(spectral_redundancy(b.numpy()))
    return float(np.mean(pre)), float(np.mean(post))


def _cell_labels(mask: np.ndarray, cell: int) -> np.ndarray:
    """Majority label per ``cell`` x ``cell`` block, row-major."""
    h, w = mask.shape
    blocks = mask.reshape(h // cell, cell, w // cell, cell).mean(axis=(1, 3))
    return (blocks >= 0.5).astype(int).reshape(-1)


def embedding_groups(out: ForwardOutput, index: int, mask: np.ndarray) -> List[Tuple[str, np.ndarray, np.ndarray]]:
    """Per-stage labelled spatial embeddings of one scene (raw, CFE, SQS, SSD)."""
    grid_labels = _cell_labels(mask, STRIDE)
    patch_labels = _cell_labels(mask, 2 * STRIDE)
    raw = out.spa_grid_pre[index].reshape(-1, out.spa_grid_pre.shape[-1]).numpy()
    groups = [("raw", raw, grid_labels)]
    cfe = out.spa_grid_post[index].reshape(-1, out.spa_grid_post.shape[-1]).numpy()
    groups.append(("CFE", cfe, grid_labels))
    if out.queries is not None:
        idx = out.queries.source_indices[index].numpy()
        groups.append(("SQS", out.queries.tokens[index].numpy(), patch_labels[idx]))
        if out.decoded is not None:
            groups.append(("SSD", out.decoded[index].numpy(), patch_labels[idx]))
    return groups
