"""Two-stage loss, the optimisation loop and checkpoints."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .datacube import (
    AugmentationSpec,
    DatasetSplit,
    HyperspectralCube,
    SceneRecord,
    SegmentationMask,
    augment,
    normalize_cube,
    pseudo_color_cube,
)
from .decoder import AblationFlags, ForwardOutput, ModelConfig, OmniFuse, model_config_from_dict
from .encoders import STRIDE
from .errors import DivergenceError, ParameterError, ShapeError
from .metrics import MetricReport, dsc, hausdorff, iou

log = logging.getLogger(__name__)

DICE_EPS = 1.0
PROB_CLAMP = 1e-7


@dataclass
class LossWeights:
    lambda_ce: float = 0.25
    lambda_dice: float = 0.75
    lambda_w: float = 0.8

    def __post_init__(self):
        for name in ("lambda_ce", "lambda_dice", "lambda_w"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1]")


@dataclass
class TrainConfig:
    lr: float = 0.005
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 50
    seed: int = 0
    grad_clip: float = 1.0
    min_lr_ratio: float = 1e-5
    max_steps: Optional[int] = None
    augment: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError("lr must be > 0")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")


# ---------------------------------------------------------------------------
# losses


def _check_shapes(prob: torch.Tensor, gt: torch.Tensor) -> None:
    if prob.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(prob.shape)} and target {tuple(gt.shape)} differ")


def dice_loss(prob: torch.Tensor, gt: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss over the last two axes, averaged over any leading axes."""
    _check_shapes(prob, gt)
    gt = gt.to(prob.dtype)
    inter = (prob * gt).sum(dim=(-2, -1))
    denom = prob.sum(dim=(-2, -1)) + gt.sum(dim=(-2, -1))
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def ce_loss(prob: torch.Tensor, gt: torch.Tensor, logits: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Pixel-mean binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7].

    With ``logits`` the loss is evaluated in log-sigmoid form instead. The two
    agree wherever the clamp is inactive; the logit form keeps a gradient on
    saturated, wrong pixels where the clamped form has none.
    """
    _check_shapes(prob, gt)
    gt = gt.to(prob.dtype)
    if logits is not None:
        _check_shapes(logits, gt)
        return F.binary_cross_entropy_with_logits(logits, gt)
    p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log1p(-p)).mean()


def stage_loss(prob: torch.Tensor, gt: torch.Tensor, weights: LossWeights, logits: Optional[torch.Tensor] = None) -> torch.Tensor:
    return weights.lambda_ce * ce_loss(prob, gt, logits) + weights.lambda_dice * dice_loss(prob, gt)


def combine_stages(stage1, stage2, weights: LossWeights):
    return weights.lambda_w * stage1 + (1.0 - weights.lambda_w) * stage2


def downsample_mask(gt: torch.Tensor, factor: int = STRIDE) -> torch.Tensor:
    """Nearest-neighbour (cell-centre) downsampling of a binary [.., H, W] mask."""
    x = gt.to(torch.float32).unsqueeze(-3) if gt.dim() >= 3 else gt.to(torch.float32)[None, None]
    out = F.interpolate(x, scale_factor=1.0 / factor, mode="nearest-exact")
    return out.squeeze(-3).to(gt.dtype) if gt.dim() >= 3 else out[0, 0].to(gt.dtype)


def total_loss(coarse, refined, gt: torch.Tensor, weights: Optional[LossWeights] = None) -> torch.Tensor:
    """lambda_w * L(P_c, downsampled gt) + (1 - lambda_w) * L(P_f, gt).

    ``coarse``/``refined`` are probability tensors or mask objects carrying
    ``prob`` and ``logits``.
    """
    weights = weights or LossWeights()

    def unpack(m):
        if isinstance(m, torch.Tensor):
            return m, None
        # upsampled coarse probabilities have no trustworthy logits
        if getattr(m, "upsampled_prob", None) is not None:
            return m.prob, None
        return m.prob, m.logits

    pc, zc = unpack(coarse)
    pf, zf = unpack(refined)
    gt_coarse = downsample_mask(gt, gt.shape[-1] // pc.shape[-1])
    return combine_stages(
        stage_loss(pc, gt_coarse, weights, zc),
        stage_loss(pf, gt, weights, zf),
        weights,
    )


# ---------------------------------------------------------------------------
# data


@dataclass
class Scene:
    cube: HyperspectralCube
    mask: SegmentationMask

    @property
    def scene_id(self) -> str:
        return self.cube.scene_id


def prepare_scene(cube: HyperspectralCube, mask: SegmentationMask, input_mode: str = "hsi") -> Scene:
    cube.check_model_input()
    cube = normalize_cube(cube)
    if input_mode == "pseudo_color":
        cube = pseudo_color_cube(cube)
    elif input_mode != "hsi":
        raise ParameterError(f"unknown input mode {input_mode!r} (expected 'hsi' or 'pseudo_color')")
    return Scene(cube, mask)


def load_scenes(records: Sequence[SceneRecord], input_mode: str = "hsi") -> List[Scene]:
    return [prepare_scene(*r.load(), input_mode=input_mode) for r in records]


def to_batch(scenes: Sequence[Scene], dtype=torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    cubes = torch.from_numpy(np.stack([s.cube.data.transpose(2, 0, 1) for s in scenes])).to(dtype)
    masks = torch.from_numpy(np.stack([s.mask.data for s in scenes]).astype(np.int64))
    return cubes, masks


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    parameters: Dict[str, torch.Tensor]
    manifest: dict

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.parameters, path)
        path.with_suffix(".json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        params = torch.load(path, map_location="cpu", weights_only=True)
        manifest = json.loads(path.with_suffix(".json").read_text())
        return cls(params, manifest)

    def build_model(self) -> OmniFuse:
        m = self.manifest
        model = OmniFuse(m["in_bands"], model_config_from_dict(m["model"]), AblationFlags(**m["flags"]))
        model.load_state_dict(self.parameters)
        model.eval()
        return model


# ---------------------------------------------------------------------------
# evaluation


def predict(model: OmniFuse, scenes: Sequence[Scene], batch_size: int = 4) -> List[ForwardOutput]:
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(scenes), batch_size):
            cubes, _ = to_batch(scenes[i : i + batch_size], next(model.parameters()).dtype)
            outs.append(model(cubes))
    return outs


def evaluate(
    model: OmniFuse,
    scenes: Sequence[Scene],
    weights: Optional[LossWeights] = None,
    batch_size: int = 4,
) -> Tuple[MetricReport, List[dict]]:
    """Mean DSC/IoU/HD (and loss) over scenes plus one row per scene."""
    weights = weights or LossWeights()
    model.eval()
    rows, losses = [], []
    with torch.no_grad():
        for i in range(0, len(scenes), batch_size):
            chunk = scenes[i : i + batch_size]
            cubes, masks = to_batch(chunk, next(model.parameters()).dtype)
            out = model(cubes)
            losses.append(float(total_loss(out.coarse, out.refined, masks, weights)) * len(chunk))
            labels = out.labels().numpy()
            for scene, pred in zip(chunk, labels):
                gt = scene.mask.data
                rows.append(
                    {"scene_id": scene.scene_id, "dsc": dsc(pred, gt), "iou": iou(pred, gt), "hd": hausdorff(pred, gt)}
                )
    report = MetricReport.from_rows(rows, loss=sum(losses) / max(len(scenes), 1))
    return report, rows


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: OmniFuse
    checkpoint: Checkpoint
    log: List[dict] = field(default_factory=list)
    steps: int = 0
    step_losses: List[float] = field(default_factory=list)


def cosine_lr(step: int, total_steps: int, lr: float, min_lr_ratio: float) -> float:
    """Cosine decay from ``lr`` at step 0 to ``lr * min_lr_ratio`` at ``total_steps``."""
    min_lr = lr * min_lr_ratio
    frac = step / max(total_steps, 1)
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * frac))


def _first_bad_parameter(model: torch.nn.Module) -> str:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            return f"{name} (value)"
        if p.grad is not None and not torch.isfinite(p.grad).all():
            return f"{name} (gradient)"
    return "<none: loss itself is non-finite>"


def _augment_batch(scenes: Sequence[Scene], spec: AugmentationSpec, rng: np.random.Generator) -> List[Scene]:
    return [Scene(*augment(s.cube, s.mask, spec, rng)) for s in scenes]


def fit(
    train_scenes: Sequence[Scene],
    val_scenes: Sequence[Scene],
    config: Optional[TrainConfig] = None,
    model_cfg: Optional[ModelConfig] = None,
    flags: Optional[AblationFlags] = None,
    weights: Optional[LossWeights] = None,
    augmentation: Optional[AugmentationSpec] = None,
    extra_manifest: Optional[dict] = None,
) -> TrainResult:
    """AdamW + cosine decay training with best-validation-DSC retention."""
    config = config or TrainConfig()
    model_cfg = model_cfg or ModelConfig()
    flags = flags or AblationFlags()
    weights = weights or LossWeights()
    augmentation = augmentation or AugmentationSpec()
    if not train_scenes or not val_scenes:
        raise ParameterError("training needs non-empty train and validation sets")

    torch.manual_seed(config.seed)
    in_bands = train_scenes[0].cube.shape[2]
    model = OmniFuse(in_bands, model_cfg, flags)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    steps_per_epoch = math.ceil(len(train_scenes) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)

    def lr_at(step: int) -> float:
        return cosine_lr(step, total_steps, config.lr, config.min_lr_ratio)

    manifest = {
        "in_bands": in_bands,
        "model": asdict(model_cfg),
        "flags": asdict(flags),
        "train": asdict(config),
        "loss": asdict(weights),
        **(extra_manifest or {}),
    }
    manifest["config_hash"] = config_hash(manifest)
    best_state = copy.deepcopy(model.state_dict())
    best = {"epoch": 0, "metrics": None}
    best_dsc = -math.inf

    gen = torch.Generator().manual_seed(config.seed)
    aug_rng = np.random.default_rng(config.seed)
    rows: List[dict] = []
    step_losses: List[float] = []
    step = 0
    epoch = 0
    while step < total_steps:
        epoch += 1
        model.train()
        order = torch.randperm(len(train_scenes), generator=gen).tolist()
        epoch_loss, seen, train_rows = 0.0, 0, []
        for i in range(0, len(order), config.batch_size):
            if step >= total_steps:
                break
            batch = [train_scenes[j] for j in order[i : i + config.batch_size]]
            if config.augment:
                batch = _augment_batch(batch, augmentation, aug_rng)
            cubes, masks = to_batch(batch)
            for g in opt.param_groups:
                g["lr"] = lr_at(step)
            out = model(cubes)
            loss = total_loss(out.coarse, out.refined, masks, weights)
            opt.zero_grad(set_to_none=True)
            if not torch.isfinite(loss):
                raise DivergenceError(f"loss became {loss.item()} at step {step}; first bad parameter: {_first_bad_parameter(model)}")
            loss.backward()
            bad = [n for n, p in model.named_parameters() if p.grad is not None and not torch.isfinite(p.grad).all()]
            if bad:
                raise DivergenceError(f"non-finite gradient at step {step}; first bad parameter: {bad[0]}")
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            step += 1
            step_losses.append(loss.item())
            epoch_loss += loss.item() * len(batch)
            seen += len(batch)
            labels = out.labels().numpy()
            for s, pred in zip(batch, labels):
                gt = s.mask.data
                train_rows.append({"dsc": dsc(pred, gt), "iou": iou(pred, gt), "hd": hausdorff(pred, gt)})
        train_report = MetricReport.from_rows(train_rows, loss=epoch_loss / max(seen, 1))
        val_report, _ = evaluate(model, val_scenes, weights, config.batch_size)
        rows.append(train_report.log_row(epoch, "train"))
        rows.append(val_report.log_row(epoch, "val"))
        log.info("epoch %d step %d loss %.4f val dsc %.4f", epoch, step, train_report.loss, val_report.dsc)
        if val_report.dsc > best_dsc:
            best_dsc = val_report.dsc
            best_state = copy.deepcopy(model.state_dict())
            best = {"epoch": epoch, "metrics": val_report.as_dict()}

    manifest.update({"epoch": best["epoch"], "metrics": best["metrics"], "steps": step})
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, Checkpoint(best_state, manifest), rows, step, step_losses)


def train(
    split: DatasetSplit,
    config: Optional[TrainConfig] = None,
    model_cfg: Optional[ModelConfig] = None,
    flags: Optional[AblationFlags] = None,
    weights: Optional[LossWeights] = None,
    augmentation: Optional[AugmentationSpec] = None,
    input_mode: str = "hsi",
) -> TrainResult:
    return fit(
        load_scenes(split.train, input_mode),
        load_scenes(split.val, input_mode),
        config,
        model_cfg,
        flags,
        weights,
        augmentation,
        extra_manifest={"input_mode": input_mode, "split_seed": split.seed},
    )


LOG_COLUMNS = ("epoch", "split", "dsc", "iou", "hd", "loss")


def write_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in LOG_COLUMNS})
