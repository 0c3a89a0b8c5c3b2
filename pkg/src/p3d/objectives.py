"""Training objectives and the probe fitting loop.

Losses
    * scale-invariant log depth loss with a variance-focusing weight,
    * multi-scale log-depth gradient matching over dyadic downsamplings,
    * negative log likelihood of an angular error distribution whose
      per-pixel concentration is predicted alongside the normal direction.

Optimization is AdamW with decoupled weight decay, a linear learning-rate
warmup over the first 1.5 epochs and cosine decay to exactly zero at the
final step.  Training always runs a fixed number of epochs, one image per
step, and aborts with a diagnostic if the loss goes non-finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, DegenerateInputError, NumericError, ShapeError
from .probes import (
    DenseProbe,
    ProbeConfig,
    depth_from_bins,
    init_probe,
    normal_from_raw,
    probe_forward,
)
from .tensorcore import Tensor

TASK_DEPTH = "depth"
TASK_NORMALS = "normals"


@dataclass(frozen=True)
class LossConfig:
    """Weights and shape parameters of the training losses."""

    silog_lambda: float = 0.5
    grad_weight: float = 0.5
    grad_scales: int = 4

    def __post_init__(self):
        if not 0.0 <= self.silog_lambda <= 1.0:
            raise ConfigError(f"silog_lambda must be in [0, 1], got {self.silog_lambda}")
        if self.grad_weight < 0:
            raise ConfigError(f"grad_weight must be >= 0, got {self.grad_weight}")
        if self.grad_scales < 1:
            raise ConfigError(f"grad_scales must be >= 1, got {self.grad_scales}")


def _as_mask(valid_mask: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    mask = np.asarray(valid_mask).astype(bool)
    if mask.shape != hw:
        raise ShapeError(f"mask shape {mask.shape} does not match map shape {hw}")
    if not mask.any():
        raise DegenerateInputError("no valid pixels in mask")
    return mask


def _check_pred_map(pred: Tensor, name: str) -> tuple[int, int]:
    if pred.values.ndim != 4 or pred.shape[0] != 1 or pred.shape[1] != 1:
        raise ShapeError(f"{name}: prediction must be (1, 1, H, W), got {pred.shape}")
    return pred.shape[2], pred.shape[3]


def silog_loss(pred_depth: Tensor, gt_depth: np.ndarray, valid_mask: np.ndarray,
               lam: float = 0.5) -> Tensor:
    """Scale-invariant log loss: mean(g^2) - lam * mean(g)^2 over valid
    pixels, with g = ln(pred) - ln(gt).

    ``lam`` trades off absolute error against error variance; at lam = 1
    a global log-scale shift of the prediction is free.
    """
    hw = _check_pred_map(pred_depth, "silog_loss")
    gt = np.asarray(gt_depth, dtype=np.float64)
    if gt.shape != hw:
        raise ShapeError(f"silog_loss: gt shape {gt.shape} does not match prediction {hw}")
    mask = _as_mask(valid_mask, hw)
    if np.any(gt[mask] <= 0):
        raise NumericError("silog_loss: ground-truth depth must be positive on valid pixels")
    if np.any(pred_depth.values <= 0):
        raise NumericError("silog_loss: predicted depth must be positive")

    n = int(mask.sum())
    # log-gt is a constant; zero it outside the mask so masked products stay finite
    log_gt = np.where(mask, np.log(gt, where=mask, out=np.zeros_like(gt)), 0.0)
    mask_c = tc.constant(mask.astype(pred_depth.dtype).reshape(1, 1, *hw), dtype=pred_depth.dtype)
    log_gt_c = tc.constant(log_gt.reshape(1, 1, *hw), dtype=pred_depth.dtype)

    g = tc.mul(tc.sub(tc.log(pred_depth), log_gt_c), mask_c)
    mean_sq = tc.scale(tc.reduce_sum(tc.mul(g, g)), 1.0 / n)
    mean = tc.scale(tc.reduce_sum(g), 1.0 / n)
    return tc.sub(mean_sq, tc.scale(tc.mul(mean, mean), lam))


def gradmatch_loss(pred_depth: Tensor, gt_depth: np.ndarray, valid_mask: np.ndarray,
                   scales: int = 4) -> Tensor:
    """Multi-scale gradient matching on the log-depth residual.

    With R = ln(pred) - ln(gt), each scale contributes the mean of
    |dx R| + |dy R| over valid forward differences (both endpoints valid);
    scale k sees the maps subsampled k times by a factor of 2.  Scales left
    with no valid difference contribute nothing.
    """
    hw = _check_pred_map(pred_depth, "gradmatch_loss")
    gt = np.asarray(gt_depth, dtype=np.float64)
    if gt.shape != hw:
        raise ShapeError(f"gradmatch_loss: gt shape {gt.shape} does not match prediction {hw}")
    mask = _as_mask(valid_mask, hw)
    if np.any(gt[mask] <= 0):
        raise NumericError("gradmatch_loss: ground-truth depth must be positive on valid pixels")
    if np.any(pred_depth.values <= 0):
        raise NumericError("gradmatch_loss: predicted depth must be positive")

    log_gt = np.where(mask, np.log(gt, where=mask, out=np.zeros_like(gt)), 0.0)
    residual = tc.sub(tc.log(pred_depth), tc.constant(log_gt.reshape(1, 1, *hw),
                                                      dtype=pred_depth.dtype))
    mask_k = mask.reshape(1, 1, *hw)

    total: Tensor | None = None
    for k in range(scales):
        if k > 0:
            if residual.shape[2] < 2 and residual.shape[3] < 2:
                break
            residual = tc.subsample2(residual)
            mask_k = mask_k[..., ::2, ::2]
        terms = []
        count = 0
        if residual.shape[3] >= 2:
            valid_h = (mask_k[..., 1:] & mask_k[..., :-1]).astype(pred_depth.dtype)
            count += int(valid_h.sum())
            if valid_h.any():
                terms.append(tc.reduce_sum(tc.mul(tc.absolute(tc.hdiff(residual)),
                                                  tc.constant(valid_h, dtype=pred_depth.dtype))))
        if residual.shape[2] >= 2:
            valid_v = (mask_k[..., 1:, :] & mask_k[..., :-1, :]).astype(pred_depth.dtype)
            count += int(valid_v.sum())
            if valid_v.any():
                terms.append(tc.reduce_sum(tc.mul(tc.absolute(tc.vdiff(residual)),
                                                  tc.constant(valid_v, dtype=pred_depth.dtype))))
        if not terms or count == 0:
            continue
        scale_sum = terms[0] if len(terms) == 1 else tc.add(terms[0], terms[1])
        scale_term = tc.scale(scale_sum, 1.0 / count)
        total = scale_term if total is None else tc.add(total, scale_term)
    if total is None:
        # nothing measurable at any scale: a constant zero with no gradient
        raise DegenerateInputError("gradmatch_loss: no valid differences at any scale")
    return total


_LOG_2PI = math.log(2.0 * math.pi)


def angular_nll_loss(normal: Tensor, kappa: Tensor, gt_normal: np.ndarray,
                     valid_mask: np.ndarray) -> Tensor:
    """Negative log likelihood of the angular error under a concentration-
    parameterized density.

    Per pixel, with theta = arccos(clamp(n_pred . n_gt, -1, 1)) and kappa
    the predicted concentration:

        L = -ln((kappa^2 + 1) / (2 pi (1 + exp(-kappa pi)))) + kappa * theta

    averaged over valid pixels.  The normalizer is folded into stable ops:
    -ln(kappa^2 + 1) + ln(2 pi) + softplus(-pi kappa).
    """
    if normal.values.ndim != 4 or normal.shape[1] != 3:
        raise ShapeError(f"angular_nll_loss: normals must be (1, 3, H, W), got {normal.shape}")
    hw = (normal.shape[2], normal.shape[3])
    if kappa.shape != (1, 1, *hw):
        raise ShapeError(f"angular_nll_loss: kappa shape {kappa.shape} does not match {hw}")
    gt = np.asarray(gt_normal, dtype=np.float64)
    if gt.shape != (3, *hw):
        raise ShapeError(f"angular_nll_loss: gt shape {gt.shape} must be (3, H, W)")
    mask = _as_mask(valid_mask, hw)
    norms = np.linalg.norm(gt[:, mask], axis=0)
    if np.any(np.abs(norms - 1.0) > 1e-4):
        raise NumericError("angular_nll_loss: ground-truth normals must be unit length")

    gt_c = tc.constant(gt.reshape(1, 3, *hw), dtype=normal.dtype)
    dot = tc.channel_dot(tc.mul(normal, gt_c), np.ones(3))
    theta = tc.acos(dot)

    log_norm = tc.add_scalar(
        tc.scale(tc.log(tc.add_scalar(tc.mul(kappa, kappa), 1.0)), -1.0), _LOG_2PI
    )
    log_norm = tc.add(log_norm, tc.softplus(tc.scale(kappa, -math.pi)))
    per_pixel = tc.add(log_norm, tc.mul(kappa, theta))

    n = int(mask.sum())
    mask_c = tc.constant(mask.astype(normal.dtype).reshape(1, 1, *hw), dtype=normal.dtype)
    return tc.scale(tc.reduce_sum(tc.mul(per_pixel, mask_c)), 1.0 / n)


def angular_nll_floor() -> float:
    """Loss value at zero angular error and zero concentration: ln(4 pi)."""
    return math.log(4.0 * math.pi)


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    """AdamW moments plus the fixed training schedule."""

    base_lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: float = 1.5
    total_epochs: int = 10
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError(
                f"warmup_epochs must lie in [0, total_epochs), got {self.warmup_epochs}"
            )


def lr_at(step: int, steps_per_epoch: int, state: OptimState) -> float:
    """Learning rate at a global step: linear 0 -> base_lr over the warmup
    epochs, then cosine decay reaching exactly 0 at the final step."""
    if steps_per_epoch < 1:
        raise ConfigError(f"steps_per_epoch must be >= 1, got {steps_per_epoch}")
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    total = state.total_epochs * steps_per_epoch
    warmup = state.warmup_epochs * steps_per_epoch
    if warmup > 0 and step < warmup:
        return state.base_lr * step / warmup
    if step >= total:
        return 0.0
    t = (step - warmup) / (total - warmup)
    return state.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def adamw_step(named_params: Sequence[tuple[str, Tensor]], state: OptimState, lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Weight decay multiplies parameters by (1 - lr * wd) before the Adam
    update; the moment estimates never see the decay term.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in named_params:
        g = p.grad
        if g is None:
            raise NumericError(f"adamw_step: parameter {name!r} has no gradient")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adamw_step: non-finite gradient for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values, dtype=np.float64)
            state.v[name] = np.zeros_like(p.values, dtype=np.float64)
        g64 = g.astype(np.float64)
        if state.weight_decay:
            p.values *= np.asarray(1.0 - lr * state.weight_decay, dtype=p.values.dtype)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g64
        v *= b2
        v += (1.0 - b2) * g64 * g64
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p.values -= (lr * update).astype(p.values.dtype)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


class ProbeDataset(Protocol):
    """Indexed collection of (features, ground truth, valid mask) samples.

    ``features`` is a list of three (C, H, W) arrays, coarsest first;
    ground truth is (H_img, W_img) for depth or (3, H_img, W_img) for
    normals; the mask is (H_img, W_img) boolean.
    """

    def __len__(self) -> int: ...

    def __getitem__(self, idx: int) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]: ...


def _forward_prediction(probe: DenseProbe, task: str, features: list[np.ndarray],
                        image_hw: tuple[int, int],
                        depth_range: tuple[float, float]) -> Tensor | tuple:
    """Probe forward + head decode + upsample to image resolution.

    Returns the depth map tensor (1, 1, H, W) for the depth task, or a
    (normal, kappa) pair at image resolution for the normals task.
    """
    h, w = image_hw
    if h % 4 or w % 4:
        raise ShapeError(f"image size ({h}, {w}) must be divisible by the output stride 4")
    feats = [tc.astensor(f.reshape(1, *f.shape)) if f.ndim == 3 else tc.astensor(f)
             for f in features]
    out = probe_forward(probe, feats, out_hw=(h // 4, w // 4))
    if task == TASK_DEPTH:
        pred = depth_from_bins(out, depth_range)
        return tc.bilinear_upsample(pred.depth, 4)
    raw_full = tc.bilinear_upsample(out, 4)
    pred = normal_from_raw(raw_full)
    return pred.normal, pred.kappa


def sample_loss(probe: DenseProbe, task: str, sample, loss_cfg: LossConfig,
                depth_range: tuple[float, float]) -> Tensor:
    """Total training loss of one (features, gt, mask) sample."""
    features, gt, mask = sample
    gt = np.asarray(gt)
    image_hw = gt.shape if task == TASK_DEPTH else gt.shape[1:]
    pred = _forward_prediction(probe, task, features, image_hw, depth_range)
    if task == TASK_DEPTH:
        loss = silog_loss(pred, gt, mask, lam=loss_cfg.silog_lambda)
        if loss_cfg.grad_weight > 0:
            loss = tc.add(loss, tc.scale(
                gradmatch_loss(pred, gt, mask, scales=loss_cfg.grad_scales),
                loss_cfg.grad_weight))
        return loss
    if task == TASK_NORMALS:
        normal, kappa = pred
        return angular_nll_loss(normal, kappa, gt, mask)
    raise ConfigError(f"unknown task {task!r}")


def train_probe(
    task: str,
    dataset: ProbeDataset,
    probe_config: ProbeConfig,
    loss_config: LossConfig | None = None,
    depth_range: tuple[float, float] = (0.0, 10.0),
    seed: int = 0,
    optim: OptimState | None = None,
    eval_fn: Callable[[DenseProbe], dict] | None = None,
) -> tuple[DenseProbe, list[dict]]:
    """Fit a probe on a dataset for the configured number of epochs.

    One image per step; sample order is reshuffled each epoch from a
    generator seeded by ``seed``, so the whole run is reproducible.  The
    log holds one record per step (epoch, step, lr, loss) and one summary
    per epoch (mean loss, plus ``eval_fn`` metrics when provided).  A
    non-finite loss aborts with :class:`~p3d.errors.NumericError`.
    """
    if task not in (TASK_DEPTH, TASK_NORMALS):
        raise ConfigError(f"unknown task {task!r}")
    n = len(dataset)
    if n == 0:
        raise DegenerateInputError("train_probe: dataset is empty")
    loss_cfg = loss_config or LossConfig()
    state = optim or OptimState()
    probe = init_probe(probe_config, seed=seed)
    rng = np.random.default_rng(seed)

    log: list[dict] = []
    global_step = 0
    for epoch in range(state.total_epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for idx in order:
            probe.zero_grad()
            loss_t = sample_loss(probe, task, dataset[int(idx)], loss_cfg, depth_range)
            loss = loss_t.item()
            if not math.isfinite(loss):
                raise NumericError(
                    f"training loss became non-finite at epoch {epoch}, step {global_step}"
                )
            tc.backward(loss_t, probe.parameters())
            lr = lr_at(global_step, n, state)
            adamw_step(probe.named_parameters(), state, lr)
            log.append({"kind": "step", "epoch": epoch, "step": global_step,
                        "lr": lr, "loss": loss})
            epoch_losses.append(loss)
            global_step += 1
        record = {"kind": "epoch", "epoch": epoch, "mean_loss": float(np.mean(epoch_losses))}
        if eval_fn is not None:
            record["metrics"] = eval_fn(probe)
        log.append(record)
    return probe, log


def predict_depth(probe: DenseProbe, features: list[np.ndarray], image_hw: tuple[int, int],
                  depth_range: tuple[float, float]) -> np.ndarray:
    """Depth map (H, W) at image resolution, outside any training graph."""
    pred = _forward_prediction(probe, TASK_DEPTH, features, image_hw, depth_range)
    return pred.values[0, 0].copy()


def predict_normals(probe: DenseProbe, features: list[np.ndarray],
                    image_hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """(normals (3, H, W), kappa (H, W)) at image resolution."""
    normal, kappa = _forward_prediction(probe, TASK_NORMALS, features, image_hw, (0.0, 1.0))
    return normal.values[0].copy(), kappa.values[0, 0].copy()
