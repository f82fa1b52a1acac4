"""Loss, class/boundary weighting, augmentation, and the optimization loop."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.ndimage
import torch

from .errors import ConfigError, DimensionError
from .netgraph import NetworkSpec, TorchNet, WeightStore, init_weights

LOG_EPS = 1e-7
DICE_EPS = 1e-7
EARLY_STOP_MIN_DELTA = 1e-4  # "no relevant change" in validation loss


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 1e-6
    initial_lr: float = 0.01
    lr_step_epochs: int = 20
    lr_factor: float = 0.1
    max_epochs: int = 60
    early_stop_patience: int = 8
    val_fraction: float = 0.15
    aug_translate_px: int = 10
    aug_rotate_deg: float = 10.0
    aug_scale_range: tuple[float, float] = (0.9, 1.1)
    boundary_weight_scale: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        positives = (
            self.batch_size,
            self.momentum,
            self.weight_decay,
            self.initial_lr,
            self.lr_step_epochs,
            self.lr_factor,
            self.max_epochs,
            self.early_stop_patience,
        )
        if any(p <= 0 for p in positives):
            raise ConfigError("all scalar training parameters must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.aug_scale_range[0] > self.aug_scale_range[1]:
            raise ConfigError("aug_scale_range has min > max")


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: initial_lr * lr_factor ** floor(epoch / lr_step_epochs)."""
    return cfg.initial_lr * cfg.lr_factor ** (epoch // cfg.lr_step_epochs)


@dataclass
class ClassWeights:
    """Median-frequency class weights; absent classes get 0 and are flagged."""

    weights: np.ndarray
    absent: tuple[int, ...]


def median_frequency_weights(
    label_slices: Sequence[np.ndarray], num_classes: int
) -> ClassWeights:
    """w_c = median(frequency over present classes) / frequency_c."""
    counts = np.zeros(num_classes, dtype=np.int64)
    total = 0
    for sl in label_slices:
        arr = np.asarray(sl)
        counts += np.bincount(arr.ravel(), minlength=num_classes)[:num_classes]
        total += arr.size
    if total == 0:
        raise ValueError("median_frequency_weights needs at least one labeled voxel")
    freq = counts / total
    present = freq > 0
    if not present.any():
        raise ValueError("no class present in the given slices")
    med = float(np.median(freq[present]))
    weights = np.zeros(num_classes, dtype=np.float64)
    weights[present] = med / freq[present]
    return ClassWeights(weights=weights, absent=tuple(np.flatnonzero(~present)))


def boundary_weight_map(labels: np.ndarray, scale: float) -> np.ndarray:
    """Weight 1 everywhere plus `scale` wherever a 4-neighbor differs in class.

    Works on a 2D slice; for volumes the map is taken in-plane per slice.
    """
    labels = np.asarray(labels)
    boundary = np.zeros(labels.shape, dtype=bool)
    diff = labels[..., 1:, :] != labels[..., :-1, :]
    boundary[..., 1:, :] |= diff
    boundary[..., :-1, :] |= diff
    diff = labels[..., :, 1:] != labels[..., :, :-1]
    boundary[..., :, 1:] |= diff
    boundary[..., :, :-1] |= diff
    return (1.0 + scale * boundary).astype(np.float32)


def _loss_from_probs(
    probs: torch.Tensor,
    target: torch.Tensor,
    class_weights: torch.Tensor,
    boundary: torch.Tensor,
) -> torch.Tensor:
    """Composite of boundary/class-weighted log loss and soft Dice loss.

    probs is (C, *spatial) summing to 1 over C; target is integer (*spatial).
    """
    picked = probs.gather(0, target.unsqueeze(0)).squeeze(0)
    wce = (-class_weights[target] * boundary * torch.log(picked + LOG_EPS)).mean()

    with torch.no_grad():
        pred_ids = probs.argmax(dim=0)
        present = torch.unique(torch.cat([target.reshape(-1), pred_ids.reshape(-1)]))
    dice_sum = probs.new_zeros(())
    for c in present:
        p = probs[c]
        t = (target == c).to(probs.dtype)
        num = 2.0 * (p * t).sum() + DICE_EPS
        den = (p * p).sum() + (t * t).sum() + DICE_EPS
        dice_sum = dice_sum + num / den
    dice_loss = 1.0 - dice_sum / len(present)
    return wce + dice_loss


def _as_class_weight_tensor(
    cw: ClassWeights | np.ndarray | None, num_classes: int, dtype: torch.dtype
) -> torch.Tensor:
    if cw is None:
        return torch.ones(num_classes, dtype=dtype)
    arr = cw.weights if isinstance(cw, ClassWeights) else np.asarray(cw, dtype=np.float64)
    return torch.as_tensor(np.asarray(arr), dtype=dtype)


def composite_loss(
    pred: np.ndarray,
    target: np.ndarray,
    class_weights: ClassWeights | np.ndarray | None = None,
    boundary_weights: np.ndarray | None = None,
) -> float:
    """Evaluate the composite loss on a class-probability array.

    pred is (C, *spatial); target holds integer class ids of the same spatial
    shape. Unit class and boundary weights are used when omitted.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target)
    if pred.shape[1:] != target.shape:
        raise DimensionError(f"pred {pred.shape} does not match target {target.shape}")
    if boundary_weights is not None and boundary_weights.shape != target.shape:
        raise DimensionError("boundary weight shape mismatch")
    bw = (
        torch.ones(target.shape, dtype=torch.float64)
        if boundary_weights is None
        else torch.as_tensor(np.asarray(boundary_weights, dtype=np.float64))
    )
    cw = _as_class_weight_tensor(class_weights, pred.shape[0], torch.float64)
    loss = _loss_from_probs(
        torch.as_tensor(pred), torch.as_tensor(target, dtype=torch.long), cw, bw
    )
    return float(loss)


def loss_gradient_wrt_logits(
    logits: np.ndarray,
    target: np.ndarray,
    class_weights: ClassWeights | np.ndarray | None = None,
    boundary_weights: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of composite_loss(softmax(logits), target) w.r.t. the logits."""
    t_logits = torch.as_tensor(np.asarray(logits, dtype=np.float64)).requires_grad_(True)
    target_t = torch.as_tensor(np.asarray(target), dtype=torch.long)
    bw = (
        torch.ones(target.shape, dtype=torch.float64)
        if boundary_weights is None
        else torch.as_tensor(np.asarray(boundary_weights, dtype=np.float64))
    )
    cw = _as_class_weight_tensor(class_weights, logits.shape[0], torch.float64)
    loss = _loss_from_probs(torch.softmax(t_logits, dim=0), target_t, cw, bw)
    loss.backward()
    return t_logits.grad.numpy().copy()


def augment_slice(
    image: np.ndarray, labels: np.ndarray, cfg: TrainConfig, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """One random rigid+scale transform applied to image (bilinear) and labels
    (nearest neighbor); deterministic per seed."""
    rng = np.random.default_rng(seed)
    t = float(cfg.aug_translate_px)
    ty = rng.uniform(-t, t)
    tx = rng.uniform(-t, t)
    angle = np.deg2rad(rng.uniform(-cfg.aug_rotate_deg, cfg.aug_rotate_deg))
    scale = rng.uniform(cfg.aug_scale_range[0], cfg.aug_scale_range[1])
    if ty == 0.0 and tx == 0.0 and angle == 0.0 and scale == 1.0:
        return image.astype(np.float32, copy=True), labels.copy()

    c = np.array([(image.shape[0] - 1) / 2.0, (image.shape[1] - 1) / 2.0])
    cos, sin = np.cos(-angle), np.sin(-angle)
    inv = np.array([[cos, -sin], [sin, cos]]) / scale
    offset = c - inv @ (c + np.array([ty, tx]))
    out_img = scipy.ndimage.affine_transform(
        image.astype(np.float32), inv, offset=offset, order=1, mode="constant", cval=0.0
    )
    out_lab = scipy.ndimage.affine_transform(
        labels, inv, offset=offset, order=0, mode="constant", cval=0
    )
    return out_img.astype(np.float32), out_lab.astype(labels.dtype)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    best_val_loss: float


def write_training_log(records: Sequence[EpochRecord], path: str | Path) -> None:
    lines = ["epoch,lr,train_loss,val_loss"]
    for r in records:
        lines.append(f"{r.epoch},{r.lr!r},{r.train_loss!r},{r.val_loss!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def _augmentation_seed(base_seed: int, epoch: int, index: int) -> int:
    # stable derivation so parallel workers could draw independently
    return (base_seed * 1_000_003 + epoch) * 1_000_003 + index


def _prep_sample(
    sample: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    aug_seed: int | None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    image, target = sample
    image = np.asarray(image, dtype=np.float32)
    target = np.asarray(target)
    if aug_seed is not None and image.ndim == 2:
        image, target = augment_slice(image, target, cfg, aug_seed)
    boundary = boundary_weight_map(target, cfg.boundary_weight_scale)
    if image.ndim == target.ndim:  # single-channel input
        image = image[None]
    return image, target, boundary


def _batches(indexable: list, batch_size: int):
    """Group consecutive samples of identical shape into batches."""
    start = 0
    while start < len(indexable):
        shape = indexable[start][0].shape
        end = start + 1
        while (
            end < len(indexable)
            and end - start < batch_size
            and indexable[end][0].shape == shape
        ):
            end += 1
        yield indexable[start:end]
        start = end


def _mean_loss(
    net: TorchNet,
    prepped: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    cw: torch.Tensor,
    batch_size: int,
) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in _batches(prepped, batch_size):
            xb = torch.from_numpy(np.stack([b[0] for b in batch]))
            yb = torch.from_numpy(np.stack([b[1] for b in batch]).astype(np.int64))
            wb = torch.from_numpy(np.stack([b[2] for b in batch]))
            probs = net(xb)
            for j in range(len(batch)):
                total += float(_loss_from_probs(probs[j], yb[j], cw, wb[j]))
                count += 1
    return total / max(count, 1)


def train_model(
    spec: NetworkSpec,
    data: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    initial_weights: WeightStore | None = None,
) -> tuple[WeightStore, list[EpochRecord]]:
    """SGD with momentum, step-decayed learning rate, slice-level validation
    hold-out and early stopping on the validation loss.

    data is a sequence of (input, target) pairs; 2D single-channel inputs are
    augmented online, multi-channel inputs pass through untouched.
    """
    cfg.validate()
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    torch.manual_seed(cfg.seed)

    split_rng = np.random.default_rng([cfg.seed, 0x5EED])
    perm = split_rng.permutation(len(data))
    n_val = int(round(cfg.val_fraction * len(data)))
    n_val = max(1, n_val) if len(data) >= 2 else 0
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]

    cw_np = median_frequency_weights(
        [np.asarray(data[i][1]) for i in train_idx], spec.num_classes
    )
    cw = torch.as_tensor(cw_np.weights, dtype=torch.float32)

    net = TorchNet(spec, initial_weights or init_weights(spec, cfg.seed))
    optimizer = torch.optim.SGD(
        [
            {"params": net.decayable_parameters(), "weight_decay": cfg.weight_decay},
            {"params": net.plain_parameters(), "weight_decay": 0.0},
        ],
        lr=cfg.initial_lr,
        momentum=cfg.momentum,
    )

    val_prepped = [_prep_sample(data[i], cfg, None) for i in val_idx]
    records: list[EpochRecord] = []
    best_val = float("inf")
    since_improve = 0

    for epoch in range(cfg.max_epochs):
        lr = lr_schedule(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        order_rng = np.random.default_rng([cfg.seed, 0x09DE9, epoch])
        order = train_idx[order_rng.permutation(len(train_idx))]

        net.train()
        prepped = [
            _prep_sample(data[i], cfg, _augmentation_seed(cfg.seed, epoch, int(i)))
            for i in order
        ]
        epoch_loss, seen = 0.0, 0
        for batch in _batches(prepped, cfg.batch_size):
            xb = torch.from_numpy(np.stack([b[0] for b in batch]))
            yb = torch.from_numpy(np.stack([b[1] for b in batch]).astype(np.int64))
            wb = torch.from_numpy(np.stack([b[2] for b in batch]))
            optimizer.zero_grad()
            probs = net(xb)
            loss = torch.stack(
                [_loss_from_probs(probs[j], yb[j], cw, wb[j]) for j in range(len(batch))]
            ).mean()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item() * len(batch)
            seen += len(batch)
        train_loss = epoch_loss / max(seen, 1)

        net.eval()
        val_loss = (
            _mean_loss(net, val_prepped, cw, cfg.batch_size) if val_prepped else train_loss
        )

        if best_val - val_loss > EARLY_STOP_MIN_DELTA:
            best_val = val_loss
            since_improve = 0
        else:
            since_improve += 1
        records.append(
            EpochRecord(
                epoch=epoch,
                lr=lr,
                train_loss=train_loss,
                val_loss=val_loss,
                best_val_loss=min(best_val, val_loss),
            )
        )
        if since_improve >= cfg.early_stop_patience:
            break

    return net.export_weights(), records
