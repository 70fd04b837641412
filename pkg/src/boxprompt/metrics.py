"""Segmentation metrics (Dice, ASSD) and the differentiable Dice loss.

Conventions: Dice of two empty masks is 1.0 (perfect agreement), empty vs
non-empty is 0.0. ASSD is undefined for empty masks and raises. Surfaces are
mask pixels with at least one 4-neighbor outside the mask, where the image
border counts as outside.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import EmptyMaskError, ValidationError
from .validation import check_binary_mask, check_label_mask, check_same_shape

DICE_LOSS_EPS = 1e-5


def dice_score(a, b) -> float:
    """2|a and b| / (|a| + |b|) for binary masks of equal shape."""
    a = check_binary_mask(a, "a")
    b = check_binary_mask(b, "b")
    check_same_shape(a, b)
    size_a = int(a.sum())
    size_b = int(b.sum())
    if size_a == 0 and size_b == 0:
        return 1.0
    overlap = int(np.logical_and(a, b).sum())
    return 2.0 * overlap / (size_a + size_b)


def dice_3d(volume_a, volume_b) -> float:
    """Dice over the pooled voxel counts of two mask stacks.

    This is not the average of per-slice scores: counts are accumulated over
    the whole stack first, so large slices weigh more.
    """
    volume_a = list(volume_a)
    volume_b = list(volume_b)
    if len(volume_a) != len(volume_b):
        raise ValidationError(
            f"volumes: slice count mismatch {len(volume_a)} vs {len(volume_b)}"
        )
    overlap = 0
    total = 0
    for slice_a, slice_b in zip(volume_a, volume_b):
        slice_a = check_binary_mask(slice_a, "a")
        slice_b = check_binary_mask(slice_b, "b")
        check_same_shape(slice_a, slice_b)
        overlap += int(np.logical_and(slice_a, slice_b).sum())
        total += int(slice_a.sum()) + int(slice_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * overlap / total


def surface_pixels(mask: np.ndarray) -> np.ndarray:
    """Coordinates (n, 2) of mask pixels with a 4-neighbor outside the mask."""
    mask = check_binary_mask(mask)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(mask & ~interior)


def assd(a, b) -> float:
    """Average symmetric surface distance between two non-empty masks, in pixels."""
    a = check_binary_mask(a, "a")
    b = check_binary_mask(b, "b")
    check_same_shape(a, b)
    surf_a = surface_pixels(a)
    surf_b = surface_pixels(b)
    if len(surf_a) == 0 or len(surf_b) == 0:
        raise EmptyMaskError("assd is undefined for an empty mask")
    d_ab = cKDTree(surf_b).query(surf_a)[0]
    d_ba = cKDTree(surf_a).query(surf_b)[0]
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """H x W labels to H x W x K float32 one-hot encoding."""
    eye = np.eye(num_classes, dtype=np.float32)
    return eye[labels]


def dice_loss(pred, target) -> tuple[float, np.ndarray]:
    """Soft Dice loss over foreground classes, with its analytic gradient.

    ``pred`` is an H x W x K probability map and ``target`` an H x W label
    mask. Returns ``(loss, grad)`` where ``grad`` has the shape of ``pred``;
    the background channel carries zero gradient because it does not enter
    the loss. Inputs only need matching shapes: the formula tolerates
    unnormalized predictions, which also keeps finite-difference probes of
    the gradient well-defined.
    """
    pred = np.asarray(pred)
    if pred.ndim != 3:
        raise ValidationError(f"pred: expected H x W x K array, got {pred.shape}")
    if not np.isfinite(pred).all():
        raise ValidationError("pred: non-finite entries")
    num_classes = pred.shape[2]
    target = check_label_mask(target, num_classes, name="target")
    if pred.shape[:2] != target.shape:
        raise ValidationError(
            f"pred/target shape mismatch {pred.shape[:2]} vs {target.shape}"
        )

    p = pred.astype(np.float64)
    y = one_hot(target, num_classes).astype(np.float64)
    grad = np.zeros_like(p)
    loss = 1.0
    fg = num_classes - 1
    for k in range(1, num_classes):
        numer = 2.0 * float((p[..., k] * y[..., k]).sum()) + DICE_LOSS_EPS
        denom = float(p[..., k].sum()) + float(y[..., k].sum()) + DICE_LOSS_EPS
        loss -= numer / denom / fg
        grad[..., k] = -(2.0 * y[..., k] * denom - numer) / (denom * denom) / fg
    return loss, grad


@dataclass
class MetricReport:
    """Per-foreground-class Dice and ASSD, plus their averages.

    ``per_class_assd`` entries may be None where the distance is undefined
    (a class empty in prediction or reference); averages skip those entries.
    """

    per_class_dice: list[float] = field(default_factory=list)
    per_class_assd: list[float | None] = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        if not self.per_class_dice:
            return float("nan")
        return float(np.mean(self.per_class_dice))

    @property
    def mean_assd(self) -> float:
        defined = [v for v in self.per_class_assd if v is not None]
        if not defined:
            return float("nan")
        return float(np.mean(defined))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class_id", "dice", "assd"])
        for idx, dice in enumerate(self.per_class_dice):
            assd_value = self.per_class_assd[idx] if idx < len(self.per_class_assd) else None
            writer.writerow([
                idx + 1,
                f"{dice:.6f}",
                "" if assd_value is None else f"{assd_value:.6f}",
            ])
        return buf.getvalue()


def score_labels(pred_labels, true_labels, num_classes: int) -> MetricReport:
    """Compare two label maps class by class on a single slice."""
    pred_labels = check_label_mask(pred_labels, num_classes, "pred_labels")
    true_labels = check_label_mask(true_labels, num_classes, "true_labels")
    check_same_shape(pred_labels, true_labels, "labels")
    report = MetricReport()
    for k in range(1, num_classes):
        mask_pred = pred_labels == k
        mask_true = true_labels == k
        report.per_class_dice.append(dice_score(mask_pred, mask_true))
        try:
            report.per_class_assd.append(assd(mask_pred, mask_true))
        except EmptyMaskError:
            report.per_class_assd.append(None)
    return report
