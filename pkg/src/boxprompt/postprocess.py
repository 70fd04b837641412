"""Connectivity post-processing and assembly of per-class masks into labels.

A refined mask for one class can pick up disconnected false-positive blobs
(another organ captured by an oversized box). Keeping only the largest
connected component removes them, on the assumption that an organ is one
consecutive region per slice.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .validation import check_binary_mask, check_label_mask, check_probability_map, check_same_shape

_OFFSETS_4 = ((-1, 0), (0, -1))
_OFFSETS_8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1))


@dataclass
class ComponentLabeling:
    """Dense component ids (0 = background) with per-component pixel counts.

    Ids are assigned in row-major order of each component's first pixel, so
    id 1 is always the component whose first pixel comes earliest.
    """

    labels: np.ndarray
    sizes: np.ndarray
    connectivity: int

    @property
    def count(self) -> int:
        return len(self.sizes)


class _UnionFind:
    def __init__(self):
        self.parent: list[int] = [0]

    def make(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def connected_components(mask, connectivity: int = 4) -> ComponentLabeling:
    """Two-pass union-find labeling of a binary mask."""
    mask = check_binary_mask(mask)
    if connectivity not in (4, 8):
        raise ValidationError(f"connectivity must be 4 or 8, got {connectivity}")
    offsets = _OFFSETS_4 if connectivity == 4 else _OFFSETS_8
    height, width = mask.shape
    provisional = np.zeros((height, width), dtype=np.int32)
    uf = _UnionFind()

    for row in range(height):
        for col in range(width):
            if not mask[row, col]:
                continue
            neighbor_labels = []
            for d_row, d_col in offsets:
                n_row, n_col = row + d_row, col + d_col
                if 0 <= n_row < height and 0 <= n_col < width and mask[n_row, n_col]:
                    neighbor_labels.append(provisional[n_row, n_col])
            if not neighbor_labels:
                provisional[row, col] = uf.make()
            else:
                first = min(neighbor_labels)
                provisional[row, col] = first
                for other in neighbor_labels:
                    uf.union(first, other)

    labels = np.zeros((height, width), dtype=np.int32)
    dense: dict[int, int] = {}
    sizes: list[int] = []
    for row in range(height):
        for col in range(width):
            if not mask[row, col]:
                continue
            root = uf.find(provisional[row, col])
            if root not in dense:
                dense[root] = len(dense) + 1
                sizes.append(0)
            component = dense[root]
            labels[row, col] = component
            sizes[component - 1] += 1
    return ComponentLabeling(labels, np.asarray(sizes, dtype=np.int64), connectivity)


def keep_largest(mask, connectivity: int = 4) -> np.ndarray:
    """Retain only the largest connected component of ``mask``.

    Size ties go to the component whose first pixel comes earliest in
    row-major order (the one with the smaller id).
    """
    mask = check_binary_mask(mask)
    labeling = connected_components(mask, connectivity)
    if labeling.count == 0:
        return np.zeros_like(mask)
    best = int(np.argmax(labeling.sizes)) + 1
    return labeling.labels == best


def assemble_labels(per_class_masks, probs) -> np.ndarray:
    """Merge per-class binary masks into one label map.

    ``per_class_masks`` is an iterable of ``(class_id, mask)`` pairs. A pixel
    claimed by a single class gets that class; a pixel claimed by several
    goes to the claimant with the highest posterior in ``probs`` (lowest
    class id on exact ties); unclaimed pixels stay background.
    """
    probs = check_probability_map(probs)
    num_classes = probs.shape[2]
    labels = np.zeros(probs.shape[:2], dtype=np.uint8)
    best_score = np.full(probs.shape[:2], -1.0, dtype=np.float64)
    for class_id, mask in sorted(per_class_masks, key=lambda pair: pair[0]):
        if not 1 <= class_id < num_classes:
            raise ValidationError(f"class id {class_id} outside [1, {num_classes})")
        mask = check_binary_mask(mask, f"mask[{class_id}]")
        check_same_shape(mask, labels, "per-class masks")
        score = probs[..., class_id].astype(np.float64)
        take = mask & (score > best_score)
        labels[take] = class_id
        best_score[take] = score[take]
    return check_label_mask(labels, num_classes, "assembled labels")
