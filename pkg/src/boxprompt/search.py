"""Box-prompt search guided by two feature spaces.

One search per (slice, foreground class). Starting from the most confident
pixels of the class, the pixel set grows over the target-model feature space
(high cosine similarity to a spatially nearby member), then over the
segmenter feature space (cosine distance to a prototype estimated from the
segmenter's own mask). After every growth step the bounding box of the set,
padded by a margin, is sent to the segmenter; the search stops when the
segmenter output stays stable across consecutive prompts. If growth stalls
without stability, the box is expanded artificially a few times before
giving up.

Propagation joins a candidate when at least one member within the radius
passes the feature test; the set only ever grows, so boxes never shrink
within a phase.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .exceptions import ClassAbsentError, FeatureCapabilityError, ValidationError
from .validation import (
    check_binary_mask,
    check_feature_map,
    check_probability_map,
    check_same_shape,
)

PHASE_TBS = "TBS"
PHASE_MBS = "MBS"
PHASE_ARTIFICIAL = "ARTIFICIAL"


@dataclass(frozen=True)
class SearchConfig:
    """Knobs of the box-prompt search; defaults follow the abdominal profile."""

    p_delta: float = 0.005
    tau_f: float = 0.99
    r: int = 4
    margin_m: int = 2
    tau_delta: float = 15.0
    tau_div: float = 2.5
    tau_max: float = 0.35
    n_artificial: int = 3
    max_iters: int = 256

    def __post_init__(self):
        if not 0.0 < self.p_delta < 1.0:
            raise ValidationError(f"p_delta must be in (0, 1), got {self.p_delta}")
        if not 0.0 < self.tau_f <= 1.0:
            raise ValidationError(f"tau_f must be in (0, 1], got {self.tau_f}")
        if self.r < 1:
            raise ValidationError(f"r must be >= 1, got {self.r}")
        if self.margin_m < 0:
            raise ValidationError(f"margin_m must be >= 0, got {self.margin_m}")
        if self.tau_delta < 0:
            raise ValidationError(f"tau_delta must be >= 0, got {self.tau_delta}")
        if not self.tau_div > 0:
            raise ValidationError(f"tau_div must be > 0, got {self.tau_div}")
        if not 0.0 < self.tau_max < 2.0:
            raise ValidationError(f"tau_max must be in (0, 2), got {self.tau_max}")
        if self.n_artificial < 0:
            raise ValidationError(f"n_artificial must be >= 0, got {self.n_artificial}")
        if self.max_iters < 1:
            raise ValidationError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass(frozen=True)
class BoxPrompt:
    """Axis-aligned rectangle in inclusive pixel coordinates."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValidationError(f"degenerate box {self}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.row_min, self.col_min, self.row_max, self.col_max)

    def clipped(self, shape: tuple[int, int]) -> "BoxPrompt":
        height, width = shape
        return BoxPrompt(
            max(0, min(self.row_min, height - 1)),
            max(0, min(self.col_min, width - 1)),
            max(0, min(self.row_max, height - 1)),
            max(0, min(self.col_max, width - 1)),
        )

    def contains(self, other: "BoxPrompt") -> bool:
        return (self.row_min <= other.row_min and self.col_min <= other.col_min
                and self.row_max >= other.row_max and self.col_max >= other.col_max)

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.row_min, self.row_max + 1), slice(self.col_min, self.col_max + 1)


class PixelSet:
    """An immutable set of pixel coordinates backed by a boolean raster."""

    __slots__ = ("mask",)

    def __init__(self, mask: np.ndarray):
        mask = check_binary_mask(mask, "pixel set").copy()
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)

    def __setattr__(self, name, value):
        raise AttributeError("PixelSet is immutable")

    @classmethod
    def from_coords(cls, coords, shape: tuple[int, int]) -> "PixelSet":
        mask = np.zeros(shape, dtype=bool)
        for row, col in coords:
            mask[row, col] = True
        return cls(mask)

    def coords(self) -> np.ndarray:
        """Row-major (n, 2) coordinate array."""
        return np.argwhere(self.mask)

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(r), int(c)) for r, c in self.coords()}

    def __len__(self) -> int:
        return int(self.mask.sum())

    def __contains__(self, coord) -> bool:
        row, col = coord
        return bool(self.mask[row, col])

    def __eq__(self, other) -> bool:
        return isinstance(other, PixelSet) and np.array_equal(self.mask, other.mask)

    def __repr__(self) -> str:
        return f"PixelSet({len(self)} pixels, shape={self.mask.shape})"


@lru_cache(maxsize=32)
def _disk_offsets(radius: float) -> tuple[tuple[int, int], ...]:
    """All nonzero (dr, dc) with Euclidean norm strictly below ``radius``."""
    reach = int(math.ceil(radius))
    offsets = []
    for d_row in range(-reach, reach + 1):
        for d_col in range(-reach, reach + 1):
            if (d_row, d_col) == (0, 0):
                continue
            if d_row * d_row + d_col * d_col < radius * radius:
                offsets.append((d_row, d_col))
    return tuple(offsets)


def _shift_window(shape: tuple[int, int], d_row: int, d_col: int):
    """Index windows such that out[sel_out] aligns with arr[sel_in] shifted by (d_row, d_col)."""
    height, width = shape
    r0 = max(0, -d_row)
    r1 = max(r0, min(height, height - d_row))
    c0 = max(0, -d_col)
    c1 = max(c0, min(width, width - d_col))
    sel_out = (slice(r0, r1), slice(c0, c1))
    sel_in = (slice(r0 + d_row, r1 + d_row), slice(c0 + d_col, c1 + d_col))
    return sel_out, sel_in


def unit_features(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalized copy of a feature map plus the zero-norm pixel mask."""
    feats = np.asarray(feats, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=2)
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    return feats / safe[..., None], zero


def select_seed(probs, class_id: int, p_delta: float) -> PixelSet:
    """Most confident pixels of a class: within ``p_delta`` of the peak.

    Raises :class:`ClassAbsentError` when the argmax prediction never picks
    the class, which is the signal for callers to skip it on this slice.
    """
    probs = check_probability_map(probs)
    num_classes = probs.shape[2]
    if not 1 <= class_id < num_classes:
        raise ValidationError(f"class id {class_id} outside [1, {num_classes})")
    if not (probs.argmax(axis=2) == class_id).any():
        raise ClassAbsentError(f"class {class_id} absent from the argmax prediction")
    scores = probs[..., class_id]
    return PixelSet(scores > scores.max() - p_delta)


def tbs_step(current: PixelSet, feats, tau_f: float, r: float) -> PixelSet:
    """One growth step over the target-model feature space.

    A candidate joins when some member within Euclidean distance < ``r`` has
    cosine similarity above ``tau_f`` to it. Zero-norm features count as
    similarity -1 and can never join nor recruit.
    """
    feats = check_feature_map(feats)
    member = current.mask
    check_same_shape(member, feats[..., 0], "pixel set vs features")
    unit, zero = unit_features(feats)
    joins = np.zeros_like(member)
    for d_row, d_col in _disk_offsets(r):
        sel_out, sel_in = _shift_window(member.shape, d_row, d_col)
        neighbor_member = np.zeros_like(member)
        neighbor_member[sel_out] = member[sel_in]
        candidates = neighbor_member & ~member & ~zero
        if not candidates.any():
            continue
        sims = np.zeros(member.shape, dtype=np.float64)
        sims[sel_out] = np.einsum("hwc,hwc->hw", unit[sel_out], unit[sel_in])
        neighbor_zero = np.ones_like(member)
        neighbor_zero[sel_out] = zero[sel_in]
        joins |= candidates & ~neighbor_zero & (sims > tau_f)
    return PixelSet(member | joins)


def box_from_pixels(pixels: PixelSet, margin_m: int,
                    shape: tuple[int, int]) -> BoxPrompt:
    """Tight bounding box of the set, padded by the margin and clipped."""
    if len(pixels) == 0:
        raise ValidationError("cannot box an empty pixel set")
    coords = pixels.coords()
    rows = coords[:, 0]
    cols = coords[:, 1]
    box = BoxPrompt(
        int(rows.min()) - margin_m,
        int(cols.min()) - margin_m,
        int(rows.max()) + margin_m,
        int(cols.max()) + margin_m,
    )
    return box.clipped(shape)


def delta_m(mask_a, mask_b) -> int:
    """Number of pixels where two segmenter outputs disagree."""
    mask_a = check_binary_mask(mask_a, "mask_a")
    mask_b = check_binary_mask(mask_b, "mask_b")
    check_same_shape(mask_a, mask_b)
    return int((mask_a != mask_b).sum())


def check_stable(mask_history, tau_delta: float) -> tuple[int, int] | None:
    """Detect a stable interval ending at the newest mask.

    Spans of length 3, 2, 1 are tried in that order (longer intervals are
    preferred to avoid accidental stability); a span of length L qualifies
    when the masks at its endpoints differ by at most ``L * tau_delta``
    pixels. Returns the qualifying ``(start, end)`` indices or None.
    """
    if len(mask_history) == 0:
        raise ValidationError("mask history is empty")
    end = len(mask_history) - 1
    for span in (3, 2, 1):
        start = end - span
        if start < 0:
            continue
        if delta_m(mask_history[start], mask_history[end]) <= span * tau_delta:
            return (start, end)
    return None


def mbs_prototype(seed_mask, feats) -> tuple[np.ndarray, float]:
    """Class prototype and divergence in the segmenter feature space.

    The prototype is the average of the L2-normalized features over the
    mask; the divergence is their average cosine distance to it. Zero-norm
    features are excluded from both averages.
    """
    seed_mask = check_binary_mask(seed_mask, "seed mask")
    feats = check_feature_map(feats)
    check_same_shape(seed_mask, feats[..., 0], "seed mask vs features")
    if not seed_mask.any():
        raise ValidationError("empty seed mask")
    unit, zero = unit_features(feats)
    usable = seed_mask & ~zero
    if not usable.any():
        raise ValidationError("all seed features have zero norm")
    vectors = unit[usable]
    prototype = vectors.mean(axis=0)
    proto_norm = np.linalg.norm(prototype)
    if proto_norm == 0:
        raise ValidationError("degenerate prototype: normalized features cancel out")
    divergence = float(np.mean(1.0 - vectors @ (prototype / proto_norm)))
    return prototype, divergence


def mbs_step(current: PixelSet, feats, prototype, divergence: float,
             tau_div: float, tau_max: float, r: float) -> PixelSet:
    """One growth step over the segmenter feature space.

    A candidate joins when its cosine distance to the prototype is strictly
    below ``min(tau_div * divergence, tau_max)`` and some member lies within
    Euclidean distance < ``r``.
    """
    feats = check_feature_map(feats)
    member = current.mask
    check_same_shape(member, feats[..., 0], "pixel set vs features")
    prototype = np.asarray(prototype, dtype=np.float64)
    proto_norm = np.linalg.norm(prototype)
    if proto_norm == 0:
        raise ValidationError("zero-norm prototype")
    tau_d = min(tau_div * divergence, tau_max)

    unit, zero = unit_features(feats)
    # Clamp away the -1e-16 that perfectly aligned unit vectors can produce,
    # which would otherwise defeat the strict comparison when tau_d == 0.
    distance = np.clip(1.0 - unit @ (prototype / proto_norm), 0.0, 2.0)
    distance[zero] = 2.0  # zero-norm counts as maximally dissimilar
    eligible = distance < tau_d

    neighbor_member = np.zeros_like(member)
    for d_row, d_col in _disk_offsets(r):
        sel_out, sel_in = _shift_window(member.shape, d_row, d_col)
        neighbor_member[sel_out] |= member[sel_in]
    joins = eligible & neighbor_member & ~member
    return PixelSet(member | joins)


def artificial_expand(box: BoxPrompt, r: float, shape: tuple[int, int]) -> BoxPrompt:
    """Push all four edges outward by floor(r / 2) pixels, clipped."""
    step = int(r) // 2
    return BoxPrompt(
        box.row_min - step,
        box.col_min - step,
        box.row_max + step,
        box.col_max + step,
    ).clipped(shape)


@dataclass
class TraceRecord:
    iteration: int
    phase: str
    set_size: int
    box: BoxPrompt
    delta_m: int | None
    stable_span: tuple[int, int] | None = None


@dataclass
class SearchTrace:
    """Ordered audit record of one class search."""

    image_id: str = ""
    class_id: int = 0
    records: list[TraceRecord] = field(default_factory=list)
    termination_reason: str = ""
    chosen_box: BoxPrompt | None = None
    chosen_iteration: int | None = None
    zero_norm_pixels: int = 0

    _last_mask: np.ndarray | None = field(default=None, repr=False)

    def add(self, phase: str, set_size: int, box: BoxPrompt,
            mask: np.ndarray) -> TraceRecord:
        delta = None if self._last_mask is None else delta_m(self._last_mask, mask)
        record = TraceRecord(len(self.records), phase, set_size, box, delta)
        self.records.append(record)
        self._last_mask = mask
        return record

    def delta_series(self) -> list[int | None]:
        return [record.delta_m for record in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "phase", "set_size", "row_min", "col_min",
                         "row_max", "col_max", "delta_m", "stable_span"])
        for record in self.records:
            span = record.stable_span
            writer.writerow([
                record.iteration,
                record.phase,
                record.set_size,
                record.box.row_min,
                record.box.col_min,
                record.box.row_max,
                record.box.col_max,
                "" if record.delta_m is None else record.delta_m,
                "" if span is None else f"{span[0]}-{span[1]}",
            ])
        return buf.getvalue()


class _IterationBudget:
    def __init__(self, limit: int):
        self.limit = limit
        self.used = 0

    def take(self) -> bool:
        if self.used >= self.limit:
            return False
        self.used += 1
        return True


def _run_phase(phase: str, pixels: PixelSet, step, session, cfg: SearchConfig,
               shape, trace: SearchTrace, budget: _IterationBudget):
    """Grow-box-segment loop shared by the TBS and MBS phases.

    Returns ``(history, boxes, stable_span, reason, pixels)`` where reason
    is one of ``stable``, ``fixpoint``, ``iteration_cap``. The span indexes
    into this phase's history.
    """
    history: list[np.ndarray] = []
    boxes: list[BoxPrompt] = []
    while True:
        if not budget.take():
            return history, boxes, None, "iteration_cap", pixels
        box = box_from_pixels(pixels, cfg.margin_m, shape)
        mask = check_binary_mask(session.segment(box), "segmenter mask")
        history.append(mask)
        boxes.append(box)
        record = trace.add(phase, len(pixels), box, mask)
        span = check_stable(history, cfg.tau_delta)
        if span is not None:
            record.stable_span = span
            return history, boxes, span, "stable", pixels
        grown = step(pixels)
        if grown == pixels:
            return history, boxes, None, "fixpoint", pixels
        pixels = grown


def search_class(probs, target_feats, session, class_id: int,
                 cfg: SearchConfig | None = None, image_id: str = "",
                 use_mbs: bool = True) -> tuple[np.ndarray, SearchTrace]:
    """Full box-prompt search for one foreground class on one slice.

    Returns the chosen segmenter mask and the trace of every iteration.
    When a stable interval is found, the mask of the interval's first box is
    returned (the smallest stable prompt). If the segmenter cannot serve
    feature maps, the search degrades to the target-feature phase only.
    """
    cfg = cfg or SearchConfig()
    probs = check_probability_map(probs)
    target_feats = check_feature_map(target_feats)
    check_same_shape(probs[..., 0], target_feats[..., 0], "probs vs features")
    shape = target_feats.shape[:2]

    seed = select_seed(probs, class_id, cfg.p_delta)
    trace = SearchTrace(image_id=image_id, class_id=class_id)
    trace.zero_norm_pixels = int((np.linalg.norm(target_feats, axis=2) == 0).sum())
    budget = _IterationBudget(cfg.max_iters)

    def finish(mask: np.ndarray, box: BoxPrompt | None, reason: str):
        trace.termination_reason = reason
        trace.chosen_box = box
        return mask, trace

    def tbs(px: PixelSet) -> PixelSet:
        return tbs_step(px, target_feats, cfg.tau_f, cfg.r)

    history, boxes, span, reason, _ = _run_phase(
        PHASE_TBS, seed, tbs, session, cfg, shape, trace, budget)
    if reason == "iteration_cap":
        return finish(history[-1], boxes[-1], reason)
    pick = span[0] if span else len(history) - 1
    tbs_mask, tbs_box = history[pick], boxes[pick]

    if not use_mbs:
        return finish(tbs_mask, tbs_box, "tbs_" + reason)
    if not tbs_mask.any():
        return finish(tbs_mask, tbs_box, "empty_segmenter_mask")
    try:
        segmenter_feats = session.features()
    except FeatureCapabilityError:
        return finish(tbs_mask, tbs_box, "no_segmenter_features")

    prototype, divergence = mbs_prototype(tbs_mask, segmenter_feats)

    def mbs(px: PixelSet) -> PixelSet:
        return mbs_step(px, segmenter_feats, prototype, divergence,
                        cfg.tau_div, cfg.tau_max, cfg.r)

    history, boxes, span, reason, final_pixels = _run_phase(
        PHASE_MBS, PixelSet(tbs_mask), mbs, session, cfg, shape, trace, budget)
    if reason == "stable":
        return finish(history[span[0]], boxes[span[0]], "stable")
    if reason == "iteration_cap":
        if not history:  # the budget ran out before the first second-phase prompt
            return finish(tbs_mask, tbs_box, reason)
        return finish(history[-1], boxes[-1], reason)

    # Growth stalled without stability: expand the box artificially.
    pre_expand_mask, pre_expand_box = history[-1], boxes[-1]
    set_size = len(final_pixels)
    box = boxes[-1]
    for _ in range(cfg.n_artificial):
        if not budget.take():
            return finish(history[-1], boxes[-1], "iteration_cap")
        box = artificial_expand(box, cfg.r, shape)
        mask = check_binary_mask(session.segment(box), "segmenter mask")
        history.append(mask)
        boxes.append(box)
        record = trace.add(PHASE_ARTIFICIAL, set_size, box, mask)
        span = check_stable(history, cfg.tau_delta)
        if span is not None:
            record.stable_span = span
            return finish(history[span[0]], boxes[span[0]], "stable")
    return finish(pre_expand_mask, pre_expand_box, "no_stable_interval")
