"""Batch orchestration: synthetic datasets, refinement runs, retraining.

Dataset layout::

    <root>/manifest.txt                 one slice id per line
    <root>/slices/<id>/image.dfgt       f32 H x W encoded scene image
    <root>/slices/<id>/probs.dfgt       f32 H x W x K target-model posteriors
    <root>/slices/<id>/tfeat.dfgt       f32 H x W x d_F target-model features
    <root>/slices/<id>/gt.dfgt          u8 H x W ground truth (optional)

Run outputs land under the output directory: ``labels/<id>.dfgt``,
``traces/<id>_class<k>.csv``, ``metrics_2d.csv``, ``metrics_3d.csv`` and
``summary.json``. No timestamps are written anywhere, so two runs with the
same config produce byte-identical outputs.
"""
from __future__ import annotations

import atexit
import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, EmptyMaskError, ValidationError
from .metrics import MetricReport, assd, dice_3d, score_labels
from .refiner import PixelwiseDiceClassifier, PseudoLabelRefiner
from .segmenter import CLASS_CODE_BASE, MockScene, _orthonormal_rows, make_backend
from .tensor_io import read_tensor_file, write_tensor, write_tensor_file
from .validation import check_label_mask, check_probability_map

PROFILES = {
    "abdominal": {"kappa": 1.0, "tau_max": 0.35},
    "prostate": {"kappa": 10.0, "tau_max": 0.30},
    "custom": {},
}

GEN_LOGIT_SCALE = 0.25   # softmax temperature used when deriving posteriors
TARGET_FEATURE_DIM = 8
BLOB_SIDE = 7


@dataclass
class RunConfig:
    """Everything a pipeline run needs; text-file keys match field names."""

    dataset_root: str = ""
    output_dir: str = ""
    backend: str = ""
    profile: str = "abdominal"
    jobs: int = 1
    p_delta: float = 0.005
    tau_f: float = 0.99
    r: int = 4
    margin_m: int = 2
    tau_delta: float = 15.0
    tau_div: float = 2.5
    tau_max: float = 0.35
    n_artificial: int = 3
    max_iters: int = 256
    kappa: float = 1.0
    search_phases: str = "full"
    connectivity_postprocess: bool = True
    connectivity: int = 4
    retrain: bool = False
    retrain_lr: float = 1.0
    retrain_epochs: int = 50

    def refiner(self) -> PseudoLabelRefiner:
        return PseudoLabelRefiner(
            p_delta=self.p_delta, tau_f=self.tau_f, r=self.r,
            margin_m=self.margin_m, tau_delta=self.tau_delta,
            tau_div=self.tau_div, tau_max=self.tau_max,
            n_artificial=self.n_artificial, max_iters=self.max_iters,
            search_phases=self.search_phases,
            keep_largest_component=self.connectivity_postprocess,
            connectivity=self.connectivity,
        )


def parse_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment, blanks ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(field_type, raw: str):
    if field_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    return field_type(raw)


def build_run_config(file_values: dict[str, str] | None = None,
                     overrides: dict | None = None) -> RunConfig:
    """Layer config sources: profile defaults, then file, then overrides."""
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    profile = str(overrides.get("profile", file_values.get("profile", "abdominal")))
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")

    cfg = RunConfig(profile=profile)
    cfg = replace(cfg, **PROFILES[profile])
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {name: type(getattr(cfg, name)) for name in known}
    for key, raw in file_values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        cfg = replace(cfg, **{key: _coerce(types[key], raw)})
    for key, value in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        cfg = replace(cfg, **{key: value})
    return cfg


def validate_run_config(cfg: RunConfig) -> None:
    if not cfg.backend:
        raise ConfigError("no backend configured (use mock:<seed> or proc:<cmdline>)")
    if not cfg.dataset_root:
        raise ConfigError("no dataset_root configured")
    if not cfg.output_dir:
        raise ConfigError("no output_dir configured")
    root = Path(cfg.dataset_root)
    if not (root / "manifest.txt").is_file():
        raise ConfigError(f"missing manifest: {root / 'manifest.txt'}")
    if cfg.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    if cfg.search_phases not in ("none", "tbs", "full"):
        raise ConfigError(f"search_phases must be none|tbs|full, got {cfg.search_phases!r}")
    if cfg.search_phases != "none":
        cfg.refiner().search_config()  # raises on out-of-range search params


# ---------------------------------------------------------------------------
# Synthetic dataset generation
# ---------------------------------------------------------------------------

def _scene_geometry(size: int, classes: int, rng: np.random.Generator):
    """Place one rectangle per class on a jittered grid; sizes descend with
    the class id so the class's own object always out-sizes any false blob
    it may capture on a smaller victim."""
    grid = math.ceil(math.sqrt(classes))
    cell = size // grid
    pad = max(3, cell // 6)
    max_side = cell - 2 * pad
    if max_side < 8:
        raise ValidationError(
            f"image size {size} too small for {classes} classes")
    rects = []
    for class_id in range(1, classes + 1):
        side = max(6, max_side - 2 * (class_id - 1))
        cell_row, cell_col = divmod(class_id - 1, grid)
        play = cell - 2 * pad - side
        jitter_r = int(rng.integers(0, play + 1)) if play > 0 else 0
        jitter_c = int(rng.integers(0, play + 1)) if play > 0 else 0
        top = cell_row * cell + pad + jitter_r
        left = cell_col * cell + pad + jitter_c
        rects.append((class_id, top, left, side, side))
    return rects


def _object_regions(rect, dispersion: float):
    """Split a rectangle into clustered columns and a dispersed strip."""
    class_id, top, left, height, width = rect
    strip = int(round(dispersion * width))
    strip = min(max(strip, 0), width)
    clustered = (top, left, height, width - strip)
    dispersed = (top, left + width - strip, height, strip)
    return clustered, dispersed


def generate_slice(seed: int, slice_index: int, size: int, classes: int,
                   dispersion: float, target_dim: int = TARGET_FEATURE_DIM):
    """Build one synthetic slice; returns (image, probs, tfeat, gt)."""
    if size < 32:
        raise ValidationError(f"size must be >= 32, got {size}")
    if classes < 2:
        raise ValidationError(f"classes must be >= 2, got {classes}")
    if classes >= CLASS_CODE_BASE:
        raise ValidationError(f"classes must be < {CLASS_CODE_BASE}")
    if not 0.0 <= dispersion <= 1.0:
        raise ValidationError(f"dispersion must be in [0, 1], got {dispersion}")
    if target_dim < classes + 1:
        raise ValidationError("target_dim must exceed the class count")

    rng = np.random.default_rng([seed, 10, slice_index])
    rects = _scene_geometry(size, classes, rng)

    class_map = np.zeros((size, size), dtype=np.uint8)
    for class_id, top, left, height, width in rects:
        class_map[top:top + height, left:left + width] = class_id

    bases = _orthonormal_rows(classes + 1, target_dim,
                              np.random.default_rng([seed, 20]))
    tfeat = np.tile(bases[0], (size, size, 1))

    for rect in rects:
        class_id = rect[0]
        clustered, _ = _object_regions(rect, dispersion)
        top, left, height, width = clustered
        if width == 0 or height == 0:
            continue
        # Confidence dome: scale the feature (not its direction) so the
        # posterior peaks at the region center and decays outward, which
        # makes the seed a proper subset that must grow.
        rows = np.arange(top, top + height)[:, None] - (top + (height - 1) / 2)
        cols = np.arange(left, left + width)[None, :] - (left + (width - 1) / 2)
        dist = np.sqrt(rows**2 + cols**2)
        peak = dist.max() if dist.max() > 0 else 1.0
        scale = 1.0 - 0.3 * dist / peak
        block = bases[class_id][None, None, :] * scale[..., None]
        tfeat[top:top + height, left:left + width, :] = block
        # Dispersed strip keeps background-like features (already base 0).

    if dispersion > 0:
        # Over-confident false positives: a small patch of class k features
        # dropped onto the next (smaller) object. Restricted to victims in
        # the same grid row so the seed box spans exactly two objects.
        grid = math.ceil(math.sqrt(classes))
        for rect in rects:
            class_id = rect[0]
            victim = class_id + 1
            if victim > classes or (class_id - 1) // grid != (victim - 1) // grid:
                continue
            victim_rect = rects[victim - 1]
            clustered, _ = _object_regions(victim_rect, dispersion)
            v_top, v_left, v_height, v_width = clustered
            if v_height < BLOB_SIDE or v_width < BLOB_SIDE:
                continue
            blob_top = v_top + (v_height - BLOB_SIDE) // 2
            blob_left = v_left + (v_width - BLOB_SIDE) // 2
            tfeat[blob_top:blob_top + BLOB_SIDE,
                  blob_left:blob_left + BLOB_SIDE, :] = bases[class_id]

    logits = np.einsum("hwd,kd->hwk", tfeat.astype(np.float64),
                       bases.astype(np.float64)) / GEN_LOGIT_SCALE
    logits -= logits.max(axis=2, keepdims=True)
    e = np.exp(logits)
    probs = (e / e.sum(axis=2, keepdims=True)).astype(np.float32)

    scene = MockScene(class_map, seed)
    image = scene.encode_image(salt=slice_index)
    return image, probs, tfeat.astype(np.float32), class_map


def gen_synthetic(out_dir, seed: int, n_slices: int, size: int = 64,
                  classes: int = 3, dispersion: float = 0.0,
                  target_dim: int = TARGET_FEATURE_DIM) -> list[str]:
    """Write a full synthetic dataset; returns the slice ids."""
    out = Path(out_dir)
    (out / "slices").mkdir(parents=True, exist_ok=True)
    ids = []
    for index in range(n_slices):
        slice_id = f"slice_{index:04d}"
        image, probs, tfeat, gt = generate_slice(
            seed, index, size, classes, dispersion, target_dim)
        slice_dir = out / "slices" / slice_id
        slice_dir.mkdir(parents=True, exist_ok=True)
        write_tensor_file(image, slice_dir / "image.dfgt")
        write_tensor_file(probs, slice_dir / "probs.dfgt")
        write_tensor_file(tfeat, slice_dir / "tfeat.dfgt")
        write_tensor_file(gt, slice_dir / "gt.dfgt")
        ids.append(slice_id)
    (out / "manifest.txt").write_text("".join(i + "\n" for i in ids))
    (out / "gen_config.txt").write_text(
        f"seed = {seed}\nn_slices = {n_slices}\nsize = {size}\n"
        f"classes = {classes}\ndispersion = {dispersion}\n"
        f"target_dim = {target_dim}\n")
    return ids


# ---------------------------------------------------------------------------
# Pipeline run
# ---------------------------------------------------------------------------

@dataclass
class SliceResult:
    slice_id: str
    labels: np.ndarray | None = None
    traces: dict[int, object] | None = None
    report: MetricReport | None = None
    gt_masks: dict[int, np.ndarray] | None = None
    pred_masks: dict[int, np.ndarray] | None = None
    error: str | None = None


_WORKER_BACKEND = None
_WORKER_CFG = None


def _init_worker(cfg: RunConfig) -> None:
    global _WORKER_BACKEND, _WORKER_CFG
    _WORKER_CFG = cfg
    _WORKER_BACKEND = make_backend(cfg.backend) if cfg.search_phases != "none" else None
    if _WORKER_BACKEND is not None:
        atexit.register(_WORKER_BACKEND.close)


def _process_slice_task(slice_id: str) -> SliceResult:
    return process_slice(_WORKER_CFG, slice_id, _WORKER_BACKEND)


def load_slice(root, slice_id: str):
    slice_dir = Path(root) / "slices" / slice_id
    image = read_tensor_file(slice_dir / "image.dfgt")
    probs = check_probability_map(read_tensor_file(slice_dir / "probs.dfgt"))
    tfeat = read_tensor_file(slice_dir / "tfeat.dfgt")
    gt_path = slice_dir / "gt.dfgt"
    gt = None
    if gt_path.exists():
        gt = check_label_mask(read_tensor_file(gt_path), probs.shape[2], "gt")
    return image, probs, tfeat, gt


def process_slice(cfg: RunConfig, slice_id: str, backend=None) -> SliceResult:
    try:
        image, probs, tfeat, gt = load_slice(cfg.dataset_root, slice_id)
        refiner = cfg.refiner()
        session = None
        if cfg.search_phases != "none":
            if backend is None:
                backend = make_backend(cfg.backend)
            session = backend.open_session(image, slice_id)
        labels, traces = refiner.refine_slice(probs, tfeat, session, slice_id)
        result = SliceResult(slice_id, labels=labels, traces=traces)
        num_classes = probs.shape[2]
        result.pred_masks = {k: labels == k for k in range(1, num_classes)}
        if gt is not None:
            result.report = score_labels(labels, gt, num_classes)
            result.gt_masks = {k: gt == k for k in range(1, num_classes)}
        return result
    except Exception as exc:  # failure isolation: one bad slice never aborts a run
        return SliceResult(slice_id, error=f"{type(exc).__name__}: {exc}")


def _volume_report(results: list[SliceResult], num_classes: int,
                   ) -> MetricReport:
    """Pooled 3D Dice per class; ASSD averaged over slices where defined."""
    report = MetricReport()
    scored = [r for r in results if r.report is not None]
    for k in range(1, num_classes):
        pred_stack = [r.pred_masks[k] for r in scored]
        gt_stack = [r.gt_masks[k] for r in scored]
        report.per_class_dice.append(dice_3d(pred_stack, gt_stack))
        distances = []
        for pred_mask, gt_mask in zip(pred_stack, gt_stack):
            try:
                distances.append(assd(pred_mask, gt_mask))
            except EmptyMaskError:
                continue
        report.per_class_assd.append(
            float(np.mean(distances)) if distances else None)
    return report


@dataclass
class RunSummary:
    slice_ids: list[str]
    failed: dict[str, str]
    mean_dice_2d: float | None
    volume_report: MetricReport | None

    @property
    def ok(self) -> bool:
        return not self.failed


def run_pipeline(cfg: RunConfig) -> RunSummary:
    """Refine every manifest slice, write labels/traces/metrics/summary."""
    validate_run_config(cfg)
    root = Path(cfg.dataset_root)
    slice_ids = [line.strip() for line in
                 (root / "manifest.txt").read_text().splitlines() if line.strip()]
    out = Path(cfg.output_dir)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    (out / "traces").mkdir(parents=True, exist_ok=True)

    if cfg.jobs == 1:
        backend = make_backend(cfg.backend) if cfg.search_phases != "none" else None
        try:
            results = [process_slice(cfg, sid, backend) for sid in slice_ids]
        finally:
            if backend is not None:
                backend.close()
    else:
        with ProcessPoolExecutor(max_workers=cfg.jobs, initializer=_init_worker,
                                 initargs=(cfg,)) as pool:
            results = list(pool.map(_process_slice_task, slice_ids))

    failed = {r.slice_id: r.error for r in results if r.error is not None}
    succeeded = [r for r in results if r.error is None]

    num_classes = None
    rows = []
    for result in succeeded:
        write_tensor_file(result.labels.astype(np.uint8),
                          out / "labels" / f"{result.slice_id}.dfgt")
        for class_id in sorted(result.traces):
            trace = result.traces[class_id]
            path = out / "traces" / f"{result.slice_id}_class{class_id}.csv"
            path.write_text(trace.to_csv())
        if result.report is not None:
            num_classes = len(result.report.per_class_dice) + 1
            for idx, dice in enumerate(result.report.per_class_dice):
                assd_value = result.report.per_class_assd[idx]
                rows.append((result.slice_id, idx + 1, dice, assd_value))

    mean_dice_2d = None
    volume_report = None
    if rows:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["slice_id", "class_id", "dice", "assd"])
        for slice_id, class_id, dice, assd_value in rows:
            writer.writerow([slice_id, class_id, f"{dice:.6f}",
                             "" if assd_value is None else f"{assd_value:.6f}"])
        (out / "metrics_2d.csv").write_text(buf.getvalue())
        mean_dice_2d = float(np.mean([row[2] for row in rows]))
        volume_report = _volume_report(succeeded, num_classes)
        (out / "metrics_3d.csv").write_text(volume_report.to_csv())

    # Echo only result-determining fields so identical configurations produce
    # byte-identical summaries regardless of where or how wide they ran.
    volatile = {"dataset_root", "output_dir", "jobs"}
    summary = {
        "slices": len(slice_ids),
        "succeeded": len(succeeded),
        "failed": {k: failed[k] for k in sorted(failed)},
        "mean_dice_2d": None if mean_dice_2d is None else round(mean_dice_2d, 6),
        "mean_dice_3d": None if volume_report is None else round(volume_report.mean_dice, 6),
        "config": {f.name: getattr(cfg, f.name) for f in fields(RunConfig)
                   if f.name not in volatile},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunSummary(slice_ids, failed, mean_dice_2d, volume_report)


# ---------------------------------------------------------------------------
# Toy retraining on refined labels
# ---------------------------------------------------------------------------

def retrain_toy(dataset_root, labels_dir, out_dir, learning_rate: float = 1.0,
                epochs: int = 50, random_state: int = 0) -> dict:
    """Train the pixel classifier on refined labels; returns a summary dict.

    Writes ``loss_curve.csv``, the trained parameters (``model.dfgt``, the
    weight tensor followed by the bias tensor in one stream), and
    ``retrain_summary.json`` with before/after Dice when ground truth exists.
    """
    root = Path(dataset_root)
    labels_root = Path(labels_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    slice_ids = [line.strip() for line in
                 (root / "manifest.txt").read_text().splitlines() if line.strip()]

    features, targets, gts = [], [], []
    shapes = []
    for slice_id in slice_ids:
        _, probs, tfeat, gt = load_slice(root, slice_id)
        label_path = labels_root / f"{slice_id}.dfgt"
        labels = check_label_mask(read_tensor_file(label_path),
                                  probs.shape[2], "pseudo-labels")
        features.append(tfeat.reshape(-1, tfeat.shape[2]))
        targets.append(labels.reshape(-1))
        shapes.append((slice_id, labels.shape, probs.shape[2]))
        gts.append(None if gt is None else gt.reshape(-1))

    X = np.concatenate(features, axis=0)
    y = np.concatenate(targets, axis=0)
    num_classes = shapes[0][2]
    model = PixelwiseDiceClassifier(num_classes=num_classes,
                                    learning_rate=learning_rate,
                                    epochs=epochs, random_state=random_state)
    initial = PixelwiseDiceClassifier(num_classes=num_classes,
                                      learning_rate=learning_rate, epochs=0,
                                      random_state=random_state).fit(X, y)
    model.fit(X, y)

    curve = io.StringIO()
    writer = csv.writer(curve, lineterminator="\n")
    writer.writerow(["step", "loss"])
    for step, loss in enumerate(model.loss_curve_):
        writer.writerow([step, f"{loss:.8f}"])
    (out / "loss_curve.csv").write_text(curve.getvalue())
    with open(out / "model.dfgt", "wb") as sink:
        write_tensor(model.coef_.astype(np.float32), sink)
        write_tensor(model.intercept_.astype(np.float32), sink)

    summary: dict = {
        "epochs": epochs,
        "final_loss": model.loss_curve_[-1] if model.loss_curve_ else None,
        "initial_loss": model.loss_curve_[0] if model.loss_curve_ else None,
    }
    if all(g is not None for g in gts):
        gt_all = np.concatenate(gts, axis=0)

        def mean_dice(pred: np.ndarray) -> float:
            scores = []
            for k in range(1, num_classes):
                a, b = pred == k, gt_all == k
                total = int(a.sum()) + int(b.sum())
                scores.append(1.0 if total == 0 else 2.0 * int((a & b).sum()) / total)
            return float(np.mean(scores))

        summary["initial_dice_vs_gt"] = round(mean_dice(initial.predict(X)), 6)
        summary["final_dice_vs_gt"] = round(mean_dice(model.predict(X)), 6)
    (out / "retrain_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
