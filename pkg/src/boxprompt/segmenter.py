"""Promptable-segmenter backends: a deterministic mock and a process bridge.

A backend opens one session per image; the session owns the (expensive)
image embedding and answers box-prompted ``segment`` calls and optional
per-pixel ``features`` queries. The embedding is computed at most once per
session no matter how many prompts follow.

The mock backend operates on images that encode a ground-truth class map in
their pixel values (see :class:`MockScene`). Its segmentation rule is
"all ground-truth foreground inside the box", which is class-agnostic and
makes every search behavior exactly checkable: growing a box through pure
background changes nothing, crossing an object boundary changes the output
by the newly covered object pixels.

The external backend speaks newline-delimited JSON over a worker process's
stdin/stdout; large payloads travel as .dfgt files in a scratch directory
that is appended to the worker command line as ``--scratch <dir>``.
Messages::

    {"cmd": "handshake"}                                   -> {"ok": true, "features": bool, "d_M": int}
    {"cmd": "embed", "image": path, "image_id": id}        -> {"ok": true}
    {"cmd": "segment", "image_id": id, "box": [r0,c0,r1,c1], "out": path} -> {"ok": true}
    {"cmd": "features", "image_id": id, "out": path}       -> {"ok": true}
    {"cmd": "shutdown"}                                    -> {"ok": true}, worker exits

Any failure is reported as ``{"ok": false, "error": "..."}``.
"""
from __future__ import annotations

import json
import re
import select
import shlex
import subprocess
import tempfile
from pathlib import Path

import numpy as np

from .exceptions import BackendError, FeatureCapabilityError, ValidationError
from .search import BoxPrompt
from .tensor_io import read_tensor_file, write_tensor_file

CLASS_CODE_BASE = 8          # image values encode class ids below this count
MOCK_FEATURE_DIM = 16
PERTURBATION_NORM = 0.05

_ID_PATTERN = re.compile(r"^[A-Za-z0-9_.\-]+$")


def _check_image(image) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 3:
        image = image[..., 0]
    if image.ndim != 2 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValidationError(f"malformed image of shape {image.shape}")
    image = image.astype(np.float32, copy=False)
    if not np.isfinite(image).all():
        raise ValidationError("image has non-finite values")
    return image


def _orthonormal_rows(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Gram-Schmidt on random normals; avoids BLAS so runs are stable."""
    rows = np.empty((count, dim))
    for i in range(count):
        while True:
            v = rng.normal(size=dim)
            for prev in rows[:i]:
                v = v - (v @ prev) * prev
            norm = np.linalg.norm(v)
            if norm > 1e-6:
                rows[i] = v / norm
                break
    return rows


class MockScene:
    """A reproducible world for the mock backend.

    Every pixel has a ground-truth class. The image encodes the class map as
    ``(class + texture) / CLASS_CODE_BASE`` with texture in [0.05, 0.45), so
    the class map can be decoded from the image alone. Segmenter features are
    the class's orthonormal base vector plus a fixed-norm perturbation that
    is orthogonal to it, giving tight within-class and wide cross-class
    cosine distances by construction.
    """

    def __init__(self, class_map: np.ndarray, seed: int,
                 feature_dim: int = MOCK_FEATURE_DIM):
        class_map = np.asarray(class_map)
        if class_map.ndim != 2:
            raise ValidationError(f"class map must be H x W, got {class_map.shape}")
        if class_map.size and class_map.max() >= CLASS_CODE_BASE:
            raise ValidationError(
                f"mock scenes support class ids below {CLASS_CODE_BASE}")
        if feature_dim < CLASS_CODE_BASE:
            raise ValidationError(
                f"feature_dim must be >= {CLASS_CODE_BASE}, got {feature_dim}")
        self.class_map = class_map.astype(np.uint8)
        self.seed = int(seed)
        self.feature_dim = int(feature_dim)

    @classmethod
    def from_image(cls, image, seed: int,
                   feature_dim: int = MOCK_FEATURE_DIM) -> "MockScene":
        image = _check_image(image)
        decoded = np.floor(image * CLASS_CODE_BASE).astype(np.int64)
        decoded = np.clip(decoded, 0, CLASS_CODE_BASE - 1)
        return cls(decoded.astype(np.uint8), seed, feature_dim)

    def encode_image(self, salt: int = 0) -> np.ndarray:
        """f32 image whose values decode back to the class map."""
        rng = np.random.default_rng([self.seed, 3, salt])
        texture = rng.uniform(0.05, 0.45, size=self.class_map.shape)
        return ((self.class_map + texture) / CLASS_CODE_BASE).astype(np.float32)

    def class_bases(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0])
        return _orthonormal_rows(CLASS_CODE_BASE, self.feature_dim, rng)

    def segmenter_features(self) -> np.ndarray:
        """H x W x d map: class base plus orthogonal perturbation of fixed norm."""
        bases = self.class_bases()
        height, width = self.class_map.shape
        rng = np.random.default_rng([self.seed, 2])
        raw = rng.normal(size=(height, width, self.feature_dim))
        base_map = bases[self.class_map]
        radial = np.einsum("hwc,hwc->hw", raw, base_map)
        perp = raw - radial[..., None] * base_map
        norms = np.linalg.norm(perp, axis=2)
        norms = np.where(norms == 0, 1.0, norms)
        perturb = perp * (PERTURBATION_NORM / norms)[..., None]
        return (base_map + perturb).astype(np.float32)

    def foreground(self) -> np.ndarray:
        return self.class_map > 0

    def segment(self, box: BoxPrompt) -> np.ndarray:
        """Ground-truth foreground of any class, restricted to the box."""
        box = box.clipped(self.class_map.shape)
        mask = np.zeros(self.class_map.shape, dtype=bool)
        rows, cols = box.slices
        mask[rows, cols] = self.class_map[rows, cols] > 0
        return mask


class MockSession:
    """Session over a decoded scene; feature map built lazily, once."""

    def __init__(self, backend: "MockBackend", scene: MockScene):
        self._backend = backend
        self._scene = scene
        self._features: np.ndarray | None = None
        self.features_available = backend.features_enabled

    @property
    def image_shape(self) -> tuple[int, int]:
        return self._scene.class_map.shape

    def segment(self, box: BoxPrompt) -> np.ndarray:
        return self._scene.segment(box)

    def features(self) -> np.ndarray:
        if not self.features_available:
            raise FeatureCapabilityError("mock backend configured without features")
        if self._features is None:
            self._features = self._scene.segmenter_features()
        return self._features

    def close(self) -> None:
        pass


class MockBackend:
    """Deterministic in-process backend; safe to share across threads.

    ``embed_counts`` instruments how many times the (mock) encoder ran per
    image id, which tests use to assert the embed-once contract.
    """

    def __init__(self, seed: int = 0, feature_dim: int = MOCK_FEATURE_DIM,
                 features_enabled: bool = True):
        self.seed = int(seed)
        self.feature_dim = int(feature_dim)
        self.features_enabled = features_enabled
        self.embed_counts: dict[str, int] = {}

    def open_session(self, image, image_id: str = "") -> MockSession:
        scene = MockScene.from_image(image, self.seed, self.feature_dim)
        self.embed_counts[image_id] = self.embed_counts.get(image_id, 0) + 1
        return MockSession(self, scene)

    def open_scene_session(self, scene: MockScene, image_id: str = "") -> MockSession:
        """Open a session directly on a scene, bypassing image decoding."""
        self.embed_counts[image_id] = self.embed_counts.get(image_id, 0) + 1
        return MockSession(self, scene)

    def close(self) -> None:
        pass


class ExternalSession:
    """Session served by a worker process; one in-flight request at a time."""

    def __init__(self, backend: "ExternalProcessBackend", image_id: str,
                 shape: tuple[int, int]):
        self._backend = backend
        self.image_id = image_id
        self.image_shape = shape
        self.features_available = backend.features_capable
        self._features: np.ndarray | None = None
        self._counter = 0

    def _next_path(self, kind: str) -> Path:
        self._counter += 1
        return self._backend.scratch / f"{self.image_id}_{kind}_{self._counter}.dfgt"

    def segment(self, box: BoxPrompt) -> np.ndarray:
        out = self._next_path("mask")
        self._backend.request({
            "cmd": "segment",
            "image_id": self.image_id,
            "box": list(box.as_tuple()),
            "out": str(out),
        })
        mask = read_tensor_file(out)
        if mask.shape != self.image_shape:
            raise BackendError(
                f"worker mask shape {mask.shape} != image shape {self.image_shape}")
        values = np.unique(mask)
        if not np.isin(values, (0, 1)).all():
            raise BackendError("worker mask is not binary")
        return mask.astype(bool)

    def features(self) -> np.ndarray:
        if not self.features_available:
            raise FeatureCapabilityError("worker does not serve feature maps")
        if self._features is None:
            out = self._next_path("feat")
            self._backend.request({
                "cmd": "features",
                "image_id": self.image_id,
                "out": str(out),
            })
            feats = read_tensor_file(out)
            expected = (*self.image_shape, self._backend.feature_dim)
            if feats.shape != expected:
                raise BackendError(
                    f"worker features shape {feats.shape}, expected {expected}")
            self._features = feats.astype(np.float32)
        return self._features

    def close(self) -> None:
        pass


class ExternalProcessBackend:
    """Bridge to a worker process speaking the stdio protocol above.

    The backend serializes requests (one in flight); run several backends in
    separate processes for parallel slices. Not thread-safe.
    """

    def __init__(self, cmdline: str | list[str], scratch_dir=None,
                 timeout: float = 120.0):
        args = shlex.split(cmdline) if isinstance(cmdline, str) else list(cmdline)
        if scratch_dir is None:
            scratch_dir = tempfile.mkdtemp(prefix="boxprompt_scratch_")
        self.scratch = Path(scratch_dir)
        self.scratch.mkdir(parents=True, exist_ok=True)
        self.timeout = timeout
        self._stderr_file = open(self.scratch / "worker_stderr.log", "wb")
        self._proc = subprocess.Popen(
            args + ["--scratch", str(self.scratch)],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=self._stderr_file,
            text=True,
            bufsize=1,
        )
        try:
            hello = self.request({"cmd": "handshake"})
        except BackendError:
            self.close()
            raise
        self.features_capable = bool(hello.get("features", False))
        self.feature_dim = int(hello.get("d_M", 0))

    def request_raw(self, payload: dict) -> dict:
        """Send one message and return the decoded reply without ok-checking."""
        if self._proc.poll() is not None:
            raise BackendError(f"worker exited with code {self._proc.returncode}")
        line = json.dumps(payload, sort_keys=True)
        try:
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise BackendError(f"worker pipe closed: {exc}") from exc
        ready, _, _ = select.select([self._proc.stdout], [], [], self.timeout)
        if not ready:
            raise BackendError(f"worker timed out after {self.timeout}s")
        reply = self._proc.stdout.readline()
        if reply == "":
            raise BackendError("worker closed its stdout")
        try:
            return json.loads(reply)
        except json.JSONDecodeError as exc:
            raise BackendError(f"invalid worker reply: {reply!r}") from exc

    def request(self, payload: dict) -> dict:
        reply = self.request_raw(payload)
        if not reply.get("ok", False):
            raise BackendError(
                f"worker error for {payload.get('cmd')}: {reply.get('error', '?')}")
        return reply

    def open_session(self, image, image_id: str) -> ExternalSession:
        if not _ID_PATTERN.match(image_id):
            raise ValidationError(f"image id {image_id!r} is not path-safe")
        image = _check_image(image)
        image_path = self.scratch / f"{image_id}_image.dfgt"
        write_tensor_file(image, image_path)
        self.request({"cmd": "embed", "image": str(image_path),
                      "image_id": image_id})
        return ExternalSession(self, image_id, image.shape)

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.write(json.dumps({"cmd": "shutdown"}) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError):
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        self._stderr_file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_backend(spec: str, seed_override: int | None = None):
    """Build a backend from a spec string: ``mock:<seed>`` or ``proc:<cmdline>``."""
    if spec.startswith("mock:"):
        seed = int(spec[len("mock:"):])
        if seed_override is not None:
            seed = seed_override
        return MockBackend(seed=seed)
    if spec == "mock":
        return MockBackend(seed=seed_override or 0)
    if spec.startswith("proc:"):
        cmdline = spec[len("proc:"):]
        if not cmdline.strip():
            raise ValidationError("proc backend needs a command line")
        return ExternalProcessBackend(cmdline)
    raise ValidationError(f"unknown backend spec {spec!r}")
