"""Stdio worker serving the segmenter protocol from the mock backend.

Run as ``python -m boxprompt.mock_worker --seed 7 --scratch DIR``. Useful to
exercise the external-process code path and the protocol conformance suite
without any real model. Embeddings are cached per image id; each actual
embed appends the image id to ``<scratch>/encoder_calls.log`` so tests can
count encoder invocations.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .search import BoxPrompt
from .segmenter import MOCK_FEATURE_DIM, MockBackend
from .tensor_io import read_tensor_file, write_tensor_file


class MockWorker:
    def __init__(self, seed: int, scratch: Path, feature_dim: int = MOCK_FEATURE_DIM,
                 features_enabled: bool = True):
        self.backend = MockBackend(seed=seed, feature_dim=feature_dim,
                                   features_enabled=features_enabled)
        self.scratch = scratch
        self.sessions: dict[str, object] = {}
        self.scratch.mkdir(parents=True, exist_ok=True)

    def _log_encode(self, image_id: str) -> None:
        with open(self.scratch / "encoder_calls.log", "a", encoding="utf-8") as log:
            log.write(image_id + "\n")

    def handle(self, message: dict) -> tuple[dict, bool]:
        """Returns (reply, keep_running)."""
        cmd = message.get("cmd")
        if cmd == "handshake":
            return {"ok": True, "features": self.backend.features_enabled,
                    "d_M": self.backend.feature_dim}, True
        if cmd == "shutdown":
            return {"ok": True}, False
        if cmd == "embed":
            image_id = message["image_id"]
            if image_id not in self.sessions:
                image = read_tensor_file(message["image"])
                self.sessions[image_id] = self.backend.open_session(image, image_id)
                self._log_encode(image_id)
            return {"ok": True}, True
        if cmd in ("segment", "features"):
            image_id = message.get("image_id")
            session = self.sessions.get(image_id)
            if session is None:
                return {"ok": False, "error": "no_embedding"}, True
            out = message["out"]
            if cmd == "segment":
                r0, c0, r1, c1 = message["box"]
                box = BoxPrompt(int(r0), int(c0), int(r1), int(c1))
                mask = session.segment(box.clipped(session.image_shape))
                write_tensor_file(mask.astype(np.uint8), out)
            else:
                if not self.backend.features_enabled:
                    return {"ok": False, "error": "no_features"}, True
                write_tensor_file(session.features(), out)
            return {"ok": True}, True
        return {"ok": False, "error": f"unknown_command:{cmd}"}, True


def serve(worker: MockWorker, stdin=None, stdout=None) -> None:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        keep_running = True
        try:
            message = json.loads(line)
        except json.JSONDecodeError:
            reply = {"ok": False, "error": "bad_json"}
        else:
            try:
                reply, keep_running = worker.handle(message)
            except Exception as exc:  # never crash on a bad request
                reply = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
        stdout.write(json.dumps(reply, sort_keys=True) + "\n")
        stdout.flush()
        if not keep_running:
            break


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--scratch", required=True)
    parser.add_argument("--d-m", type=int, default=MOCK_FEATURE_DIM)
    parser.add_argument("--no-features", action="store_true")
    args = parser.parse_args(argv)
    worker = MockWorker(args.seed, Path(args.scratch), feature_dim=args.d_m,
                        features_enabled=not args.no_features)
    serve(worker)
    return 0


if __name__ == "__main__":
    sys.exit(main())
