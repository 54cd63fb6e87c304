"""Versioned, digest-protected checkpoint container.

The payload (model weights, optimizer state, schedule position, config hash)
is serialized to bytes first; the outer file stores those bytes next to their
SHA-256 digest and a format version. Loading refuses version mismatches and
detects any byte-level tampering of the payload.
"""

from __future__ import annotations

import hashlib
import io
import os
import warnings

import torch

from .errors import CheckpointError

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, payload: dict) -> str:
    """Write the payload; returns the hex digest stored alongside it."""
    buf = io.BytesIO()
    torch.save(payload, buf)
    raw = buf.getvalue()
    digest = hashlib.sha256(raw).hexdigest()
    outer = {"version": CHECKPOINT_VERSION, "digest": digest, "payload": raw}
    tmp = path + ".tmp"
    torch.save(outer, tmp)
    os.replace(tmp, path)
    return digest


def load_checkpoint(path: str, expected_config_hash: str | None = None) -> dict:
    """Read and verify a checkpoint; returns the inner payload dict."""
    try:
        outer = torch.load(path, weights_only=True)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path!r}: {e}") from e
    if not isinstance(outer, dict) or "version" not in outer:
        raise CheckpointError(f"{path!r} is not a checkpoint container")
    if outer["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {outer['version']} unsupported (expected {CHECKPOINT_VERSION})"
        )
    raw = outer["payload"]
    if hashlib.sha256(raw).hexdigest() != outer["digest"]:
        raise CheckpointError(f"digest mismatch, {path!r} is corrupted")
    payload = torch.load(io.BytesIO(raw), weights_only=True)
    if expected_config_hash is not None:
        got = payload.get("config_hash")
        if got != expected_config_hash:
            # not fatal at this level: callers that need strict matching
            # (training resume) enforce it themselves
            warnings.warn(
                f"config hash mismatch: checkpoint {got}, expected {expected_config_hash}",
                RuntimeWarning,
            )
    return payload
