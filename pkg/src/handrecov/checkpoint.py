"""Single-file checkpoint archives with version tags and weight checksums,
plus the per-directory stage lock."""

from __future__ import annotations

import hashlib
import os
from contextlib import contextmanager
from pathlib import Path

import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _state_checksums(state: dict) -> dict[str, str]:
    out = {}
    for name, tensor in state.items():
        h = hashlib.sha256(tensor.detach().cpu().numpy().tobytes())
        out[name] = h.hexdigest()
    return out


def save_checkpoint(path: str | Path, model: torch.nn.Module, meta: dict | None = None,
                    extra: dict | None = None) -> None:
    state = model.state_dict()
    payload = {
        "format_version": FORMAT_VERSION,
        "state": state,
        "checksums": _state_checksums(state),
        "meta": meta or {},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, model: torch.nn.Module | None = None,
                    verify: bool = True) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {payload.get('format_version')}"
        )
    if verify:
        actual = _state_checksums(payload["state"])
        if actual != payload["checksums"]:
            raise CheckpointError(f"{path}: weight checksums do not match")
    if model is not None:
        model.load_state_dict(payload["state"])
    return payload


@contextmanager
def stage_lock(checkpoint_dir: str | Path, name: str = "stage"):
    """One stage process at a time per checkpoint directory."""
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    lock = checkpoint_dir / f".{name}.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CheckpointError(
            f"stage lock {lock} is held; another stage is running in this directory"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)
