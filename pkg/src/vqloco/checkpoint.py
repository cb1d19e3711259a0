"""Whole-run checkpoints as one JSON document.

Parameters are stored as decimal float lists (Python's repr round-trips float64 exactly), bulk
buffer arrays as base64 raw bytes. Keys are sorted so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import motion as mo
from .codebook import Codebook
from .config import ConfigError, RunConfig
from .rollout import _pack, _unpack
from .sim import RobotState
from .trainer import Trainer, TrajectoryBuffer

__all__ = ["FORMAT_VERSION", "CheckpointError", "ModeMismatch", "checkpoint_doc", "save_checkpoint",
           "load_checkpoint", "restore"]

FORMAT_VERSION = 1
_STATE_FIELDS = ("body_pos", "body_quat", "body_vel", "body_angvel", "joint_q", "joint_dq")


class CheckpointError(RuntimeError):
    """Unreadable, corrupt or incompatible checkpoint file."""


class ModeMismatch(ConfigError):
    """Checkpoint was trained with a different bottleneck mode than requested."""


def _clip_doc(clip: mo.MotionClip):
    st = clip.states
    d = {f: _pack(getattr(st, f)) for f in _STATE_FIELDS}
    d.update(name=clip.name, fps=clip.fps, foot_bodies=list(st.foot_bodies))
    return d


def _clip_from(d):
    st = RobotState(*(_unpack(d[f]) for f in _STATE_FIELDS), foot_bodies=tuple(d["foot_bodies"]))
    return mo.MotionClip(d["name"], st, d["fps"])


def checkpoint_doc(tr: Trainer):
    return {
        "format_version": FORMAT_VERSION,
        "config": tr.cfg.to_dict(),
        "epoch": tr.epoch,
        "rng": tr.rng.bit_generator.state,
        "world_model": tr.wm.to_json(),
        "codebook": None if tr.codebook is None else tr.codebook.to_json(),
        "teacher": tr.teacher.to_json(),
        "student": tr.student.to_json(),
        "prior": tr.prior.to_json(),
        "optimizers": {k: dc.adam_to_json(v) for k, v in sorted(tr.adam.items())},
        "buffer": tr.buffer.to_json(),
        "ledger": tr.ledger,
        "clips": [_clip_doc(c) for c in tr.clips],
    }


def save_checkpoint(tr: Trainer, path):
    text = json.dumps(checkpoint_doc(tr), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text)
    return path


def restore(doc, expect_mode=None) -> Trainer:
    """Rebuild a ``Trainer`` from a checkpoint document."""
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointError("not a checkpoint document (no format_version)")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {doc['format_version']} is not supported "
                              f"(expected {FORMAT_VERSION})")
    try:
        cfg = RunConfig.from_dict(doc["config"])
        if expect_mode is not None and cfg.mode != expect_mode:
            raise ModeMismatch(f"checkpoint was trained in mode {cfg.mode!r}, but mode {expect_mode!r} "
                               "was requested")
        clips = [_clip_from(c) for c in doc["clips"]]
        tr = Trainer(cfg, clips)
        tr.epoch = int(doc["epoch"])
        tr.rng.bit_generator.state = doc["rng"]
        tr.wm.load_json(doc["world_model"])
        if tr.codebook is not None:
            cb = Codebook.from_json(doc["codebook"])
            tr.codebook.entries, tr.codebook.counts, tr.codebook.sums = cb.entries, cb.counts, cb.sums
            tr.codebook.frozen = cb.frozen
        tr.teacher.load_json(doc["teacher"])
        tr.student.load_json(doc["student"])
        tr.prior.load_json(doc["prior"])
        tr.adam = {k: dc.adam_from_json(v) for k, v in doc["optimizers"].items()}
        tr.buffer = TrajectoryBuffer.from_json(doc["buffer"])
        tr.ledger = list(doc["ledger"])
    except ModeMismatch:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return tr


def load_checkpoint(path, expect_mode=None) -> Trainer:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint (line {exc.lineno}: {exc.msg})") from exc
    return restore(doc, expect_mode)
