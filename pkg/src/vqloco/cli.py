"""Command-line entry points.

Every subcommand takes ``--config`` (flat JSON, optional) and ``--seed`` (overrides the config).
Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import motion as mo
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, default_gaits, load_config
from .evaluation import (evaluate, export_trajectory, generate, replay_policy, student_policy, teacher_policy)
from .rollout import EpisodeSpec, Trajectory, run_episodes
from .trainer import Trainer, load_clip_corpus

log = logging.getLogger("vqloco")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
POLICIES = ("teacher", "student", "replay", "untrained")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out_dir(cfg):
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _checkpoint_path(args, cfg):
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / "checkpoint.json"


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


# -- commands -------------------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    out = Path(args.out) if args.out else _out_dir(cfg) / "clips"
    out.mkdir(parents=True, exist_ok=True)
    morph = cfg.sim_config().morphology
    written = []
    for spec in default_gaits(cfg.n_synth_clips, cfg.seed):
        clip = mo.loop_clip(mo.synth_clip(spec, morph), cfg.gait_loops)
        path = out / f"{clip.name}.json"
        mo.save_clip(clip, path)
        written.append(str(path))
    _emit({"clips": written})


def _trainer(args, cfg):
    if getattr(args, "resume", None):
        return load_checkpoint(args.resume, expect_mode=cfg.mode)
    return Trainer(cfg, load_clip_corpus(cfg))


def _train_until(tr: Trainer, until, cfg):
    metrics = _out_dir(cfg) / "metrics.jsonl"
    records = tr.run(until=until, metrics_path=metrics)
    path = save_checkpoint(tr, _out_dir(cfg) / "checkpoint.json")
    _emit({"epoch": tr.epoch, "epochs_run": len(records), "checkpoint": str(path), "metrics": str(metrics),
           "last": records[-1] if records else None})


def cmd_train(args, cfg):
    """Pretraining and warm-up: every epoch before the second milestone."""
    tr = _trainer(args, cfg)
    _train_until(tr, min(tr.cfg.milestones[1], tr.cfg.epochs), cfg)


def cmd_distill(args, cfg):
    tr = load_checkpoint(_checkpoint_path(args, cfg), expect_mode=cfg.mode)
    _train_until(tr, min(tr.cfg.milestones[2] + 1, tr.cfg.epochs), cfg)


def cmd_train_prior(args, cfg):
    tr = load_checkpoint(_checkpoint_path(args, cfg), expect_mode=cfg.mode)
    stats = tr.train_prior()
    path = save_checkpoint(tr, _out_dir(cfg) / "checkpoint.json")
    (_out_dir(cfg) / "prior_stats.json").write_text(json.dumps(stats, sort_keys=True, indent=1))
    _emit(dict(stats, checkpoint=str(path)))


def _policy_fn(name, tr: Trainer, seed):
    if name == "teacher":
        return teacher_policy(tr.teacher)
    if name == "student":
        return student_policy(tr.student)
    if name == "replay":
        return replay_policy()
    # fresh weights from the same architecture
    fresh = Trainer(tr.cfg.with_(seed=seed), tr.clips)
    return teacher_policy(fresh.teacher)


def cmd_eval(args, cfg):
    tr = load_checkpoint(_checkpoint_path(args, cfg), expect_mode=cfg.mode)
    fn = _policy_fn(args.policy, tr, cfg.seed)
    report = evaluate(fn, tr.clips, args.envs or cfg.eval_envs, cfg.seed, tr.sim_cfg, tr.ranges,
                      cfg.eval_max_steps, tr.cfg.history_teacher, tr.cfg.history_student)
    doc = dict(report.to_dict(), policy=args.policy)
    (_out_dir(cfg) / f"eval_{args.policy}.json").write_text(json.dumps(doc, sort_keys=True, indent=1))
    _emit(doc)


def cmd_generate(args, cfg):
    tr = load_checkpoint(_checkpoint_path(args, cfg), expect_mode=cfg.mode)
    if not tr.prior.frozen:
        raise RuntimeError("the prior has not been trained; run train-prior first")
    res = generate(tr.prior, tr.codebook, tr.student, tr.clips, args.steps or cfg.gen_steps, cfg.seed,
                   tr.sim_cfg, tr.ranges, hs=tr.cfg.history_student)
    out = Path(args.out) if args.out else _out_dir(cfg) / "generated.json"
    out.write_text(json.dumps(res.trajectory.to_json(), sort_keys=True))
    _emit({"steps": res.survived, "fell": res.fell, "distinct_codes": res.distinct_codes,
           "indices": res.indices.tolist(), "trajectory": str(out)})


def cmd_export(args, cfg):
    out = Path(args.out) if args.out else _out_dir(cfg) / "trajectory.csv"
    if args.trajectory:
        try:
            traj = Trajectory.from_json(json.loads(Path(args.trajectory).read_text()))
        except (OSError, ValueError, KeyError) as exc:
            raise RuntimeError(f"cannot read trajectory {args.trajectory}: {exc}") from exc
    else:
        tr = load_checkpoint(_checkpoint_path(args, cfg), expect_mode=cfg.mode)
        fn = _policy_fn(args.policy, tr, cfg.seed)
        spec = EpisodeSpec(max_steps=cfg.eval_max_steps, window=None, keep_states=True)
        traj = run_episodes(1, tr.clips[:1], fn, tr.sim_cfg, tr.ranges, np.random.default_rng(cfg.seed), spec,
                            1, tr.cfg.history_teacher, tr.cfg.history_student)[0]
    rows = export_trajectory(traj, out, cfg.fps)
    _emit({"csv": str(out), "rows": rows})


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "distill": cmd_distill,
    "train-prior": cmd_train_prior,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "export": cmd_export,
}


def build_parser():
    p = _Parser(prog="vqloco", description="Skill-latent locomotion tracking on a toy biped.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    helps = {
        "gen-data": "write the synthetic gait clip corpus",
        "train": "world-model and teacher pretraining plus student warm-up",
        "distill": "annealed take-over distillation from a checkpoint",
        "train-prior": "fit the code prior on teacher-labelled rollouts",
        "eval": "track the clips in randomized environments and report SR/MJRE/MVE",
        "generate": "goal-free rollout driven by the code prior",
        "export": "write a rollout as CSV",
    }
    for name, text in helps.items():
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help="flat JSON config file")
        s.add_argument("--seed", type=int, help="overrides the config seed")
        if name != "gen-data":
            s.add_argument("--checkpoint", help="checkpoint path (default: <out_dir>/checkpoint.json)")
        if name == "gen-data":
            s.add_argument("--out", help="clip directory (default: <out_dir>/clips)")
        if name == "train":
            s.add_argument("--resume", help="continue from this checkpoint")
        if name in ("eval", "export"):
            s.add_argument("--policy", choices=POLICIES, default="student")
        if name == "eval":
            s.add_argument("--envs", type=int, help="number of environments (default: eval_envs)")
        if name == "generate":
            s.add_argument("--steps", type=int, help="rollout length (default: gen_steps)")
            s.add_argument("--out", help="trajectory JSON path")
        if name == "export":
            s.add_argument("--trajectory", help="trajectory JSON written by generate")
            s.add_argument("--out", help="CSV path")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (" + ", ".join(COMMANDS) + ")")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        overrides = {} if args.seed is None else {"seed": args.seed}
        cfg = load_config(args.config, overrides)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, mo.ClipFormatError, OSError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - anything else is still a runtime failure
        log.exception("unexpected failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
