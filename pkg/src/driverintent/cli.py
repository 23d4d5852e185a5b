"""Command-line interface.

Subcommands: gen, train, eval, infer, attn, gradcheck, fps.
Exit codes: 0 success, 1 usage, 2 data/format error, 3 numeric failure.

An ``--episode`` argument is a path prefix: ``DIR/ep_12`` names the raster
files ``DIR/ep_12_view0.bin``, ``DIR/ep_12_view1.bin``, ...
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import kernel as K
from .checkpoint import load_checkpoint, save_checkpoint
from .embed import MultiViewFrame
from .episodes import (
    GenConfig,
    generate_dataset,
    kfold_split,
    read_manifest,
    read_raster,
    write_dataset,
)
from .errors import (
    ConfigurationError,
    ContractError,
    FormatError,
    IndexRangeError,
    NumericError,
    RuleParseError,
)
from .losses import cc_loss, cross_entropy, joint_loss
from .metrics import MetricsReport
from .model import IntentModel, ModelConfig, ViewGeometry, desk_model_config
from .rules import default_rules_path, load_default_rules, load_rules_file
from .runtime import InferenceSession, fps_report
from .train import (
    TrainConfig,
    evaluate,
    model_config_for,
    run_cv,
    train_model,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_train_config(path: str | None) -> TrainConfig:
    cfg = TrainConfig()
    if path is None:
        return cfg
    try:
        overrides = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read config: {exc}", path) from exc
    if not isinstance(overrides, dict):
        raise FormatError("config must be a JSON object", path)
    known = set(TrainConfig.__dataclass_fields__)
    bad = set(overrides) - known
    if bad:
        raise FormatError(f"unknown config keys {sorted(bad)}", path)
    if "freeze" in overrides:
        overrides["freeze"] = tuple(overrides["freeze"])
    try:
        return replace(cfg, **overrides)
    except (TypeError, ConfigurationError) as exc:
        raise FormatError(f"bad config: {exc}", path) from exc


def _load_rules(path: str | None):
    if path is None:
        return load_default_rules()
    return load_rules_file(path)


def _read_episode_frames(prefix: str, config: ModelConfig) -> list[MultiViewFrame]:
    stacks = []
    for m in range(len(config.views)):
        stacks.append(read_raster(f"{prefix}_view{m}.bin"))
    n_frames = stacks[0].shape[0]
    return [MultiViewFrame([s[t] for s in stacks]) for t in range(n_frames)]


# ---------------------------------------------------------------- subcommands


def cmd_gen(args) -> int:
    rules_path = args.rules or str(default_rules_path())
    ruleset = _load_rules(args.rules)
    cfg = GenConfig(n_frames=args.t)
    episodes = generate_dataset(args.n, cfg, ruleset, base_seed=args.seed)
    write_dataset(episodes, args.out, cfg, rules_path=rules_path)
    print(f"wrote {len(episodes)} episodes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_train_config(args.config)
    ruleset = _load_rules(args.rules)
    manifest = read_manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_lines: list[str] = []

    def log(line: str) -> None:
        log_lines.append(line)
        print(line)

    if args.folds >= 2:
        split = kfold_split(manifest, args.folds, seed=cfg.seed)
        report, models = run_cv(args.data, manifest, split, cfg, ruleset, log=log)
        for fold, model in enumerate(models):
            save_checkpoint(model, out / f"fold{fold}.ckpt")
        (out / "report.txt").write_text(str(report) + "\n", encoding="utf-8")
        print(report)
    else:
        from .episodes import load_episode

        episodes = [load_episode(args.data, e) for e in manifest.entries]
        model_cfg = model_config_for(cfg, manifest.views, manifest.class_names)
        model = IntentModel.create(model_cfg, seed=cfg.seed)

        def periodic(epoch: int, snapshot: IntentModel) -> None:
            if cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(snapshot, out / f"epoch{epoch}.ckpt")

        train_model(model, episodes, cfg, ruleset, log=log, on_epoch=periodic)
        save_checkpoint(model, out / "model.ckpt")
        result = evaluate(model, episodes, cfg.t_steps)
        fold = result.metrics(ruleset, len(manifest.class_names))
        report = MetricsReport([fold], manifest.class_names)
        (out / "report.txt").write_text(str(report) + "\n", encoding="utf-8")
        print(report)
    (out / "train.log").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ruleset = _load_rules(args.rules)
    manifest = read_manifest(args.data)
    from .episodes import load_episode

    episodes = [load_episode(args.data, e) for e in manifest.entries]
    result = evaluate(model, episodes, args.t)
    fold = result.metrics(ruleset, len(manifest.class_names))
    report = MetricsReport([fold], manifest.class_names)
    print(report)
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    frames = _read_episode_frames(args.episode, model.config)
    session = InferenceSession(model)
    for frame in frames:
        probs, label = session.feed(frame)
        cols = [str(session.t)] + [f"{p:.6f}" for p in probs]
        cols.append(model.class_names[label])
        print("\t".join(cols))
    return EXIT_OK


def cmd_attn(args) -> int:
    model = load_checkpoint(args.checkpoint)
    frames = _read_episode_frames(args.episode, model.config)
    session = InferenceSession(model, record_attention=True)
    for frame in frames:
        session.feed(frame)
    written = session.export_attention(args.out)
    print(f"wrote {len(written)} attention files to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config is not None:
        cfg = _load_train_config(args.config)
        model_cfg = model_config_for(
            cfg, [ViewGeometry(1, 16, 16)], load_default_rules().class_names
        )
        t_steps = cfg.t_steps
    else:
        model_cfg = desk_model_config(n_mem=2, n_layers=1, dim=16, n_heads=2,
                                      patch_size=8, n_views=1, side=16)
        t_steps = 3
    model = IntentModel.create(model_cfg, seed=0)
    rng = np.random.default_rng(1)
    frames = [
        MultiViewFrame([
            rng.random((g.channels, g.height, g.width), dtype=np.float32)
            for g in model_cfg.views
        ])
        for _ in range(t_steps)
    ]
    ruleset = load_default_rules()
    label, context = 2, (0, 1, 1)

    def run(tape=None):
        ps, _ = model.roll(tape, frames)
        per_step = [
            (cross_entropy(tape, p, label), cc_loss(tape, p, context, ruleset))
            for p in ps
        ]
        return joint_loss(tape, per_step).total_tensor

    tape = K.Tape()
    K.backward(run(tape), tape)
    report = K.finite_diff_grad_check(
        lambda: run().item(), model.parameters(), h=1e-5, tol=1e-4
    )
    print(report)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_fps(args) -> int:
    model = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    frames = [
        MultiViewFrame([
            rng.random((g.channels, g.height, g.width), dtype=np.float32)
            for g in model.config.views
        ])
        for _ in range(args.n)
    ]
    print(fps_report(InferenceSession(model), frames))
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="driverintent",
                     description="Online maneuver anticipation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="synthesize a dataset")
    p.add_argument("--n", type=int, required=True, help="number of episodes")
    p.add_argument("--t", type=int, default=10, help="frames per episode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rules", default=None, help="rule file (default: bundled)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model (k-fold CV with --folds >= 2)")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=1)
    p.add_argument("--config", default=None, help="JSON training-config overrides")
    p.add_argument("--rules", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rules", default=None)
    p.add_argument("--t", type=int, default=5, help="model timesteps")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="stream per-frame predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episode", required=True, help="episode path prefix")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("attn", help="export attention grids for an episode")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episode", required=True, help="episode path prefix")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fps", help="measure streaming throughput")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fps)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (FormatError, RuleParseError, ConfigurationError, ContractError,
            IndexRangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
