"""Command-line entry point: ``idqn <subcommand> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O or checkpoint error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from idqn import plotting
from idqn.checkpoint import load_checkpoint, save_checkpoint
from idqn.config import SCHEMA, build_run_config, format_config, load_config, parse_value
from idqn.env import PelletWorld, initial_state, load_layout, parse_edits, write_pgm
from idqn.errors import CheckpointError, IDQNError
from idqn.interpret import (
    SaliencyConfig,
    adversarial_probe,
    agreement,
    attention_map,
    export_embeddings,
    key_gallery,
    rollout,
    saliency_map,
    tile_frames,
)
from idqn.model import invert_all_keys, select_action
from idqn.trainer import evaluate, train

log = logging.getLogger("idqn")

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3


class UsageError(IDQNError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage already; route it through our handler so
    # the message format matches other config errors
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def _layout(ckpt, layout_file: str | None):
    if layout_file is None:
        return ckpt.layout
    lay = ckpt.layout
    return load_layout(layout_file, cell_px=lay.cell_px, frames=lay.frames, step_cap=lay.step_cap)


def _lam(ckpt, override: float | None) -> float:
    return ckpt.model_config.lambda_exp if override is None else override


def _episode_curve(metrics_rows, fields):
    i_step, i_ret = fields.index("step"), fields.index("return")
    steps = [int(r[i_step]) for r in metrics_rows if r[i_ret]]
    rets = [float(r[i_ret]) for r in metrics_rows if r[i_ret]]
    return steps, rets


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    overrides = {k: v for k, v in vars(args).items() if k in SCHEMA and v is not None}
    cfg = load_config(args.config, overrides)
    run = build_run_config(cfg)
    run.out_dir.mkdir(parents=True, exist_ok=True)
    (run.out_dir / "config.txt").write_text(format_config(cfg))

    finals = []
    for seed in run.seeds:
        d = run.out_dir / f"seed_{seed}"
        d.mkdir(exist_ok=True)
        log.info("training seed %d for %d steps", seed, run.trainer.total_steps)
        res = train(
            run.layout,
            run.trainer,
            run.weights,
            seed,
            model_config=run.model,
            metrics_path=d / "metrics.csv",
            eval_path=d / "eval.csv",
        )
        ckpt = res.checkpoint
        save_checkpoint(ckpt, d / "checkpoint.idqn")
        mean_r, rets = evaluate(ckpt.model, PelletWorld(run.layout), run.trainer.eval_episodes, run.model.lambda_exp, ckpt.env_seed)
        finals.append(mean_r)
        (d / "final_eval.csv").write_text(
            "episode,return\n" + "".join(f"{i},{r!r}\n" for i, r in enumerate(rets))
        )
        steps, ep_rets = _episode_curve(res.metrics.rows, res.metrics.fields)
        ev_steps = [int(r[0]) for r in res.evals.rows]
        ev_rets = [float(r[1]) for r in res.evals.rows]
        plotting.training_curve(steps, ep_rets, d / "training_curve.png", eval_steps=ev_steps, eval_returns=ev_rets)
        print(f"seed={seed} final_eval_mean={mean_r!r}")

    arr = np.asarray(finals)
    lines = [f"seed={s} final_eval_mean={r!r}\n" for s, r in zip(run.seeds, finals)]
    lines.append(f"mean={float(arr.mean())!r}\n")
    lines.append(f"variance={float(arr.var()):.12g}\n")
    (run.out_dir / "summary.txt").write_text("".join(lines))
    print(lines[-2] + lines[-1], end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    lay = _layout(ckpt, args.layout)
    mean_r, rets = evaluate(ckpt.model, PelletWorld(lay), args.episodes, _lam(ckpt, args.lambda_exp), ckpt.env_seed)
    print(f"mean_return={mean_r!r}")
    print(f"min_return={min(rets)!r}")
    print(f"max_return={max(rets)!r}")
    return EXIT_OK


def cmd_keys(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.outdir)
    paths = key_gallery(ckpt.model, out)
    if args.figure:
        images = invert_all_keys(ckpt.model)
        tiles = np.stack([[tile_frames(images[a, i]) for i in range(images.shape[1])] for a in range(images.shape[0])])
        plotting.image_grid(
            tiles,
            args.figure,
            row_labels=plotting.action_labels(images.shape[0]),
            col_labels=[f"{v:+.1f}" for v in ckpt.model.values],
        )
    print(f"keys={len(paths)}")
    return EXIT_OK


def cmd_attn(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    lay = _layout(ckpt, args.layout)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    env = PelletWorld(lay)
    state, obs = env.reset(ckpt.env_seed)
    run = rollout(ckpt.model, lay, state, args.steps, _lam(ckpt, args.lambda_exp))
    # replay the rollout to recover each observation the attention was computed on
    state, obs = env.reset_to(run.start)
    rows = ["step,action," + ",".join(f"w{i}" for i in range(ckpt.model_config.n_keys))]
    for t, a in enumerate(run.actions):
        w, heat = attention_map(ckpt.model, obs)
        write_pgm(out / f"attn_{t:03d}.pgm", heat)
        for act in range(w.shape[0]):
            rows.append(f"{t},{act}," + ",".join(repr(float(x)) for x in w[act]))
        if t == 0:
            plotting.attention_heatmap(w, ckpt.model.values, out / "attention_step000.png", title="attention at the start state")
        state, obs, _, _ = env.step(state, a)
    (out / "attention.csv").write_text("\n".join(rows) + "\n")
    print(f"steps={len(run.actions)}")
    return EXIT_OK


def cmd_saliency(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    lay = _layout(ckpt, args.layout)
    n_actions = ckpt.model_config.n_actions
    if not 0 <= args.action < n_actions:
        raise UsageError(f"--action must lie in [0, {n_actions}), got {args.action}")
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    state = initial_state(ckpt.env_seed, lay)
    _, obs = PelletWorld(lay).reset_to(state)
    sal = saliency_map(ckpt.model, obs, args.action, SaliencyConfig(stride=args.stride))
    np.savetxt(out / f"saliency_a{args.action}.csv", sal, delimiter=",", fmt="%.17g")
    peak = sal.max()
    write_pgm(out / f"saliency_a{args.action}.pgm", sal / peak if peak > 0 else sal)
    plotting.saliency_overlay(obs[-1], sal, out / f"saliency_a{args.action}.png", title=f"saliency, action {args.action}")
    print(f"max_saliency={float(peak)!r}")
    return EXIT_OK


def cmd_agree(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    lay = _layout(ckpt, args.layout)
    res = agreement(
        ckpt.model,
        PelletWorld(lay),
        rollouts=args.rollouts,
        lambda_exp=_lam(ckpt, args.lambda_exp),
        temperature=args.temperature,
        env_seed=ckpt.env_seed,
    )
    print(f"agreement={res.agreement!r}")
    print(f"matched={res.matched}")
    print(f"decisions={res.total}")
    return EXIT_OK


def cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    lay = _layout(ckpt, args.layout)
    edits = parse_edits(Path(args.edits).read_text())
    rep = adversarial_probe(ckpt.model, lay, edits, args.steps, ckpt.env_seed, _lam(ckpt, args.lambda_exp))
    report = rep.format()
    if args.out:
        Path(args.out).write_text(report)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_embed(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    lay = _layout(ckpt, args.layout)
    if args.n_states < 0:
        raise UsageError(f"--n-states must be >= 0, got {args.n_states}")
    env = PelletWorld(lay)
    observations = []
    state, obs = env.reset(ckpt.env_seed)
    lam = _lam(ckpt, args.lambda_exp)
    while len(observations) < args.n_states:
        observations.append(obs)
        a, _ = select_action(ckpt.model, obs, lam)
        state, obs, _, done = env.step(state, a)
        if done:
            state, obs = env.reset(ckpt.env_seed)
    export_embeddings(ckpt.model, observations, args.out)
    print(f"states={len(observations)} keys={ckpt.model_config.n_actions * ckpt.model_config.n_keys}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_common(p, layout=True):
    p.add_argument("checkpoint", help="checkpoint file written by 'idqn train'")
    if layout:
        p.add_argument("--layout", default=None, help="text layout file (default: the checkpoint's layout)")
    p.add_argument("--lambda-exp", type=float, default=None, help="exploration factor (default: the checkpoint's)")


def _config_flag(p, key):
    spec = SCHEMA[key]

    def conv(raw, key=key):
        try:
            return parse_value(key, raw)
        except IDQNError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    p.add_argument(f"--{key}", dest=key, type=conv, default=None, metavar=key.split(".")[-1].upper(), help=f"{spec.help} (default: {spec.fmt(spec.default)})")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="idqn", description="Interpretable DQN on PelletWorld.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one run per seed and write checkpoints, metrics and a summary")
    p.add_argument("--config", default=None, help="key = value config file; flags override it")
    for key in SCHEMA:
        _config_flag(p, key)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mean return of the greedy-plus-bonus policy")
    _add_common(p)
    p.add_argument("--episodes", type=int, default=100)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("keys", help="decode every key into a PGM image")
    p.add_argument("checkpoint")
    p.add_argument("outdir", help="receives exactly one PGM per (action, key)")
    p.add_argument("--figure", default=None, help="also draw the whole gallery into this PNG")
    p.set_defaults(func=cmd_keys)

    p = sub.add_parser("attn", help="per-step attention maps along a policy rollout")
    _add_common(p)
    p.add_argument("outdir")
    p.add_argument("--steps", type=int, default=20)
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("saliency", help="perturbation saliency of one action's Q-value at the start state")
    _add_common(p)
    p.add_argument("outdir")
    p.add_argument("--action", type=int, required=True)
    p.add_argument("--stride", type=int, default=2, help="mask-centre grid spacing in pixels")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("agree", help="agreement between latent and image-space action choices")
    _add_common(p)
    p.add_argument("--rollouts", type=int, default=5)
    p.add_argument("--temperature", type=float, default=0.1)
    p.set_defaults(func=cmd_agree)

    p = sub.add_parser("probe", help="compare the policy on the start state and an edited copy")
    _add_common(p)
    p.add_argument("--edits", required=True, help="edit commands, one per line (e.g. 'add_pellet 3 4')")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--out", default=None, help="also write the report to this file")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("embed", help="export state embeddings and keys as CSV")
    _add_common(p)
    p.add_argument("out")
    p.add_argument("--n-states", type=int, default=100)
    p.set_defaults(func=cmd_embed)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"idqn: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CheckpointError, OSError) as exc:
        print(f"idqn: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except IDQNError as exc:
        print(f"idqn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
