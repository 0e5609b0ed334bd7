"""Command-line entry points for the full pipeline: primitive training,
ensembling, task-planner training, evaluation, the teleop service, and
run reporting. Output lands under the run root (`--run-dir` flag, else
the R2S2_RUN_DIR env var, else ./runs)."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .config import RUN_DIR_ENV, build_config, run_root, write_resolved
from .service import create_app, run_report


def _fail(msg):
    click.echo(f"error: {msg}", err=True)
    sys.exit(1)


def _require(paths, hint):
    for p in paths:
        if not Path(p).exists():
            _fail(f"missing checkpoint: expected {p} (train it with `{hint}`)")


@click.group()
@click.option("--run-dir", "run_dir", default=None,
              help=f"output root (overrides ${RUN_DIR_ENV}, default ./runs)")
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="YAML config file; flags override its values")
@click.pass_context
def main(ctx, run_dir, config_path):
    """Three-stage skill pipeline: primitives, latent ensembling, task
    planning, plus live teleoperation of the ensembled policy."""
    ctx.ensure_object(dict)
    ctx.obj["root"] = run_root(run_dir)
    ctx.obj["config_path"] = config_path


def _cfg(ctx, stage, **overrides):
    try:
        return build_config(stage, ctx.obj["config_path"], **overrides)
    except ValueError as err:
        _fail(err)


@main.command("train-primitive")
@click.argument("skill", type=click.Choice(["loco", "body", "hand"]))
@click.option("--updates", type=int, default=None)
@click.option("--n-envs", "n_envs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.pass_context
def train_primitive_cmd(ctx, skill, updates, n_envs, seed, lr):
    """Train one goal-conditioned primitive (loco | body | hand)."""
    from ..skills import train_primitive

    cfg = _cfg(ctx, "primitive", skill=skill, updates=updates, n_envs=n_envs,
               seed=seed, lr=lr)
    out = ctx.obj["root"] / skill
    write_resolved(cfg, out)
    train_primitive(skill, out, updates=cfg.resolved_updates(),
                    n_envs=cfg.n_envs, seed=cfg.seed, lr=cfg.lr)
    click.echo(f"done: {out}")


@main.command("train-ensemble")
@click.option("--mode", type=click.Choice(["full", "il_only", "rl_only", "seq"]),
              default=None, help="training-pipeline ablation toggle")
@click.option("--updates", type=int, default=None)
@click.option("--n-envs", "n_envs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.pass_context
def train_ensemble_cmd(ctx, mode, updates, n_envs, seed, lr):
    """Distill the three primitives into the latent skill space."""
    from ..ensemble import train_ensemble

    cfg = _cfg(ctx, "ensemble", mode=mode, updates=updates, n_envs=n_envs,
               seed=seed, lr=lr)
    root = ctx.obj["root"]
    _require([root / s / "best.ckpt" for s in ("loco", "body", "hand")],
             "train-primitive <skill>")
    out = root / ("ensemble" if cfg.mode == "full" else f"ensemble-{cfg.mode}")
    write_resolved(cfg, out)
    train_ensemble(root, out, updates=cfg.resolved_updates(),
                   n_envs=cfg.n_envs, seed=cfg.seed, lr=cfg.lr, mode=cfg.mode)
    click.echo(f"done: {out}")


@main.command("train-planner")
@click.argument("task", type=click.Choice(
    ["single-point", "dual-point", "shelf", "box"]))
@click.option("--variant", type=click.Choice(["latent", "primary", "flat"]),
              default=None, help="action space: learned latent, primitive "
              "commands, or raw joint targets")
@click.option("--updates", type=int, default=None)
@click.option("--n-envs", "n_envs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.pass_context
def train_planner_cmd(ctx, task, variant, updates, n_envs, seed, lr):
    """Train the task planner on top of the frozen skill space."""
    from ..planner import train_planner

    cfg = _cfg(ctx, "planner", task=task, variant=variant, updates=updates,
               n_envs=n_envs, seed=seed, lr=lr)
    root = ctx.obj["root"]
    if cfg.variant == "latent":
        _require([root / "ensemble" / "skillspace.ckpt"], "train-ensemble")
    elif cfg.variant == "primary":
        _require([root / s / "best.ckpt" for s in ("loco", "body", "hand")],
                 "train-primitive <skill>")
    out = root / "planner" / f"{task}-{cfg.variant}-s{cfg.seed}"
    write_resolved(cfg, out)
    train_planner(task, out, root, variant=cfg.variant,
                  updates=cfg.resolved_updates(), n_envs=cfg.n_envs,
                  seed=cfg.seed, lr=cfg.lr)
    click.echo(f"done: {out}")


@main.command("eval")
@click.argument("task", type=click.Choice(
    ["single-point", "dual-point", "shelf", "box"]))
@click.option("--variant", type=click.Choice(["latent", "primary", "flat"]),
              default=None)
@click.option("--trials", type=int, default=None)
@click.option("--seed", type=int, default=None,
              help="evaluation seed (default 9000)")
@click.option("--train-seed", type=int, default=0,
              help="which trained planner to load")
@click.option("--ckpt", type=click.Path(dir_okay=False), default=None,
              help="explicit planner checkpoint (overrides --train-seed)")
@click.option("--n-envs", "n_envs", type=int, default=None)
@click.option("--record/--no-record", default=False,
              help="also save the raw trajectory log")
@click.pass_context
def eval_cmd(ctx, task, variant, trials, seed, train_seed, ckpt, n_envs,
             record):
    """Deterministic task evaluation of a trained planner."""
    from ..planner import evaluate, load_planner

    cfg = _cfg(ctx, "eval", task=task, variant=variant, trials=trials,
               seed=seed if seed is not None else 9000, n_envs=n_envs)
    root = ctx.obj["root"]
    path = Path(ckpt) if ckpt else \
        root / "planner" / f"{task}-{cfg.variant}-s{train_seed}" / "best.ckpt"
    if not path.exists():
        _fail(f"missing planner checkpoint: expected {path} "
              f"(train it with `train-planner {task} --variant {cfg.variant}`)")
    try:
        policy, _ = load_planner(path)
        out = root / "eval"
        out.mkdir(parents=True, exist_ok=True)
        stem = f"{task}-{cfg.variant}-s{train_seed}-e{cfg.seed}"
        rec = out / f"{stem}.npz" if record else None
        rep = evaluate(task, policy, root, variant=cfg.variant,
                       trials=cfg.trials, seed=cfg.seed, n_envs=cfg.n_envs,
                       record_path=rec)
    except (ValueError, FileNotFoundError) as err:
        _fail(err)
    with open(out / f"{stem}.json", "w") as f:
        json.dump(rep, f, indent=2, sort_keys=True)
    click.echo(f"task={rep['task']} variant={rep['variant']} "
               f"trials={rep['trials']} sr={rep['sr']:.4f} "
               f"de={rep['de']:.4f} falls={rep['falls']}")


@main.command("teleop-serve")
@click.option("--port", type=int, default=8765, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--static", "static_dir", default="frontend/dist",
              show_default=True, help="console asset directory")
@click.pass_context
def teleop_serve_cmd(ctx, port, host, static_dir):
    """Serve the live teleoperation console for the ensembled policy."""
    import uvicorn

    from ..ensemble import HETERO_GOAL_DIM, HETERO_OBS_DIM, load_ensemble
    from .teleop import TeleopLoop

    root = ctx.obj["root"]
    ckpt = root / "ensemble" / "ensemble.ckpt"
    space = root / "ensemble" / "skillspace.ckpt"
    for p in (ckpt, space):
        if not p.exists():
            _fail(f"missing checkpoint: expected {p} "
                  f"(train it with `train-ensemble`)")
    try:
        student, meta = load_ensemble(ckpt)
    except ValueError as err:
        _fail(err)
    if (student.obs_dim, student.goal_dim) != (HETERO_OBS_DIM, HETERO_GOAL_DIM):
        _fail(f"checkpoint layout {student.obs_dim}/{student.goal_dim} does "
              f"not match this build ({HETERO_OBS_DIM}/{HETERO_GOAL_DIM})")
    loop = TeleopLoop(student)
    app = create_app(loop, static_dir=static_dir, report_root=root)
    click.echo(f"teleop console on http://{host}:{port}/ "
               f"(transport at ws://{host}:{port}/ws)")
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command("report")
@click.pass_context
def report_cmd(ctx):
    """Tabulate every run under the run root."""
    rep = run_report(ctx.obj["root"])
    if not rep["runs"] and not rep["evals"]:
        click.echo(f"no runs under {rep['root']}")
        return
    if rep["runs"]:
        cols = ("run", "rows", "update", "steps", "reward", "eval_sr",
                "eval_de", "falls")
        widths = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rep["runs"]))
                  for c in cols}
        click.echo("  ".join(c.ljust(widths[c]) for c in cols))
        for r in rep["runs"]:
            click.echo("  ".join(str(r.get(c, "")).ljust(widths[c])
                                 for c in cols))
    for e in rep["evals"]:
        click.echo(f"eval {e['file']}: sr={e.get('sr')} de={e.get('de')} "
                   f"falls={e.get('falls')} trials={e.get('trials')}")


if __name__ == "__main__":
    main()
