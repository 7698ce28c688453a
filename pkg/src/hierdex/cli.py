"""Command-line pipeline driver.

Every subcommand reads one JSON config (defaults if none given), validates
it and its inputs before touching the filesystem, and stamps each artifact
with the config hash and seed so a rerun with the same inputs is
byte-identical.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import dal as dal_mod
from . import deploy, evaluation, planner as planner_mod, rl
from .config import (
    RunConfig,
    config_hash,
    default_config,
    dump_config,
    load_config,
    stamp_artifact,
)
from .env import default_catalog
from .expert import gen_dataset, load_demoset, reference_task, replay_demo, save_demoset, save_split_manifest
from .net import save_params
from .util import resolve_workers

MODES = ("hierarchical", "vanilla", "hierarchical_no_residual")

# artifact basenames, keyed where method names need them
DEMOS = "demos.jsonl"
SPLITS = "splits.json"
PLANNER = "planner.ckpt"
PLANNER_DAL = "planner_dal.ckpt"
CONTROLLER = {
    "hierarchical": "controller_hierarchical.ckpt",
    "vanilla": "controller_vanilla.ckpt",
    "hierarchical_no_residual": "controller_no_residual.ckpt",
    "fr": "controller_fr.ckpt",
    "dal": "controller_dal.ckpt",
}
STUDENT = "student.ckpt"


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise ValueError(f"missing artifact: {what} ({path})")
    return path


def _inpath(args, attr: str, basename: str) -> str:
    """Input artifacts default to the --out directory unless given."""
    given = getattr(args, attr, None)
    return given if given else os.path.join(args.out, basename)


def _require_controller(path: str, what: str) -> str:
    """Controller checkpoints are a .policy/.value/.meta.json triple."""
    for suffix in (".policy", ".value", ".meta.json"):
        _require(path + suffix, what)
    return path


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_print_config(cfg: RunConfig, args) -> int:
    sys.stdout.write(dump_config(cfg))
    return 0


def cmd_gen_data(cfg: RunConfig, args) -> int:
    catalog = default_catalog()
    workers = resolve_workers(cfg.workers if cfg.workers > 0 else None)
    ds = gen_dataset(
        catalog,
        cfg.data.per_category,
        cfg.data.steps,
        np.random.default_rng(cfg.seed),
        workers=workers,
    )
    out = _outdir(args)
    demo_path = os.path.join(out, DEMOS)
    save_demoset(ds, demo_path)
    save_split_manifest(ds, os.path.join(out, SPLITS))
    stamp_artifact(demo_path, cfg)
    print(f"wrote {len(ds)} demos to {demo_path}")
    return 0


def cmd_train_planner(cfg: RunConfig, args) -> int:
    ds = load_demoset(_require(_inpath(args, "dataset", DEMOS), "demo dataset"))
    out = _outdir(args)
    pl = planner_mod.Planner(
        default_catalog(), cfg.planner, np.random.default_rng(cfg.seed)
    )
    curve = planner_mod.train_bc(pl, ds, rng=np.random.default_rng(cfg.seed + 1))
    ckpt = os.path.join(out, PLANNER)
    planner_mod.save_planner(pl, ckpt)
    stamp_artifact(ckpt, cfg)
    curve_path = os.path.join(out, "planner_curve.csv")
    with open(curve_path, "w") as fh:
        fh.write("epoch,train_loss,holdout_loss\n")
        for row in curve:
            fh.write(
                f"{row['epoch']},{row['train_loss']!r},{row.get('holdout_loss')!r}\n"
            )
    stamp_artifact(curve_path, cfg)
    print(f"final BC loss {curve[-1]['train_loss']:.6f}; checkpoint {ckpt}")
    return 0


def cmd_eval_planner(cfg: RunConfig, args) -> int:
    ds = load_demoset(_require(_inpath(args, "dataset", DEMOS), "demo dataset"))
    pl = planner_mod.load_planner(
        _require(_inpath(args, "planner", PLANNER), "planner checkpoint")
    )
    out = _outdir(args)
    if args.split == "unseen_obj":
        pl.force_category = pl.catalog[0].category_id
    report = planner_mod.eval_planner(pl, ds, args.split, metric=args.metric)
    path = os.path.join(out, f"planner_report_{args.split}.csv")
    report.to_csv(path)
    stamp_artifact(path, cfg)
    for agg in report.aggregates():
        steps = max(r["steps"] for r in report.rows)
        print(
            f"{agg['split']}: sequences={agg['sequences']} "
            f"TE_cum_cm={agg['TE_cum_cm']:.2f} (per step "
            f"{agg['TE_cum_cm'] / steps:.3f} cm) OE_cum={agg['OE_cum']:.3f}"
        )
    return 0


def cmd_train_controller(cfg: RunConfig, args) -> int:
    ds = load_demoset(_require(_inpath(args, "dataset", DEMOS), "demo dataset"))
    name = args.mode
    ppo = replace(cfg.ppo, mode=args.mode)
    if args.fingertip_reward > 0.0:
        ppo = replace(ppo, fingertip_reward_coef=args.fingertip_reward)
        name = "fr"
    pl = None
    if args.mode != "vanilla":
        pl = planner_mod.load_planner(
            _require(_inpath(args, "planner", PLANNER), "planner checkpoint")
        )
    out = _outdir(args)
    catalog = default_catalog()
    tasks = rl.tasks_from_demos(catalog, ds.split("trained"))
    log_path = os.path.join(out, f"train_{name}.csv")
    if os.path.exists(log_path):
        os.remove(log_path)
    policy, value_net, history = rl.train_controller(
        pl, tasks, ppo, np.random.default_rng(cfg.seed), log_path=log_path
    )
    ckpt = os.path.join(out, CONTROLLER[name])
    rl.save_controller(policy, value_net, ckpt)
    stamp_artifact(ckpt, cfg)
    stamp_artifact(log_path, cfg)
    print(
        f"{name}: {len(history)} updates, final mean completion "
        f"{history[-1]['mean_completion']:.3f}; checkpoint {ckpt}"
    )
    return 0


def cmd_dal(cfg: RunConfig, args) -> int:
    ds = load_demoset(_require(_inpath(args, "dataset", DEMOS), "demo dataset"))
    pl = planner_mod.load_planner(
        _require(_inpath(args, "planner", PLANNER), "planner checkpoint")
    )
    policy, value_net = rl.load_controller(
        _require_controller(
            _inpath(args, "controller", CONTROLLER["hierarchical"]),
            "controller checkpoint",
        )
    )
    out = _outdir(args)
    catalog = default_catalog()
    policy, value_net, harvested, rows = dal_mod.dal_run(
        pl,
        policy,
        value_net,
        ds,
        catalog,
        cfg.dal,
        cfg.ppo,
        np.random.default_rng(cfg.seed),
    )
    pl_path = os.path.join(out, PLANNER_DAL)
    planner_mod.save_planner(pl, pl_path)
    stamp_artifact(pl_path, cfg)
    ctrl_path = os.path.join(out, CONTROLLER["dal"])
    rl.save_controller(policy, value_net, ctrl_path)
    stamp_artifact(ctrl_path, cfg)
    harvest_path = os.path.join(out, "harvest.jsonl")
    save_demoset(harvested, harvest_path)
    stamp_artifact(harvest_path, cfg)
    report_path = os.path.join(out, "dal_report.csv")
    dal_mod.write_dal_report(rows, report_path)
    stamp_artifact(report_path, cfg)
    total = sum(r["harvested"] for r in rows)
    print(f"harvested {total} demos over {len(rows)} iterations; report {report_path}")
    return 0


def cmd_distill(cfg: RunConfig, args) -> int:
    ds = load_demoset(_require(_inpath(args, "dataset", DEMOS), "demo dataset"))
    pl = planner_mod.load_planner(
        _require(_inpath(args, "planner", PLANNER_DAL), "planner checkpoint")
    )
    teacher, _ = rl.load_controller(
        _require_controller(
            _inpath(args, "controller", CONTROLLER["dal"]),
            "controller checkpoint",
        )
    )
    out = _outdir(args)
    catalog = default_catalog()
    tasks = rl.tasks_from_demos(catalog, ds.split("trained"))
    student, rows = deploy.dagger_distill(
        pl, teacher, tasks, cfg.ppo, cfg.distill, np.random.default_rng(cfg.seed)
    )
    ckpt = os.path.join(out, STUDENT)
    save_params(student.params(), ckpt)
    stamp_artifact(ckpt, cfg)
    log_path = os.path.join(out, "distill.csv")
    with open(log_path, "w") as fh:
        fh.write("iteration,beta,dataset,mse\n")
        for row in rows:
            fh.write(
                f"{row['iteration']},{row['beta']!r},{row['dataset']},{row['mse']!r}\n"
            )
    stamp_artifact(log_path, cfg)
    print(f"student mse {rows[-1]['mse']:.6f}; checkpoint {ckpt}")
    return 0


def _suite_artifacts(cfg: RunConfig, args, methods: tuple) -> dict:
    """Load per-method artifacts, failing early with the missing path."""
    art: dict = {}
    adir = args.artifacts if args.artifacts else args.out
    for method in methods:
        if method == "expert_replay":
            art[method] = {}
        elif method == "mpc":
            art[method] = {
                "horizon": cfg.suite.mpc_horizon,
                "samples": cfg.suite.mpc_samples,
                "sigma": cfg.suite.mpc_sigma,
                "reward_weights": cfg.ppo.reward_weights,
            }
        else:
            pl_name = PLANNER_DAL if method == "ours" else PLANNER
            ctrl = {
                "ours": CONTROLLER["dal"],
                "ours_no_dal": CONTROLLER["hierarchical"],
                "ours_fr": CONTROLLER["fr"],
                "vanilla_rl": CONTROLLER["vanilla"],
            }[method]
            mode = "vanilla" if method == "vanilla_rl" else "hierarchical"
            ppo = replace(cfg.ppo, mode=mode)
            planner_art = None
            if mode != "vanilla":
                planner_art = planner_mod.load_planner(
                    _require(os.path.join(adir, pl_name), f"{method} planner")
                )
            policy, _ = rl.load_controller(
                _require_controller(os.path.join(adir, ctrl), f"{method} controller")
            )
            art[method] = {"planner": planner_art, "policy": policy, "cfg": ppo}
    return art


def cmd_eval(cfg: RunConfig, args) -> int:
    ds = load_demoset(_require(_inpath(args, "dataset", DEMOS), "demo dataset"))
    methods = tuple(args.methods.split(",")) if args.methods else evaluation.SUITE_METHODS
    for m in methods:
        if m not in evaluation.SUITE_METHODS:
            raise ValueError(f"unknown method: {m}")
    artifacts = _suite_artifacts(cfg, args, methods)
    out = _outdir(args)
    suite = evaluation.SuiteSpec(
        catalog=default_catalog(),
        dataset=ds,
        artifacts=artifacts,
        methods=methods,
        seeds=cfg.suite.seeds,
        rotation_rule=cfg.suite.rotation_rule,
        grace_steps=cfg.suite.grace_steps,
        noise=cfg.suite.noise,
        config_hash=config_hash(cfg),
    )
    report = evaluation.run_task_suite(suite)
    path = os.path.join(out, "eval")
    evaluation.emit_report(report, path)
    stamp_artifact(path, cfg)
    for agg in report.aggregates():
        std = "-" if agg["std"] is None else f"{agg['std']:.3f}"
        print(
            f"{agg['task']:24s} {agg['method']:14s} "
            f"mean={agg['mean']:.3f} std={std}"
        )
    return 0


def cmd_fuse_demo(cfg: RunConfig, args) -> int:
    out = _outdir(args)
    _, g = reference_task(default_catalog(), steps=cfg.data.steps, seed=cfg.seed + 7)
    report = deploy.fusion_demo(
        g, np.random.default_rng(cfg.seed), cam=cfg.camera, cfg=cfg.fusion
    )
    path = os.path.join(out, "fusion.csv")
    report.to_csv(path)
    stamp_artifact(path, cfg)
    s = report.summary()
    print(
        f"fused over {s['steps']} frames: mean TE {s['mean_te_cm']:.2f} cm, "
        f"mean OE {s['mean_oe_rad']:.4f} rad, rejected {s['rejected_total']}"
    )
    return 0


def cmd_replay(cfg: RunConfig, args) -> int:
    ds = load_demoset(_require(_inpath(args, "dataset", DEMOS), "demo dataset"))
    if not (0 <= args.index < len(ds)):
        raise ValueError(f"demo index {args.index} out of range (0..{len(ds) - 1})")
    demo = ds.demos[args.index]
    catalog = {s.category_id: s for s in default_catalog()}
    c = replay_demo(catalog[demo.category_id], demo, noise=args.noise)
    print(f"completion {c:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config path (defaults otherwise)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="artifacts", help="output directory")

    p = argparse.ArgumentParser(
        prog="hierdex",
        description="Hierarchical bimanual manipulation pipeline",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("print-config", parents=[common])
    sub.add_parser("gen-data", parents=[common])

    sp = sub.add_parser("train-planner", parents=[common])
    sp.add_argument("--dataset")

    sp = sub.add_parser("eval-planner", parents=[common])
    sp.add_argument("--dataset")
    sp.add_argument("--planner")
    sp.add_argument(
        "--split",
        default="trained",
        choices=["trained", "unseen_traj", "unseen_obj", "harvest"],
    )
    sp.add_argument("--metric", default="angle", choices=["angle", "frobenius"])

    sp = sub.add_parser("train-controller", parents=[common])
    sp.add_argument("--dataset")
    sp.add_argument("--planner")
    sp.add_argument("--mode", default="hierarchical", choices=MODES)
    sp.add_argument("--fingertip-reward", type=float, default=0.0)

    sp = sub.add_parser("dal", parents=[common])
    sp.add_argument("--dataset")
    sp.add_argument("--planner")
    sp.add_argument("--controller")

    sp = sub.add_parser("distill", parents=[common])
    sp.add_argument("--dataset")
    sp.add_argument("--planner")
    sp.add_argument("--controller")

    sp = sub.add_parser("eval", parents=[common])
    sp.add_argument("--dataset")
    sp.add_argument("--artifacts")
    sp.add_argument("--methods", default=None, help="comma-separated subset")

    sub.add_parser("fuse-demo", parents=[common])

    sp = sub.add_parser("replay", parents=[common])
    sp.add_argument("--dataset")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--noise", action="store_true")

    return p


HANDLERS = {
    "print-config": cmd_print_config,
    "gen-data": cmd_gen_data,
    "train-planner": cmd_train_planner,
    "eval-planner": cmd_eval_planner,
    "train-controller": cmd_train_controller,
    "dal": cmd_dal,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "fuse-demo": cmd_fuse_demo,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_cfg(args)
        return HANDLERS[args.command](cfg, args)
    except Exception as e:  # CLI boundary: report and signal failure
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
