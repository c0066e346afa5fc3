"""Command-line harness: ``reoi <command> [options]``.

Every command writes its artifact plus a JSON report carrying the effective
configuration, seeds, input hashes and the package version, so a run can be
repeated exactly.  Reports hold no timestamps or host details and are
byte-identical across repeated runs.  ``REOI_THREADS`` caps worker threads
and never changes results.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, composite, distractor, io, metrics, mpc, sim, trustregion, wm

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2


class CliError(Exception):
    """A command could not produce its artifact."""


# ---------------------------------------------------------------- reports

def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (tuple, set)):
        return list(x)
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def report_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, indent=2, default=_jsonable).encode() + b"\n"


def write_report(path, obj) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(report_bytes(obj))


def _config_echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}


def _meta(args, hashes=None, seeds=None) -> dict:
    return {"command": args.command, "version": __version__, "config": _config_echo(args),
            "hashes": hashes or {}, "seeds": seeds or {}}


def _modes(text: str) -> tuple:
    modes = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in modes if m not in metrics.MODES]
    if bad or not modes:
        raise argparse.ArgumentTypeError(f"modes must be drawn from {','.join(metrics.MODES)}")
    return modes


# ---------------------------------------------------------------- shared loaders

def _load_model(path):
    if not Path(path).is_file():
        raise CliError(f"model file not found: {path}")
    return io.load_model(path), io.sha256_file(path)


def _load_region(args, model, hashes):
    """Region from ``--region``, else fitted on ``--data``, else None."""
    if getattr(args, "region", None):
        if not Path(args.region).is_file():
            raise CliError(f"region file not found: {args.region}")
        hashes["region"] = io.sha256_file(args.region)
        return io.load_region(args.region)
    if getattr(args, "data", None):
        data = io.load_dataset(args.data)
        hashes["dataset"] = io.hash_dataset(args.data)
        return trustregion.fit(model, data)
    return None


def _scene(args) -> sim.SceneState:
    if args.scene:
        cfg, seed = sim.load_scene_config(args.scene)
        seed = args.seed if seed is None else seed
    else:
        cfg = sim.SceneConfig(n_training=args.training, n_novel=args.novel,
                              layout=args.layout if args.novel else "random")
        seed = args.seed
    return sim.init_scene(cfg, int(seed))


def _scene_hash(state) -> str:
    return io.config_hash(sim.state_to_dict(state))


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> None:
    trajs = wm.generate_dataset(args.seed, args.episodes, args.policy, args.novel, args.horizon)
    counts = {p: sum(t.metadata["policy"] == p for t in trajs) for p in ("scripted", "random")}
    manifest = {"meta": _meta(args), "policy_counts": counts}
    digest = io.save_dataset(args.out, trajs, manifest)
    print(f"wrote {args.episodes} episodes to {args.out} (dataset {digest[:12]})")


def cmd_train(args) -> None:
    data = io.load_dataset(args.data)
    for traj in data:
        if wm._has_novel(traj.metadata):
            raise CliError("dataset contains novel-category objects; training data must be "
                           "training-category only")
    digest = io.hash_dataset(args.data)
    cfg = wm.TrainConfig(kind=args.kind, ridge_lambda=args.ridge, seed=args.seed)
    model = wm.train(data, config=cfg)
    if not (np.isfinite(model.residual_mean) and np.isfinite(model.residual_max)):
        raise CliError("training produced non-finite residuals")
    model.manifest["dataset_hash"] = digest
    io.save_model(args.out, model)
    report = {"meta": _meta(args, {"dataset": digest, "model": io.sha256_file(args.out)},
                        {"train": args.seed}),
              "residual_mean": model.residual_mean, "residual_max": model.residual_max,
              "n_episodes": len(data)}
    write_report(args.report or f"{args.out}.json", report)
    print(f"trained {args.kind} model on {len(data)} episodes -> {args.out}")


def cmd_region(args) -> None:
    model, mh = _load_model(args.model)
    data = io.load_dataset(args.data)
    pts, errs = trustregion.training_inputs(model, data)
    initial = trustregion.build(pts, errs)
    region = trustregion.expand(initial, pts, errs)
    io.save_region(args.out, region)
    report = {"meta": _meta(args, {"model": mh, "dataset": io.hash_dataset(args.data),
                                   "region": io.sha256_file(args.out)}),
              "initial": {"radius": initial.radius, "lipschitz": initial.lipschitz,
                          "bound": initial.bound, "n_centers": len(initial.centers),
                          "err_threshold": initial.meta["err_threshold"]},
              "final": {"radius": region.radius, "lipschitz": region.lipschitz,
                        "bound": region.bound, "n_centers": len(region.centers),
                        "steps": region.meta["steps"]}}
    write_report(args.report or f"{args.out}.json", report)
    print(f"region radius {region.radius:.3f}, {len(region.centers)} centres -> {args.out}")


def cmd_eval_pred(args) -> None:
    model, mh = _load_model(args.model)
    scenes = metrics.make_scenes(args.seed, args.scenes, n_novel=args.novel, layout=args.layout)
    reports = {m: metrics.eval_pred(model, scenes, m).to_dict() for m in args.modes}
    write_report(args.out, {"meta": _meta(args, {"model": mh}, {"scenes": args.seed}),
                            "modes": reports})
    for m, r in reports.items():
        print(f"{m}: ssim full {r['ssim_full']['mean']:.3f}, "
              f"in-distribution {r['ssim_indist']['mean']:.3f}")


def cmd_plan(args) -> None:
    model, mh = _load_model(args.model)
    hashes = {"model": mh}
    state = _scene(args)
    task = sim.TaskSpec.from_state(state)
    obs = sim.render(state).frame
    cands = mpc.sample_candidates(state, task, args.candidates,
                                  sim.episode_rng(args.seed, 0, "candidates"))
    region = _load_region(args, model, hashes) if args.mode == "trustregion" else None
    if args.mode == "trustregion" and region is None:
        raise CliError("trustregion mode needs --region or --data")
    res = metrics.run_mode(args.mode, model, region, obs, task, cands)
    outcome = mpc.execute(state, res, task)
    hashes["scene"] = _scene_hash(state)
    report = {"meta": _meta(args, hashes, {"scene": args.seed}), "result": res.to_dict(),
              "outcome": {k: bool(v) for k, v in outcome.items()},
              "candidates": [c.as_array() for c in cands]}
    write_report(args.out, report)
    if args.frames and res.chosen is not None:
        d = Path(args.frames)
        d.mkdir(parents=True, exist_ok=True)
        io.write_ppm(d / "observation.ppm", obs)
        io.write_ppm(d / "predicted.ppm", io.filmstrip(res.rollouts[res.chosen]))
        executed = [sim.render(s).frame for s in sim.rollout(state, res.plan)]
        io.write_ppm(d / "executed.ppm", io.filmstrip(executed))
    chosen = "needs human" if res.chosen is None else f"candidate {res.chosen}"
    print(f"{args.mode}: {chosen}; success={outcome['success']} collision={outcome['collision']}")


def cmd_bench(args) -> None:
    model, mh = _load_model(args.model)
    hashes = {"model": mh}
    region = _load_region(args, model, hashes) if "trustregion" in args.modes else None
    if "trustregion" in args.modes and region is None:
        raise CliError("trustregion mode needs --region or --data")
    cfg = metrics.BenchConfig(episodes=args.episodes, seed=args.seed, modes=args.modes,
                              n_candidates=args.candidates)
    rep = metrics.bench_planning(model, region, cfg)
    write_report(args.out, {"meta": _meta(args, hashes, {"bench": args.seed}), **rep.to_dict()})
    for m, r in rep.modes.items():
        print(f"{m}: success {r['success_rate']:.2f} collision {r['collision_rate']:.2f} "
              f"needs-human {r['needs_human_rate']:.2f}")


def cmd_identify(args) -> None:
    model, mh = _load_model(args.model)
    state = _scene(args)
    task = sim.TaskSpec.from_state(state)
    frame = sim.render(state).frame
    rep = distractor.identify(model, frame, task, tau=args.tau)
    write_report(args.out, {"meta": _meta(args, {"model": mh, "scene": _scene_hash(state)},
                                          {"scene": args.seed}),
                            "identification": rep.to_dict()})
    if args.masks:
        d = Path(args.masks)
        d.mkdir(parents=True, exist_ok=True)
        for s in rep.flagged_segments():
            io.write_pbm(d / f"flagged_{s.id:02d}.pbm", s.mask)
    print(f"{len(rep.segments)} segments, flagged {rep.flagged}")


def cmd_render(args) -> None:
    state = _scene(args)
    out = sim.render(state)
    io.write_ppm(args.out, out.frame)
    if args.layers:
        # the ground-truth layer stack, recomposited, must equal the render
        same = bool(np.array_equal(composite.composite(composite.ground_truth_stack(state)),
                                   out.frame))
        if not same:
            raise CliError("layer stack does not reproduce the render")
    write_report(args.report or f"{args.out}.json",
                 {"meta": _meta(args, {"scene": _scene_hash(state), "frame": io.sha256_file(args.out)},
                                {"scene": args.seed}),
                  "state": sim.state_to_dict(state)})
    print(f"rendered scene {args.seed} -> {args.out}")


# ---------------------------------------------------------------- parser

def _add_scene(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scene", help="JSON scene config (keys of SceneConfig plus seed)")
    p.add_argument("--layout", choices=("random", "blocking"), default="blocking")
    p.add_argument("--novel", type=int, choices=range(4), default=1)
    p.add_argument("--training", type=int, default=1, help="training-category obstacles")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="reoi", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file of option defaults; unknown keys are rejected")
        p.set_defaults(func=func)
        return p

    p = cmd("gen-data", cmd_gen_data, "generate a dataset of simulator episodes")
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--novel", type=int, choices=range(4), default=0)
    p.add_argument("--policy", choices=("scripted", "random", "mixed"), default="mixed")
    p.add_argument("--horizon", type=int, default=sim.PLAN_LENGTH)

    p = cmd("train", cmd_train, "train a world model on a training-only dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ridge", type=float, default=1e-3, help="ridge lambda (linear kind)")
    p.add_argument("--kind", choices=("conv", "linear"), default="conv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")

    p = cmd("region", cmd_region, "fit a trust region on the training dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")

    p = cmd("eval-pred", cmd_eval_pred, "prediction quality on distractor scenes")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--novel", type=int, choices=range(1, 4), default=3)
    p.add_argument("--layout", choices=("random", "blocking"), default="random")
    p.add_argument("--modes", type=_modes, default=("baseline", "reoi"))

    p = cmd("plan", cmd_plan, "plan and execute on one scene")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=metrics.MODES, default="reoi")
    p.add_argument("--candidates", type=int, default=mpc.N_CANDIDATES)
    p.add_argument("--region")
    p.add_argument("--data")
    p.add_argument("--frames", help="directory for observation and filmstrip pixmaps")
    _add_scene(p)

    p = cmd("bench", cmd_bench, "planning benchmark over seeded distractor episodes")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modes", type=_modes, default=metrics.MODES)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--candidates", type=int, default=mpc.N_CANDIDATES)
    p.add_argument("--region")
    p.add_argument("--data", help="training dataset to fit the region from when --region is absent")

    p = cmd("identify", cmd_identify, "flag novel distractors in a rendered scene")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=distractor.TAU)
    p.add_argument("--masks", help="directory for flagged-mask bitmaps")
    _add_scene(p)

    p = cmd("render", cmd_render, "render a scene to a pixmap")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--layers", action="store_true", help="also check the layer decomposition")
    _add_scene(p)
    return ap


def _load_config(path, sub_parser) -> dict:
    """Option defaults from a JSON file; unknown keys are an error."""
    with open(path) as f:
        conf = json.load(f)
    if not isinstance(conf, dict):
        raise CliError("config file must hold a JSON object")
    known = {a.dest for a in sub_parser._actions} - {"help", "config"}
    conf = {k.replace("-", "_"): v for k, v in conf.items()}
    unknown = sorted(set(conf) - known)
    if unknown:
        raise CliError(f"unknown config keys: {unknown}")
    if "modes" in conf:
        m = conf["modes"]
        conf["modes"] = _modes(m if isinstance(m, str) else ",".join(m))
    return conf


def _subcommand(ap, argv):
    choices = ap._subparsers._group_actions[0].choices
    for tok in argv:
        if tok in choices:
            return choices[tok]
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        sub_parser = _subcommand(ap, argv)
        if known.config and sub_parser is not None:
            conf = _load_config(known.config, sub_parser)
            sub_parser.set_defaults(**conf)
            for a in sub_parser._actions:
                if a.dest in conf:
                    a.required = False
        args = ap.parse_args(argv)
        args.func(args)
    except (CliError, sim.ConfigError, io.FormatError, wm.ModelError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
