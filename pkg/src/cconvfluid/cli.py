"""Command-line interface: ``cconvfluid <subcommand> ...``.

Failures print one line ``error: <kind>: <message>`` to stderr and exit 1.
Usage errors (unknown flags, invalid values) exit 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .core import SimConfig
from .network import Model, ModelConfig
from .refsim import PRESETS, ScenePreset, generate, initial_state, preset, scene_config
from .simulator import SimState, rollout


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _u64(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {v}")
    return v


def _threads(args):
    return args.threads or os.cpu_count() or 1


def _sim_from(d, dt=None):
    d = dict(d or {})
    if dt is not None:
        d.setdefault("dt", dt)
    return SimConfig.from_dict(d)


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args):
    out = Path(args.out)
    kw = {} if args.frame_count is None else {"frame_count": args.frame_count}
    if args.scenes == 1 and out.suffix == ".flpf":
        targets = [(out, args.seed)]
    else:
        out.mkdir(parents=True, exist_ok=True)
        targets = [(out / f"{args.preset}_{args.seed + k:04d}.flpf", args.seed + k) for k in range(args.scenes)]
    for path, seed in targets:
        p = preset(args.preset, seed, **kw)
        seq = generate(p, scene_config(p), scene_id=path.stem)
        io.write_frames(path, seq)
        print(f"wrote {path} frames={len(seq)} fluid={seq.n_fluid} solid={seq.n_solid}")
    return 0


def cmd_train(args):
    from .training import TrainConfig, train

    conf = io.read_json(args.config) if args.config else {}
    dataset = io.read_dataset(args.data)
    sim = _sim_from(conf.get("sim"), dataset[0].dt)
    mcfg = ModelConfig.from_dict(conf.get("model", {}))
    tkw = dict(conf.get("train", {}))
    if args.iters is not None:
        tkw["total_iters"] = args.iters
    tkw["threads"] = _threads(args)
    tcfg = TrainConfig.desk(**tkw)

    def progress(it, loss, lr):
        print(f"iter {it} loss {loss:.6g} lr {lr:.3g}", flush=True)

    res = train(dataset, sim, mcfg, tcfg, progress=progress)
    extra = {"sim": sim.to_dict(), "train": tcfg.to_dict()}
    io.save_checkpoint(args.out, res.params, mcfg, res.adam, tcfg.total_iters, extra)
    lines = ["iteration,loss,lr"] + [f"{i},{l!r},{r!r}" for i, l, r in res.rows]
    Path(str(args.out) + ".loss.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {args.out}")
    return 0


def load_model(path):
    params, mcfg, _, manifest = io.load_checkpoint(path)
    sim = manifest.get("extra", {}).get("sim")
    return Model(mcfg, params), sim


def scene_from(desc: dict, sim_default=None):
    """Initial state and simulation config from a scene JSON object.

    Either ``{"preset": name, "seed": s, ...overrides}``, ``{"frames": file.flpf, "start": t}``
    or a full preset description. An optional ``"sim"`` object overrides the simulation config.
    """
    desc = dict(desc)
    sim = _sim_from(desc.pop("sim", None) or sim_default)
    if "frames" in desc:
        seq = io.read_frames(desc["frames"])
        t = int(desc.get("start", 0))
        if not 0 <= t < len(seq):
            raise ValueError(f"start frame {t} outside 0..{len(seq) - 1}")
        if sim.dt != seq.dt:
            sim = _sim_from(dict(sim.to_dict(), dt=seq.dt))
        return seq[t], sim, seq.scene_id
    if "preset" in desc:
        name = desc.pop("preset")
        p = preset(name, int(desc.pop("seed", 0)), **desc)
    else:
        p = ScenePreset.from_dict(desc)
    return initial_state(p, sim), scene_config(p, sim), f"{p.name}-{p.seed}"


def cmd_simulate(args):
    model, sim_default = load_model(args.ckpt)
    state, sim, sid = scene_from(io.read_json(args.scene), sim_default)
    seq = rollout(SimState(state), model, sim, args.frames, sid)
    from .core import FrameSequence

    full = FrameSequence(
        np.concatenate([state.fluid_pos[None], seq.fluid_pos]),
        np.concatenate([state.fluid_vel[None], seq.fluid_vel]),
        state.solid_pos, state.solid_normal, sim.dt, sid,
    )
    io.write_frames(args.out, full)
    print(f"wrote {args.out} frames={len(full)}")
    return 0


def cmd_eval(args):
    from .metrics import compare_sequences, evaluate

    pred = io.read_frames(args.pred)
    gt = io.read_frames(args.gt)
    if pred.n_fluid != gt.n_fluid:
        raise ValueError(f"fluid counts differ: {pred.n_fluid} vs {gt.n_fluid}")
    sim = SimConfig(dt=gt.dt)
    rep = compare_sequences(pred, gt, sim, args.seed)
    if args.ckpt:
        model, _ = load_model(args.ckpt)
        short, _ = evaluate(model, gt, sim, every=args.every, rollout_frames=1, seed=args.seed)
        rep.avg_pos_error_t1 = short.avg_pos_error_t1
        rep.avg_pos_error_t2 = short.avg_pos_error_t2
        rep.rows = [r for r in short.rows if r[0].startswith("avg_pos")] + rep.rows
    rep.check()
    report = Path(args.report)
    report.write_text(rep.to_csv())
    summary = report.with_suffix(".json") if report.suffix != ".json" else Path(str(report) + ".summary.json")
    summary.write_text(rep.to_json())
    print(rep.to_json(), end="")
    return 0


def cmd_grad_check(args):
    from .training import gradient_check

    errs = gradient_check(args.seed, n_instances=args.instances)
    worst = max(errs.values())
    for g, e in sorted(errs.items()):
        print(f"{g} {e:.3e}")
    ok = worst <= args.tol
    print(f"{'ok' if ok else 'FAIL'} max_rel_err={worst:.3e} tol={args.tol:g}")
    return 0 if ok else 1


def cmd_export(args):
    seq = io.read_frames(args.frames)
    paths = io.export_frames(seq, args.out, args.format)
    print(f"wrote {len(paths)} files to {args.out}")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="worker threads (default: all cores; 1 is bit-deterministic)")
    ap = argparse.ArgumentParser(prog="cconvfluid", description="Learned particle fluid simulation.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate reference trajectories")
    p.add_argument("--preset", required=True, choices=PRESETS)
    p.add_argument("--seed", type=_u64, required=True)
    p.add_argument("--out", required=True, help="a .flpf file, or a directory when --scenes > 1")
    p.add_argument("--scenes", type=_positive_int, default=1)
    p.add_argument("--frame-count", type=_positive_int, default=None, help="override the preset's frame count")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model on a directory of .flpf files")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help='JSON with optional "model", "train" and "sim" objects')
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=_positive_int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", parents=[common], help="roll out a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--frames", type=_positive_int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", parents=[common], help="compare predicted and reference frames")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True, help="CSV rows; a JSON summary is written beside it")
    p.add_argument("--ckpt", default=None, help="also report one- and two-step position errors")
    p.add_argument("--every", type=_positive_int, default=5)
    p.add_argument("--seed", type=_u64, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the two-step loss")
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--instances", type=_positive_int, default=20)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("export", parents=[common], help="write frames as CSV or ASCII PLY")
    p.add_argument("--frames", required=True)
    p.add_argument("--format", required=True, choices=("csv", "ply"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=_threads(args)):
            return args.func(args)
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as err:
        kind = type(err).__name__
        msg = " ".join(str(err).split())
        print(f"error: {kind}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
