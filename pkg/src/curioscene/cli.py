"""Command-line front end: gen, train, eval, oracle, and render.

Exit codes: 0 success, 2 invalid input, 3 IO failure, 4 numeric failure.
Each command prints one machine-parseable key=value summary line on stdout;
anything meant for humans goes to stderr.  Runs that produce a directory
also write their resolved configuration there, so every artifact records
how it was made.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import sys

import numpy as np

from . import metrics as mt
from . import oracle as oc
from . import render as rn
from . import train as tr
from . import worlds
from .errors import CuriosceneError, FormatError, NumericError
from .nn import SceneCode, encode


def _detail(msg: str) -> None:
    print(msg, file=sys.stderr)


def _summary(command: str, **fields) -> None:
    parts = [command] + [f"{k}={v}" for k, v in fields.items()]
    print(" ".join(parts))


def _read_config(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    with open(path) as fh:
        parser.read_file(fh)
    return parser


def _write_resolved(path, sections: dict) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for name, values in sections.items():
        parser[name] = {k: str(v) for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def _section(cfg, name: str) -> dict:
    return dict(cfg[name]) if cfg is not None and cfg.has_section(name) else {}


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _coerce(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() not in _BOOL:
            raise FormatError(f"expected a boolean, got {raw!r}")
        return _BOOL[raw.lower()]
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


# -- gen ---------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = worlds.get_world(args.world)
    dataset = worlds.generate_dataset(
        spec, args.n, seed=args.seed, image_size=args.image_size, workers=args.workers
    )
    worlds.save_dataset(dataset, args.out)
    sizes = {name: len(idx) for name, idx in dataset.split.items()}
    _write_resolved(
        os.path.join(args.out, "config.resolved.cfg"),
        {
            "gen": {
                "world": args.world,
                "n": args.n,
                "seed": args.seed,
                "image_size": args.image_size,
                "workers": args.workers,
            }
        },
    )
    _detail(
        f"wrote {args.n} scenes of world '{args.world}' to {args.out} "
        f"(train/val/test = {sizes['train']}/{sizes['val']}/{sizes['test']})"
    )
    _summary(
        "gen",
        world=args.world,
        n=args.n,
        seed=args.seed,
        image_size=args.image_size,
        out=args.out,
        split=f"{sizes['train']}/{sizes['val']}/{sizes['test']}",
    )
    return 0


# -- train -------------------------------------------------------------


def _train_config(cfg, args) -> tr.TrainConfig:
    config = tr.TrainConfig()
    for key, raw in _section(cfg, "train").items():
        if not hasattr(config, key):
            raise FormatError(f"unknown [train] key {key!r}")
        setattr(config, key, _coerce(raw, getattr(config, key)))
    if args.mode:
        config.mode = args.mode
    if args.supervision_frac is not None:
        config.supervision_frac = args.supervision_frac
    if args.seed is not None:
        config.seed = args.seed
    if args.max_epochs is not None:
        config.max_epochs = args.max_epochs
    config.validate()
    return config


def cmd_train(args) -> int:
    cfg = _read_config(args.config)
    world_name = _section(cfg, "world").get("name")
    if world_name is None:
        raise FormatError("config needs [world] name=...")
    world = worlds.get_world(world_name)
    paths = _section(cfg, "paths")
    dataset_dir = args.dataset or paths.get("dataset")
    out_dir = args.out or paths.get("out")
    if dataset_dir is None or out_dir is None:
        raise FormatError("config needs [paths] dataset=... and out=... (or flags)")
    config = _train_config(cfg, args)

    labels = config.mode == "supervised" or args.instrument_labels
    dataset = worlds.load_dataset(dataset_dir, allow_labels=labels)
    network = _section(cfg, "network")
    net_cfg = tr.network_for_world(
        world,
        dataset.image_size,
        width_scale=float(network.get("width_scale", 0.5)),
        latent_dim=int(network.get("latent_dim", 64)),
    )

    state = None
    if args.resume:
        state, meta = tr.load_checkpoint(args.resume, config)
        _detail(f"resuming from {args.resume} at epoch {state.epoch}")

    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    log_path = os.path.join(out_dir, "log.csv")
    resolved = {
        "world": {"name": world_name},
        "network": {
            "image_size": net_cfg.image_size,
            "width_scale": net_cfg.width_scale,
            "latent_dim": net_cfg.latent_dim,
            "n_proposals": net_cfg.n_proposals,
            "enabled_heads": ",".join(sorted(net_cfg.enabled_heads)),
            "center_dim": net_cfg.center_dim,
        },
        "train": {k: getattr(config, k) for k in vars(config)},
        "paths": {"dataset": dataset_dir, "out": out_dir},
    }
    _write_resolved(os.path.join(out_dir, "config.resolved.cfg"), resolved)

    state, rows = tr.train(
        dataset,
        world,
        config,
        net_cfg=net_cfg,
        state=state,
        log_path=log_path,
        checkpoint_path=ckpt_path,
    )
    val_rows = [r for r in rows if r["split"] == "val"]
    final_val = val_rows[-1]["image_mse"] if val_rows else float("nan")
    _detail(f"finished at epoch {state.epoch}; log: {log_path}; checkpoint: {ckpt_path}")
    _summary(
        "train",
        mode=config.mode,
        world=world_name,
        epochs=state.epoch,
        val_mse=f"{final_val:.6g}",
        checkpoint=ckpt_path,
    )
    return 0


# -- eval --------------------------------------------------------------


def _novel_camera(camera: rn.Camera, angle: float = math.pi / 6.0) -> rn.Camera:
    """Training camera orbited around the vertical axis through look_at."""
    rel = np.asarray(camera.position, dtype=np.float64) - np.asarray(
        camera.look_at, dtype=np.float64
    )
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return rn.Camera(
        fov_y=camera.fov_y,
        image_size=camera.image_size,
        position=np.asarray(camera.look_at, dtype=np.float64) + rot @ rel,
        look_at=np.asarray(camera.look_at, dtype=np.float64),
        up=np.asarray(camera.up, dtype=np.float64),
    )


def _load_report(path) -> mt.EvalReport:
    with open(path) as fh:
        data = json.load(fh)
    return mt.EvalReport(per_scene=data["per_scene"], aggregate=data["aggregate"])


def cmd_eval(args) -> int:
    state, meta = tr.load_checkpoint(args.checkpoint)
    dataset = worlds.load_dataset(args.dataset, allow_labels=True)
    if dataset.spec.name != state.world.name:
        raise FormatError(
            f"checkpoint was trained on {state.world.name!r}, dataset is {dataset.spec.name!r}"
        )
    world = dataset.spec
    indices = dataset.split[args.split]
    camera = None
    if world.dims == 3:
        camera = _novel_camera(world.camera) if args.novel_view else world.camera
    codes = encode(dataset.images[indices], state.encoder, state.heads)
    report = mt.evaluate_codes(codes, dataset, indices, camera=camera)

    rows = [("eval", report.aggregate)]
    if args.reference_report:
        reference = _load_report(args.reference_report)
        rows.append(("ratio", mt.ratio_report(report, reference)))

    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "report.json")
    with open(report_path, "w") as fh:
        fh.write(report.to_json() + "\n")
    table = mt.format_table(rows)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(table + "\n")
    _write_resolved(
        os.path.join(args.out, "config.resolved.cfg"),
        {
            "eval": {
                "checkpoint": args.checkpoint,
                "dataset": args.dataset,
                "split": args.split,
                "novel_view": args.novel_view,
                "reference_report": args.reference_report or "",
            }
        },
    )
    _detail(table)
    fields = {
        "world": world.name,
        "split": args.split,
        "scenes": len(indices),
        "report": report_path,
    }
    for key in ("param_error", "count_error", "image_dssim"):
        if report.aggregate.get(key) is not None:
            fields[key] = f"{report.aggregate[key]:.6g}"
    _summary("eval", **fields)
    return 0


# -- oracle ------------------------------------------------------------


def cmd_oracle(args) -> int:
    cfg = oc.OracleConfig(n_problems=args.n_problems, steps=args.steps, seed=args.seed)
    record_every = args.record_every or max(1, args.steps // 20 or 1)
    os.makedirs(os.path.join(args.out, "frames"), exist_ok=True)
    snapshots: dict[int, np.ndarray] = {}

    def frame_hook(step: int, params: np.ndarray) -> None:
        snapshots[step] = params
        strips = oc.render_analytic_np(params[:, 0], params[:, 1], cfg.width)
        image = np.repeat(strips[None], 3, axis=0)
        rn.write_png(os.path.join(args.out, "frames", f"{step:06d}.png"), image)

    result = oc.optimize_joint(
        cfg, args.curiosity == "on", record_every=record_every, frame_hook=frame_hook
    )
    if args.steps == 0:
        frame_hook(0, result.initial)
        rows = [(0, None, None)]
    else:
        rows = result.trajectory

    csv_path = os.path.join(args.out, "trajectory.csv")
    with open(csv_path, "w") as fh:
        fh.write("step,problem_id,t_hat,l_hat,loss,discrepancy\n")
        for step, loss, disc in rows:
            params = snapshots[step]
            for pid in range(cfg.n_problems):
                loss_s = "" if loss is None else f"{loss!r}"
                disc_s = "" if disc is None else f"{disc!r}"
                fh.write(
                    f"{step},{pid},{params[pid, 0]!r},{params[pid, 1]!r},{loss_s},{disc_s}\n"
                )
    _write_resolved(
        os.path.join(args.out, "config.resolved.cfg"),
        {
            "oracle": {
                "n_problems": cfg.n_problems,
                "steps": cfg.steps,
                "curiosity": args.curiosity,
                "seed": cfg.seed,
                "record_every": record_every,
            }
        },
    )
    _detail(
        f"optimized {cfg.n_problems} problems for {cfg.steps} steps "
        f"(curiosity {args.curiosity}); collapse fraction "
        f"{result.collapse_fraction:.3f}, success fraction {result.success_fraction:.3f}"
    )
    _summary(
        "oracle",
        curiosity=args.curiosity,
        n=cfg.n_problems,
        steps=cfg.steps,
        collapse=f"{result.collapse_fraction:.4f}",
        success=f"{result.success_fraction:.4f}",
        out=args.out,
    )
    return 0


# -- render ------------------------------------------------------------


def _scene_from_json(path):
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    try:
        world = worlds.get_world(data["world"])
        image_size = int(data.get("image_size", 64))
        scene = dict(data["scene"])
    except KeyError as exc:
        raise FormatError(f"{path}: scene JSON is missing {exc}") from exc
    if "centers" in scene and len(scene["centers"]) == 0:
        # JSON can't express the (0, dims) shape an empty scene needs
        light = scene.get("light")
        code = SceneCode(
            centers=np.zeros((0, world.dims)),
            light=None if light is None else np.asarray(light, dtype=np.float64),
        )
        code.validate()
    else:
        code = SceneCode.from_dict(scene)
    return world, code, image_size


def cmd_render(args) -> int:
    if bool(args.scene_json) == bool(args.image):
        raise FormatError("pass exactly one of --scene-json or --image")
    if args.image and not args.checkpoint:
        raise FormatError("--image needs --checkpoint for the re-rendering pass")
    if args.scene_json:
        world, code, image_size = _scene_from_json(args.scene_json)
        image = worlds.render_label(world, code, image_size)
        rn.write_png(args.out, image)
        _detail(f"rendered {args.scene_json} ({world.name}, {code.n_objects} objects)")
        _summary(
            "render",
            source=args.scene_json,
            world=world.name,
            objects=code.n_objects,
            out=args.out,
        )
        return 0
    state, meta = tr.load_checkpoint(args.checkpoint)
    image = rn.read_png(args.image)
    size = state.net_cfg.image_size
    if image.shape != (3, size, size):
        raise FormatError(
            f"checkpoint expects {size}x{size} images, got {image.shape[1:]} "
        )
    code = encode(image, state.encoder, state.heads)
    rerender = worlds.render_label(state.world, code, size)
    rn.write_png(args.out, np.concatenate([image, rerender], axis=2))
    _detail(f"re-rendered {args.image} through {args.checkpoint} (input | prediction)")
    _summary(
        "render",
        source=args.image,
        checkpoint=args.checkpoint,
        world=state.world.name,
        out=args.out,
    )
    return 0


# -- parser ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="curioscene",
        description="Scene decomposition by curious analysis-by-synthesis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="sample and render a dataset")
    gen.add_argument("--world", required=True)
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--image-size", type=int, default=64)
    gen.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="train one regime from a config file")
    train.add_argument("--config", required=True)
    train.add_argument("--mode", choices=tr.MODES)
    train.add_argument("--supervision-frac", type=float)
    train.add_argument("--seed", type=int)
    train.add_argument("--max-epochs", type=int)
    train.add_argument("--resume")
    train.add_argument("--dataset", help="override [paths] dataset")
    train.add_argument("--out", help="override [paths] out")
    train.add_argument(
        "--instrument-labels",
        action="store_true",
        help="log Eq. 1 error against hidden labels even in unsupervised modes",
    )
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    ev.add_argument("--novel-view", action="store_true")
    ev.add_argument("--reference-report")
    ev.set_defaults(func=cmd_eval)

    orc = sub.add_parser("oracle", help="run the analytic collapse experiment")
    orc.add_argument("--n-problems", type=int, default=64)
    orc.add_argument("--steps", type=int, default=2000)
    orc.add_argument("--curiosity", choices=("on", "off"), required=True)
    orc.add_argument("--out", required=True)
    orc.add_argument("--seed", type=int, default=0)
    orc.add_argument("--record-every", type=int, default=0)
    orc.set_defaults(func=cmd_oracle)

    rend = sub.add_parser("render", help="render a scene JSON or re-render an image")
    rend.add_argument("--scene-json")
    rend.add_argument("--checkpoint")
    rend.add_argument("--image")
    rend.add_argument("--out", required=True)
    rend.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        _detail(f"numeric failure: {exc}")
        return 4
    except (OSError, IOError) as exc:
        _detail(f"IO failure: {exc}")
        return 3
    except (CuriosceneError, ValueError, KeyError) as exc:
        _detail(f"invalid input: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
