"""Command-line entry points: train, eval, experiment, serve, export."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as X
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (DatasetConfig, RunConfigError, load_config,
                     save_effective_config)
from .data import DataError, SyntheticSpec, synthetic_dataset
from .experiments import evaluate_iou
from .model import ArchConfig
from .training import Trainer

EXPERIMENTS = ("evolution", "image_change", "shift", "regime", "adversarial",
               "highres_compare", "sweep_state_size", "sweep_resolution",
               "ablate_residual", "ablate_random_filters", "ablate_norm")


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


def cmd_train(args) -> int:
    try:
        run_cfg = load_config(args.config)
    except RunConfigError as e:
        return _fail(str(e))
    out_dir = run_cfg.resolved_out_dir()
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".writable"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        return _fail(f"output directory {out_dir} is not writable: {e}")
    try:
        train_ds, _ = run_cfg.dataset.load()
    except DataError as e:
        return _fail(str(e))
    save_effective_config(run_cfg, out_dir / "config.json")
    trainer = Trainer(run_cfg.train_config(), train_ds)
    trainer.run(progress_every=args.progress_every)
    print(f"trained {run_cfg.train.steps} steps -> {out_dir}")
    return 0


def _dataset_from_flags(args) -> DatasetConfig:
    kind = args.dataset
    root = None
    if kind.startswith("pets:"):
        kind, root = "pets", kind.split(":", 1)[1]
    elif kind.startswith("cache:"):
        kind, root = "cache", kind.split(":", 1)[1]
    return DatasetConfig(kind=kind, resolution=args.resolution,
                         train_count=args.count, eval_count=args.count,
                         seed=args.data_seed, root=root)


def cmd_eval(args) -> int:
    try:
        params, cfg, _ = load_checkpoint(args.checkpoint)
        _, eval_ds = _dataset_from_flags(args).load()
    except (CheckpointError, DataError) as e:
        return _fail(str(e))
    rep = evaluate_iou(params, cfg, eval_ds.samples, steps=args.steps,
                       seed=args.seed)
    names = {0: "background", 1: "object", 2: "boundary"}
    for c in range(cfg.num_classes):
        v = rep.get(c)
        print(f"iou_{names.get(c, c)}: {'absent' if v is None else f'{v:.4f}'}")
    return 0


def cmd_experiment(args) -> int:
    name = args.name
    if name not in EXPERIMENTS:
        return _fail(f"unknown experiment {name!r}; valid names: "
                     + ", ".join(EXPERIMENTS))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_id = args.run_id

    needs_checkpoint = name in ("evolution", "image_change", "shift", "adversarial")
    params = cfg = None
    if needs_checkpoint:
        if not args.checkpoint:
            return _fail(f"experiment {name!r} needs --checkpoint")
        try:
            params, cfg, _ = load_checkpoint(args.checkpoint)
        except CheckpointError as e:
            return _fail(str(e))

    try:
        dcfg = _dataset_from_flags(args)
        if name == "evolution":
            _, ds = dcfg.load()
            X.run_evolution(params, cfg, ds.samples[:args.batch], steps=args.steps,
                            record_every=args.record_every, seed=args.seed,
                            out_dir=out_dir, run_id=f"evolution_{run_id}",
                            snapshot_steps=tuple(args.snapshot_steps))
        elif name == "image_change":
            _, ds = dcfg.load()
            X.run_image_change(params, cfg, ds, period=args.period,
                               n_changes=args.n_changes, batch=args.batch,
                               seed=args.seed, out_dir=out_dir,
                               run_id=f"image_change_{run_id}")
        elif name == "shift":
            _, ds = dcfg.load()
            X.run_shift(params, cfg, ds, period=args.period,
                        magnitude=args.magnitude, total_steps=args.steps,
                        batch=args.batch, seed=args.seed, out_dir=out_dir,
                        run_id=f"shift_{run_id}")
        elif name == "regime":
            if not args.metrics:
                return _fail("experiment 'regime' needs --metrics CSV")
            change = X.regime_trace(args.metrics, threshold=args.threshold)
            if change is None:
                print("regime change: absent")
            else:
                print(f"regime change at step {change.step}: "
                      f"{change.before:.3f} -> {change.after:.3f}")
        elif name == "adversarial":
            _, ds = dcfg.load()
            sample = ds.samples[0]
            res = sample.image.shape[0]
            q = res // 4
            rect_mask = np.zeros((res, res), dtype=bool)
            rect_mask[q:res - q, q:res - q] = True
            from .data import gray_region as gray
            baseline = gray(sample.image, (q, q, res - 2 * q, res - 2 * q))
            adv = X.adversarial_perturb(params, cfg, baseline, rect_mask,
                                        target_class=args.target_class,
                                        iters=args.iters, unroll_steps=args.steps,
                                        seed=args.seed)
            before = (adv.pred_before[rect_mask] == args.target_class).mean()
            after = (adv.pred_after[rect_mask] == args.target_class).mean()
            print(f"target-class fraction in region: {before:.4f} -> {after:.4f}")
            print(f"objective: {adv.objective_trace[0]:.4f} -> "
                  f"{adv.objective_trace[-1]:.4f} "
                  f"({len(adv.objective_trace) - 1} accepted steps)")
            _write_adversarial(out_dir, run_id, adv)
        elif name == "highres_compare":
            def make(res):
                train = synthetic_dataset(SyntheticSpec(
                    resolution=res, count=args.count, seed=dcfg.seed))
                evald = synthetic_dataset(SyntheticSpec(
                    resolution=res, count=max(4, args.count // 4), seed=dcfg.seed + 1))
                return train, evald
            report = X.highres_compare(make, steps=args.budget_steps,
                                       batch=args.batch, seed=args.seed,
                                       base_arch=ArchConfig(cell_size=32,
                                                            hidden_size=48),
                                       out_dir=out_dir)
            for row in report.rows:
                print(f"{row.label}: {row.seconds_per_step:.3f}s/step "
                      f"objIOU={row.iou_object}")
            print(f"speedup (iii) vs (ii): {report.speedup_iii_vs_ii:.2f}x")
        elif name == "sweep_state_size":
            train_ds, eval_ds = dcfg.load()
            rows = X.sweep_state_size(train_ds, eval_ds,
                                      cell_sizes=tuple(args.cell_sizes),
                                      steps=args.budget_steps, batch=args.batch,
                                      seed=args.seed, out_dir=out_dir)
            for row in rows:
                print(f"{row.label}: params={row.param_count} "
                      f"objIOU={row.iou_object}")
        elif name == "sweep_resolution":
            rows = []
            for res in args.resolutions:
                train_ds = synthetic_dataset(SyntheticSpec(
                    resolution=res, count=args.count, seed=dcfg.seed))
                eval_ds = synthetic_dataset(SyntheticSpec(
                    resolution=res, count=max(4, args.count // 4),
                    seed=dcfg.seed + 1))
                got = X.ablate(train_ds, eval_ds,
                               {f"res={res}": ArchConfig(cell_size=32, hidden_size=48)},
                               steps=args.budget_steps, batch=args.batch,
                               seed=args.seed, name=f"sweep_resolution_{res}",
                               out_dir=None)
                rows.extend(got)
            X.write_sweep_csv(out_dir / "sweep_resolution.csv", rows)
            for row in rows:
                print(f"{row.label}: objIOU={row.iou_object}")
        elif name in ("ablate_residual", "ablate_random_filters", "ablate_norm"):
            train_ds, eval_ds = dcfg.load()
            base = ArchConfig(cell_size=args.cell_size, hidden_size=args.hidden_size)
            if name == "ablate_residual":
                variants = {"residual": replace(base, residual=True),
                            "no_residual": replace(base, residual=False)}
            elif name == "ablate_random_filters":
                variants = {"learned": replace(base, first_layer="depthwise"),
                            "random_frozen": replace(base, first_layer="depthwise",
                                                     freeze_spatial_filters=True)}
            else:
                variants = {k: replace(base, norm_kind=k)
                            for k in ("none", "batch_live", "instance", "channel")}
            rows = X.ablate(train_ds, eval_ds, variants, steps=args.budget_steps,
                            batch=args.batch, seed=args.seed, name=name,
                            out_dir=out_dir)
            for row in rows:
                print(f"{row.label}: objIOU={row.iou_object}")
    except DataError as e:
        return _fail(str(e))
    return 0


def _write_adversarial(out_dir: Path, run_id: str, adv) -> None:
    from PIL import Image as PILImage
    from .experiments import class_map_to_rgb

    def u8(img):
        return np.clip((img + 0.5) * 255, 0, 255).astype(np.uint8)

    sheet = np.concatenate([
        u8(adv.image_before), class_map_to_rgb(adv.pred_before),
        u8(adv.image_after), class_map_to_rgb(adv.pred_after)], axis=1)
    PILImage.fromarray(sheet).save(out_dir / f"adversarial_{run_id}_final.png")
    with open(out_dir / f"adversarial_{run_id}.csv", "w") as f:
        f.write("iteration,objective\n")
        for i, v in enumerate(adv.objective_trace):
            f.write(f"{i},{v!r}\n")


def cmd_serve(args) -> int:
    from .server import serve
    try:
        server = serve(args.checkpoint, port=args.port, host=args.host,
                       resolution=args.resolution, seed=args.seed,
                       rate=args.rate, ui_dir=args.ui)
    except CheckpointError as e:
        return _fail(str(e))
    print(f"probe service on ws://{args.host}:{server.port}/ "
          f"(ui: {args.ui or 'none'})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
    return 0


def cmd_export(args) -> int:
    try:
        params, cfg, meta = load_checkpoint(args.checkpoint)
    except CheckpointError as e:
        return _fail(f"invalid checkpoint: {e}")
    save_checkpoint(params, cfg, meta, args.out)
    reloaded, _, _ = load_checkpoint(args.out)
    for (n1, t1), (n2, t2) in zip(params.manifest(), reloaded.manifest()):
        if n1 != n2 or not np.array_equal(t1.data, t2.data):
            return _fail("re-emitted checkpoint failed verification")
    print(f"exported {args.checkpoint} -> {args.out} "
          f"({sum(t.size for _, t in params.manifest())} parameters)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cellseg",
                                description="cellular-automaton image segmentation")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--progress-every", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    def add_dataset_flags(sp):
        sp.add_argument("--dataset", default="synthetic",
                        help="synthetic | pets:ROOT | cache:DIR")
        sp.add_argument("--resolution", type=int, default=48)
        sp.add_argument("--count", type=int, default=16)
        sp.add_argument("--data-seed", dest="data_seed", type=int, default=100)

    e = sub.add_parser("eval", help="IOU of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    add_dataset_flags(e)
    e.add_argument("--steps", type=int, default=40)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("experiment", help="run a named experiment")
    x.add_argument("name", help=", ".join(EXPERIMENTS))
    x.add_argument("--checkpoint")
    x.add_argument("--out", default="experiments_out")
    x.add_argument("--run-id", dest="run_id", default="0")
    add_dataset_flags(x)
    x.add_argument("--steps", type=int, default=400)
    x.add_argument("--record-every", dest="record_every", type=int, default=1)
    x.add_argument("--snapshot-steps", dest="snapshot_steps", type=int,
                   nargs="*", default=[])
    x.add_argument("--period", type=int, default=40)
    x.add_argument("--n-changes", dest="n_changes", type=int, default=20)
    x.add_argument("--magnitude", type=int, default=8)
    x.add_argument("--batch", type=int, default=4)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--metrics", help="metrics.csv for the regime experiment")
    x.add_argument("--threshold", type=float, default=0.15)
    x.add_argument("--target-class", dest="target_class", type=int, default=1)
    x.add_argument("--iters", type=int, default=20)
    x.add_argument("--budget-steps", dest="budget_steps", type=int, default=300)
    x.add_argument("--cell-sizes", dest="cell_sizes", type=int, nargs="*",
                   default=[16, 32, 48])
    x.add_argument("--resolutions", type=int, nargs="*", default=[32, 48, 64])
    x.add_argument("--cell-size", dest="cell_size", type=int, default=32)
    x.add_argument("--hidden-size", dest="hidden_size", type=int, default=48)
    x.set_defaults(fn=cmd_experiment)

    s = sub.add_parser("serve", help="live probe service")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--port", type=int, default=8765)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--resolution", type=int, default=48)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rate", type=float, default=8.0)
    s.add_argument("--ui", help="static UI directory to serve over HTTP")
    s.set_defaults(fn=cmd_serve)

    ex = sub.add_parser("export", help="re-emit a checkpoint, validating format")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--out", required=True)
    ex.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
