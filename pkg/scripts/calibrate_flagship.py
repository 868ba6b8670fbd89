"""Calibration: desk-scale flagship training for the acceptance suite.

Trains the resettable / instance-norm / residual model on 48px synthetic
shapes, evaluating held-out object IOU periodically so the acceptance step
budget can be pinned with evidence.
"""
import sys
import time
from pathlib import Path

from cellseg.data import SyntheticSpec, synthetic_dataset
from cellseg.experiments import evaluate_iou
from cellseg.model import ArchConfig
from cellseg.training import TrainConfig, Trainer, UnrollSchedule

OUT = Path(sys.argv[1] if len(sys.argv) > 1 else ".calib/flagship")
STEPS = int(sys.argv[2] if len(sys.argv) > 2 else 2500)
EVAL_EVERY = 250

train_ds = synthetic_dataset(SyntheticSpec(resolution=48, count=64, seed=100))
eval_ds = synthetic_dataset(SyntheticSpec(resolution=48, count=16, seed=200))

arch = ArchConfig(cell_size=32, hidden_size=48, norm_kind="instance",
                  resettable=True, residual=True)
cfg = TrainConfig(steps=STEPS, lr=3e-4, batch=4, pool_size=16, seed=0,
                  arch=arch, schedule=UnrollSchedule(target_steps=40, mini_steps=10),
                  out_dir=str(OUT), checkpoint_every=500)

OUT.mkdir(parents=True, exist_ok=True)
tr = Trainer(cfg, train_ds)
t0 = time.perf_counter()
log = open(OUT / "calibration.log", "w")
last_loss = float("nan")
for i in range(STEPS):
    m = tr.step_once()
    if m.loss is not None:
        last_loss = m.loss
    if (i + 1) % EVAL_EVERY == 0:
        rep = evaluate_iou(tr.params, arch, eval_ds.samples, steps=40, seed=1)
        gate = f"{m.mean_gate:.3f}" if m.mean_gate is not None else "-"
        line = (f"step {i+1} loss={last_loss:.4f} gate={gate} "
                f"objIOU={rep.get(1):.4f} bndIOU={rep.get(2) or 0:.4f} "
                f"bgIOU={rep.get(0):.4f} elapsed={time.perf_counter()-t0:.0f}s")
        print(line, flush=True)
        log.write(line + "\n")
        log.flush()
        tr.save(OUT / f"calib_{i+1:06d}.ncaw")
tr.save(OUT / "checkpoint_final.ncaw")
tr.write_metrics(OUT / "metrics.csv", OUT / "timings.csv")
log.close()
print("done", flush=True)
