"""The measurement battery: long rollouts, adaptation probes, norm traces,
gate-regime detection, adversarial probing, and the sweep/ablation drivers.

Every experiment is read-only over a parameter set, owns its random streams,
and emits a CSV of step-indexed series plus optional PNG snapshot grids named
``{experiment}_{runid}_{step}.png``.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image

from . import model as M
from . import ops
from .data import Dataset, Sample, shift_sample
from .metrics import IouReport, iou
from .model import ArchConfig, CellGrid, Environment, UpdateRuleParams
from .rng import StreamSet
from .tensor import NonFiniteError, Tensor, backward, no_grad
from .training import TrainConfig, Trainer, UnrollSchedule

PALETTE = {0: (40, 40, 48), 1: (235, 130, 40), 2: (245, 245, 245)}


@dataclass
class TraceSeries:
    name: str
    steps: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    note: str = ""

    def append(self, step: int, value: float):
        self.steps.append(step)
        self.values.append(float(value))


@dataclass
class RolloutResult:
    traces: dict[str, TraceSeries]
    ious: list[IouReport]
    diverged_at: Optional[int] = None
    change_steps: list[int] = field(default_factory=list)
    final_pred: Optional[np.ndarray] = None

    def series(self, name: str) -> TraceSeries:
        return self.traces[name]


def _l1(arr: np.ndarray) -> float:
    """Per-dimension l1: total absolute value over the element count."""
    return float(np.abs(arr).mean())


def _stack_samples(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.label.classes for s in samples])
    return images, labels


def _environment_t(pixels: Tensor, params: UpdateRuleParams,
                   cfg: ArchConfig) -> Environment:
    if cfg.resolution_factor == 1:
        return Environment(pixels=pixels)
    return Environment(pixels=pixels, encoded=M.encode_env(pixels, params))


def _environment(images: np.ndarray, params: UpdateRuleParams,
                 cfg: ArchConfig) -> Environment:
    return _environment_t(Tensor(images), params, cfg)


def segment(params: UpdateRuleParams, cfg: ArchConfig, images: np.ndarray,
            steps: Optional[int] = None, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Evolve fresh colonies over the images and return (classes, logits)."""
    steps = 40 if steps is None else steps
    b, h, w, _ = images.shape
    hs = h // cfg.resolution_factor
    ws = w // cfg.resolution_factor
    streams = StreamSet(seed)
    with no_grad():
        env = _environment(images.astype(np.float32), params, cfg)
        grid = M.init_state(b, hs, ws, cfg.cell_size, streams.init)
        for i in range(steps):
            grid, _ = M.step(grid, env, params, cfg, streams.mask, streams.noise,
                             step_index=i + 1)
        logits = M.predict_logits(grid, params, cfg).data
    return logits.argmax(-1), logits


def evaluate_iou(params: UpdateRuleParams, cfg: ArchConfig,
                 samples: Sequence[Sample], steps: Optional[int] = None,
                 seed: int = 0) -> IouReport:
    images, labels = _stack_samples(samples)
    pred, _ = segment(params, cfg, images, steps=steps, seed=seed)
    return iou(pred, labels, cfg.num_classes)


# -- core rollout ------------------------------------------------------------

_SERIES = ("iou_background", "iou_object", "iou_boundary", "state_l1",
           "logits_l1", "delta_state_l1", "delta_logits_l1", "delta_pred_l1",
           "mean_gate")


def _rollout(params: UpdateRuleParams, cfg: ArchConfig,
             samples: Sequence[Sample], steps: int, record_every: int,
             seed: int, update_prob: Optional[float] = None,
             env_schedule: Optional[Callable[[int], Optional[Sequence[Sample]]]] = None,
             run_id: str = "run", out_dir=None,
             snapshot_steps: Sequence[int] = ()) -> RolloutResult:
    """Shared engine for evolution / image-change / shift experiments.

    env_schedule(step) may return replacement samples right before that step
    (state is never touched); step indices are 1-based.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    eff_cfg = cfg if update_prob is None else replace(cfg, update_prob=update_prob)
    streams = StreamSet(seed)
    current = list(samples)
    images, labels = _stack_samples(current)

    b, h, w, _ = images.shape
    hs, ws = h // cfg.resolution_factor, w // cfg.resolution_factor
    result = RolloutResult({n: TraceSeries(n, note="per-dimension l1" if "l1" in n else "")
                            for n in _SERIES}, [])

    with no_grad():
        env = _environment(images, params, cfg)
        grid = M.init_state(b, hs, ws, cfg.cell_size, streams.init)
        logits = M.predict_logits(grid, params, cfg).data
        prev_state, prev_logits = grid.state.data, logits
        prev_pred = ops.softmax(logits)

        def record(step: int, gate: Optional[float], deltas=None):
            pred = logits.argmax(-1)
            rep = iou(pred, labels, cfg.num_classes, step=step, run_id=run_id)
            result.ious.append(rep)
            names = ("iou_background", "iou_object", "iou_boundary")
            for c, name in enumerate(names[:cfg.num_classes]):
                v = rep.get(c)
                if v is not None:
                    result.traces[name].append(step, v)
            result.traces["state_l1"].append(step, _l1(grid.state.data))
            result.traces["logits_l1"].append(step, _l1(logits))
            if deltas is not None:
                for name, v in deltas.items():
                    result.traces[name].append(step, v)
            if gate is not None:
                result.traces["mean_gate"].append(step, gate)
            if out_dir and step in snapshot_steps:
                _save_snapshot(Path(out_dir) / f"{run_id}_{step}.png",
                               images, pred, M.state_rgb(grid), cfg)

        record(0, None)
        for i in range(1, steps + 1):
            if env_schedule is not None:
                swap = env_schedule(i)
                if swap is not None:
                    current = list(swap)
                    images, labels = _stack_samples(current)
                    env = _environment(images, params, cfg)
                    result.change_steps.append(i)
            try:
                grid, diag = M.step(grid, env, params, eff_cfg, streams.mask,
                                    streams.noise, step_index=i)
                logits = M.predict_logits(grid, params, cfg).data
                if not np.isfinite(logits).all():
                    raise NonFiniteError("non-finite logits")
            except NonFiniteError:
                result.diverged_at = i
                break
            pred_probs = ops.softmax(logits)
            if i % record_every == 0:
                deltas = {
                    "delta_state_l1": _l1(grid.state.data - prev_state),
                    "delta_logits_l1": _l1(logits - prev_logits),
                    "delta_pred_l1": _l1(pred_probs - prev_pred),
                }
                gate = None if diag.mean_gate is None else float(diag.mean_gate.mean())
                record(i, gate, deltas)
            prev_state, prev_logits, prev_pred = grid.state.data, logits, pred_probs

    result.final_pred = logits.argmax(-1)
    if out_dir:
        write_trace_csv(Path(out_dir) / f"{run_id}.csv", result)
    return result


def run_evolution(params: UpdateRuleParams, cfg: ArchConfig,
                  samples: Sequence[Sample], steps: int, record_every: int = 1,
                  seed: int = 0, update_prob: Optional[float] = None,
                  out_dir=None, run_id: str = "evolution",
                  snapshot_steps: Sequence[int] = ()) -> RolloutResult:
    """Fresh colonies over fixed images, traced for `steps` steps."""
    return _rollout(params, cfg, samples, steps, record_every, seed,
                    update_prob=update_prob, run_id=run_id, out_dir=out_dir,
                    snapshot_steps=snapshot_steps)


def run_image_change(params: UpdateRuleParams, cfg: ArchConfig, dataset: Dataset,
                     period: int = 40, n_changes: int = 20, batch: int = 4,
                     seed: int = 0, record_every: int = 1, out_dir=None,
                     run_id: str = "image_change") -> RolloutResult:
    """Swap every image for a fresh one each `period` steps; state persists."""
    if period < 1:
        raise ValueError("period must be >= 1")
    streams = StreamSet(seed ^ 0x5EED)
    initial = [dataset.draw(streams.data) for _ in range(batch)]
    steps = period * (n_changes + 1)

    def schedule(step):
        if step > 1 and (step - 1) % period == 0:
            return [dataset.draw(streams.data) for _ in range(batch)]
        return None

    return _rollout(params, cfg, initial, steps, record_every, seed,
                    env_schedule=schedule, run_id=run_id, out_dir=out_dir)


def run_shift(params: UpdateRuleParams, cfg: ArchConfig, dataset: Dataset,
              period: int = 10, magnitude: int = 8, total_steps: int = 400,
              batch: int = 4, seed: int = 0, record_every: int = 1,
              out_dir=None, run_id: str = "shift") -> RolloutResult:
    """Randomly re-shift the pristine images every `period` steps.

    Shifts are applied to the originals (not compounded) so content never
    erodes; magnitude 0 degenerates to run_evolution.
    """
    streams = StreamSet(seed ^ 0x0FF5E7)
    originals = [dataset.draw(streams.data) for _ in range(batch)]

    def shifted():
        if magnitude == 0:
            return originals
        out = []
        for s in originals:
            dx = int(streams.data.integers(-magnitude, magnitude + 1))
            dy = int(streams.data.integers(-magnitude, magnitude + 1))
            out.append(shift_sample(s, dx, dy))
        return out

    def schedule(step):
        if step > 1 and (step - 1) % period == 0 and magnitude != 0:
            return shifted()
        return None

    return _rollout(params, cfg, originals, total_steps, record_every, seed,
                    env_schedule=schedule, run_id=run_id, out_dir=out_dir)


# -- gate regime -------------------------------------------------------------

@dataclass
class RegimeChange:
    step: int
    before: float
    after: float


def regime_trace(series_or_csv, threshold: float = 0.15,
                 window_frac: float = 0.01) -> Optional[RegimeChange]:
    """First step where the rolling median of mean_gate moves by more than
    `threshold` within a window of 1% of the run; None when it never does."""
    if isinstance(series_or_csv, (str, Path)):
        steps, values = [], []
        with open(series_or_csv) as f:
            for row in csv.DictReader(f):
                if row.get("mean_gate"):
                    steps.append(int(row["step"]))
                    values.append(float(row["mean_gate"]))
    else:
        values = list(series_or_csv.values)
        steps = list(series_or_csv.steps)
    n = len(values)
    w = max(3, round(window_frac * n))
    if n < 2 * w + 1:
        raise ValueError(f"series too short for change detection ({n} < {2 * w + 1})")
    x = np.asarray(values)
    med = np.array([np.median(x[max(0, t - w + 1):t + 1]) for t in range(n)])
    for t in range(w, n):
        if abs(med[t] - med[t - w]) > threshold:
            settled = min(n - 1, t + w)  # level once the window has crossed
            return RegimeChange(step=steps[t], before=float(med[t - w]),
                                after=float(med[settled]))
    return None


# -- adversarial probing ------------------------------------------------------

@dataclass
class AdversarialResult:
    image_before: np.ndarray
    image_after: np.ndarray
    pred_before: np.ndarray
    pred_after: np.ndarray
    objective_trace: list[float]


def adversarial_perturb(params: UpdateRuleParams, cfg: ArchConfig,
                        image: np.ndarray, region_mask: np.ndarray,
                        target_class: int, iters: int = 20,
                        step_size: float = 0.05, unroll_steps: int = 40,
                        seed: int = 0, max_retries: int = 6) -> AdversarialResult:
    """Gradient ascent on the summed target-class logit over the region.

    Only pixels inside the mask move; the trajectory randomness (initial
    state, Bernoulli masks, reset noise) is frozen by seed so the objective
    is deterministic, and each step is accepted only if it improves it.
    """
    if image.ndim != 3:
        raise ValueError("image must be (h, w, 3)")
    if region_mask.shape != image.shape[:2]:
        raise ValueError("region mask must match the image spatially")
    h, w, _ = image.shape
    hs, ws = h // cfg.resolution_factor, w // cfg.resolution_factor
    mask3 = region_mask.astype(np.float32)[..., None]
    sel = np.zeros((1, h, w, cfg.num_classes), dtype=np.float32)
    sel[0, ..., target_class] = region_mask

    state0 = StreamSet(seed).init.normal((1, hs, ws, cfg.cell_size))

    def trajectory(x):
        streams = StreamSet(seed)  # frozen trajectory randomness
        env = _environment_t(x, params, cfg)
        grid = CellGrid(Tensor(state0))
        for i in range(unroll_steps):
            grid, _ = M.step(grid, env, params, cfg, streams.mask, streams.noise,
                             step_index=i + 1)
        return M.predict_logits(grid, params, cfg)

    # the model is fixed: gradients flow to the image only
    flags = [(t, t.requires_grad) for _, t in params.manifest()]
    for t, _ in flags:
        t.requires_grad = False

    def objective(img_arr, want_grad):
        x = Tensor(img_arr[None].astype(np.float32), requires_grad=want_grad)
        if want_grad:
            logits = trajectory(x)
            obj = ops.tsum(ops.mul(logits, Tensor(sel)))
            backward(obj)
            return obj.item(), x.grad[0], logits.data
        with no_grad():
            logits = trajectory(x)
            obj = float((logits.data * sel).sum())
        return obj, None, logits.data

    current = image.astype(np.float32).copy()
    obj0, _, logits0 = objective(current, want_grad=False)
    trace = [obj0]
    pred_before = logits0.argmax(-1)[0]

    eta = step_size
    for _ in range(iters):
        val, grad, _ = objective(current, want_grad=True)
        if not np.isfinite(grad).all():
            eta *= 0.5
            if eta < step_size / 2**max_retries:
                break
            continue
        accepted = False
        for _ in range(max_retries):
            trial = np.clip(current + eta * grad * mask3, -0.5, 0.5)
            trial_val, _, _ = objective(trial, want_grad=False)
            if trial_val > val:
                current = trial
                trace.append(trial_val)
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            break

    _, _, logits1 = objective(current, want_grad=False)
    for t, flag in flags:
        t.requires_grad = flag
    return AdversarialResult(image_before=image.astype(np.float32),
                             image_after=current,
                             pred_before=pred_before,
                             pred_after=logits1.argmax(-1)[0],
                             objective_trace=trace)


# -- sweeps / ablations -------------------------------------------------------

@dataclass
class SweepRow:
    label: str
    arch: ArchConfig
    param_count: int
    iou_background: Optional[float]
    iou_object: Optional[float]
    iou_boundary: Optional[float]
    seconds_per_step: float


def _train_and_score(arch: ArchConfig, train_ds: Dataset, eval_ds: Dataset,
                     steps: int, batch: int, seed: int, label: str,
                     schedule: Optional[UnrollSchedule] = None,
                     lr: float = 3e-4) -> tuple[SweepRow, UpdateRuleParams]:
    schedule = schedule or UnrollSchedule()
    cfg = TrainConfig(steps=steps, lr=lr, batch=batch, seed=seed, arch=arch,
                      schedule=schedule)
    trainer = Trainer(cfg, train_ds)
    t0 = time.perf_counter()
    params = trainer.run()
    per_step = (time.perf_counter() - t0) / steps
    report = evaluate_iou(params, arch, eval_ds.samples,
                          steps=schedule.target_steps, seed=seed)
    row = SweepRow(label=label, arch=arch, param_count=M.param_count(arch),
                   iou_background=report.get(0), iou_object=report.get(1),
                   iou_boundary=report.get(2), seconds_per_step=per_step)
    return row, params


def sweep_state_size(train_ds: Dataset, eval_ds: Dataset,
                     cell_sizes: Sequence[int] = (16, 32, 48),
                     steps: int = 300, batch: int = 8, seed: int = 0,
                     base_arch: Optional[ArchConfig] = None,
                     out_dir=None) -> list[SweepRow]:
    base = base_arch or ArchConfig()
    rows = []
    for d in cell_sizes:
        arch = replace(base, cell_size=d, hidden_size=max(2, (3 * d) // 2))
        row, _ = _train_and_score(arch, train_ds, eval_ds, steps, batch, seed,
                                  label=f"d={d}")
        rows.append(row)
    if out_dir:
        write_sweep_csv(Path(out_dir) / "sweep_state_size.csv", rows)
    return rows


def ablate(train_ds: Dataset, eval_ds: Dataset, variants: dict[str, ArchConfig],
           steps: int = 300, batch: int = 8, seed: int = 0,
           name: str = "ablation", out_dir=None) -> list[SweepRow]:
    rows = []
    for label, arch in variants.items():
        row, _ = _train_and_score(arch, train_ds, eval_ds, steps, batch, seed,
                                  label=label)
        rows.append(row)
    if out_dir:
        write_sweep_csv(Path(out_dir) / f"{name}.csv", rows)
    return rows


@dataclass
class HighResReport:
    rows: list[SweepRow]
    speedup_iii_vs_ii: float


def highres_compare(make_dataset: Callable[[int], tuple[Dataset, Dataset]],
                    steps: int = 40, batch: int = 2, seed: int = 0,
                    base_arch: Optional[ArchConfig] = None,
                    out_dir=None) -> HighResReport:
    """Train (i) 48px/48 state, (ii) 96px/96 state, (iii) 96px image with a
    48px state behind the stride-2 adapters; report wall-clock per step."""
    base = base_arch or ArchConfig(cell_size=32, hidden_size=48)
    rows = []
    variants = [
        ("48img_48state", 48, replace(base, resolution_factor=1)),
        ("96img_96state", 96, replace(base, resolution_factor=1)),
        ("96img_48state", 96, replace(base, resolution_factor=2)),
    ]
    for label, res, arch in variants:
        train_ds, eval_ds = make_dataset(res)
        row, _ = _train_and_score(arch, train_ds, eval_ds, steps, batch, seed,
                                  label=label)
        rows.append(row)
    speedup = rows[1].seconds_per_step / rows[2].seconds_per_step
    if out_dir:
        write_sweep_csv(Path(out_dir) / "highres_compare.csv", rows)
    return HighResReport(rows=rows, speedup_iii_vs_ii=speedup)


# -- artifact emission --------------------------------------------------------

def write_trace_csv(path, result: RolloutResult) -> None:
    names = [n for n, s in result.traces.items() if s.steps]
    all_steps = sorted({st for n in names for st in result.traces[n].steps})
    lookup = {n: dict(zip(result.traces[n].steps, result.traces[n].values))
              for n in names}
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step"] + names + ["is_change_step"])
        for st in all_steps:
            row = [st] + [repr(lookup[n][st]) if st in lookup[n] else ""
                          for n in names]
            row.append(1 if st in result.change_steps else 0)
            w.writerow(row)


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "cell_size", "hidden_size", "first_layer",
                    "norm_kind", "residual", "resettable", "params",
                    "iou_background", "iou_object", "iou_boundary",
                    "seconds_per_step"])
        for r in rows:
            a = r.arch
            w.writerow([r.label, a.cell_size, a.hidden_size, a.first_layer,
                        a.norm_kind, a.residual, a.resettable, r.param_count,
                        "" if r.iou_background is None else f"{r.iou_background:.4f}",
                        "" if r.iou_object is None else f"{r.iou_object:.4f}",
                        "" if r.iou_boundary is None else f"{r.iou_boundary:.4f}",
                        f"{r.seconds_per_step:.4f}"])


def class_map_to_rgb(classes: np.ndarray) -> np.ndarray:
    out = np.zeros((*classes.shape, 3), dtype=np.uint8)
    for c, color in PALETTE.items():
        out[classes == c] = color
    return out


def _save_snapshot(path, images: np.ndarray, pred: np.ndarray,
                   state_rgb_arr: np.ndarray, cfg: ArchConfig,
                   upscale: int = 3) -> None:
    """One row per batch entry: input | prediction | state-RGB."""
    panels = []
    for i in range(images.shape[0]):
        img = np.clip((images[i] + 0.5) * 255, 0, 255).astype(np.uint8)
        pr = class_map_to_rgb(pred[i])
        st = np.clip(state_rgb_arr[i] * 255, 0, 255).astype(np.uint8)
        if cfg.resolution_factor == 2:
            st = np.repeat(np.repeat(st, 2, axis=0), 2, axis=1)
        panels.append(np.concatenate([img, pr, st], axis=1))
    sheet = np.concatenate(panels, axis=0)
    sheet = np.repeat(np.repeat(sheet, upscale, axis=0), upscale, axis=1)
    Image.fromarray(sheet).save(path)
