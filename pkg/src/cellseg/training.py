"""Mini-unroll training over a persistent sample pool.

A pool entry carries (image, label, state, ages).  Every optimizer step
draws a batch, unrolls K automaton steps from the stored states (which
enter the graph as constants, so no gradient crosses an unroll boundary),
applies the age-gated per-step cross-entropy, takes one Adam step, writes
the detached final states back, and stochastically resets images/states so
the configured fractions are refreshed by the target step count.

The classical baseline (`full_unroll`) draws fresh images and states every
optimizer step and backpropagates through all T steps.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import model as M
from . import ops
from .checkpoint import save_checkpoint
from .data import Dataset, LabelMask
from .model import ArchConfig, CellGrid, Environment, UpdateRuleParams
from .optim import Adam
from .rng import StreamSet
from .tensor import NonFiniteError, Tensor, backward


class ScheduleError(ValueError):
    pass


@dataclass
class UnrollSchedule:
    target_steps: int = 40                 # T: step count at which predictions must hold
    loss_onset: Optional[int] = None       # T0; defaults to T // 3
    mini_steps: int = 10                   # K
    image_reset_frac: float = 0.5          # fraction of images refreshed by step T
    state_reset_frac: float = 0.5
    mode: str = "mini_unroll"              # or "full_unroll"

    @property
    def t0(self) -> int:
        return self.target_steps // 3 if self.loss_onset is None else self.loss_onset

    def validate(self) -> "UnrollSchedule":
        if not 1 <= self.mini_steps <= self.target_steps:
            raise ScheduleError("need 1 <= K <= T")
        if not 0 <= self.t0 < self.target_steps:
            raise ScheduleError("need 0 <= T0 < T")
        for p in (self.image_reset_frac, self.state_reset_frac):
            if not 0.0 <= p <= 1.0:
                raise ScheduleError("reset fractions must be in [0,1]")
        if self.mode not in ("mini_unroll", "full_unroll"):
            raise ScheduleError(f"unknown mode {self.mode!r}")
        return self


def per_unroll_reset_prob(p_target: float, k: int, t: int) -> float:
    """Per-unroll reset probability whose cumulative fraction reaches
    p_target after T/K unrolls: 1 - (1 - p)^(K/T)."""
    if not 0.0 <= p_target <= 1.0:
        raise ScheduleError(f"p_target {p_target} out of [0,1]")
    if not 1 <= k <= t:
        raise ScheduleError("need 1 <= K <= T")
    return 1.0 - (1.0 - p_target) ** (k / t)


@dataclass
class PoolEntry:
    image: np.ndarray            # (h_i, w_i, 3)
    label: LabelMask
    label_onehot: np.ndarray     # (h_i, w_i, C)
    state: np.ndarray            # (h_s, w_s, d)
    image_age: int
    state_age: int
    entry_id: int


class SamplePool:
    """Persistent (image, state, age) training entries."""

    def __init__(self, dataset: Dataset, size: int, state_shape: tuple,
                 streams: StreamSet, num_classes: int):
        self.dataset = dataset
        self.num_classes = num_classes
        self.entries: list[PoolEntry] = []
        for i in range(size):
            s = dataset.draw(streams.data)
            state = streams.init.normal(state_shape)
            self.entries.append(PoolEntry(
                image=s.image, label=s.label,
                label_onehot=s.label.one_hot(num_classes),
                state=state, image_age=0, state_age=0, entry_id=i))

    def __len__(self):
        return len(self.entries)

    def resample(self, rho_image: float, rho_state: float, streams: StreamSet):
        """Independently per entry: replace the image (fresh dataset draw) with
        probability rho_image, re-randomise the state with rho_state."""
        for e in self.entries:
            if streams.pool.uniform(())[()] < rho_image:
                s = self.dataset.draw(streams.data)
                e.image, e.label = s.image, s.label
                e.label_onehot = s.label.one_hot(self.num_classes)
                e.image_age = 0
            if streams.pool.uniform(())[()] < rho_state:
                e.state = streams.init.normal(e.state.shape)
                e.state_age = 0


@dataclass
class TrainConfig:
    steps: int = 100
    lr: float = 3e-4
    batch: int = 32
    pool_size: Optional[int] = None        # default 4 * batch
    seed: int = 0
    checkpoint_every: int = 0              # 0: only the final checkpoint
    out_dir: Optional[str] = None
    arch: ArchConfig = field(default_factory=ArchConfig)
    schedule: UnrollSchedule = field(default_factory=UnrollSchedule)

    def validate(self) -> "TrainConfig":
        self.arch.validate()
        self.schedule.validate()
        if self.steps < 1:
            raise ScheduleError("steps must be >= 1")
        if self.effective_pool_size < self.batch:
            raise ScheduleError("pool size must be >= batch")
        return self

    @property
    def effective_pool_size(self) -> int:
        return 4 * self.batch if self.pool_size is None else self.pool_size


@dataclass
class UnrollResult:
    loss: Optional[Tensor]
    pixel_count: int
    final_states: np.ndarray
    mean_gate: Optional[float]


def _build_environment(images: np.ndarray, params: UpdateRuleParams,
                       cfg: ArchConfig) -> Environment:
    pixels = Tensor(images)
    if cfg.resolution_factor == 1:
        return Environment(pixels=pixels)
    return Environment(pixels=pixels, encoded=M.encode_env(pixels, params))


def unroll_loss(states: np.ndarray, images: np.ndarray, labels_onehot: np.ndarray,
                image_ages: np.ndarray, k: int, params: UpdateRuleParams,
                cfg: ArchConfig, schedule: UnrollSchedule,
                streams: StreamSet) -> UnrollResult:
    """K automaton steps with the age-gated per-step loss.

    Incoming states are constants; the total is the mean over contributing
    (entry, step) pairs, i.e. pixel-weighted across steps.
    """
    env = _build_environment(images, params, cfg)
    grid = CellGrid(Tensor(states))
    labels_t = Tensor(labels_onehot)
    t0 = schedule.t0
    terms: list[tuple[Tensor, int]] = []
    gates: list[float] = []
    for i in range(1, k + 1):
        grid, diag = M.step(grid, env, params, cfg, streams.mask, streams.noise,
                            step_index=i)
        if diag.mean_gate is not None:
            gates.append(float(diag.mean_gate.mean()))
        gate_mask = (image_ages + i) >= t0
        if not gate_mask.any():
            continue
        logits = M.predict_logits(grid, params, cfg)
        loss_i, n_i = ops.softmax_xent(logits, labels_t, gate_mask.astype(np.float64))
        if n_i:
            terms.append((loss_i, n_i))

    total_pixels = sum(n for _, n in terms)
    loss = None
    if terms:
        loss = ops.scale(terms[0][0], terms[0][1] / total_pixels)
        for l_i, n_i in terms[1:]:
            loss = ops.add(loss, ops.scale(l_i, n_i / total_pixels))
    mean_gate = float(np.mean(gates)) if gates else None
    return UnrollResult(loss, total_pixels, grid.state.data, mean_gate)


@dataclass
class StepMetrics:
    step: int
    loss: Optional[float]
    mean_gate: Optional[float]
    lr: float
    wall_time: float
    event: str = ""


class Trainer:
    """One optimizer-step-at-a-time training loop with metrics and checkpoints."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset,
                 params: Optional[UpdateRuleParams] = None):
        cfg.validate()
        self.cfg = cfg
        self.dataset = dataset
        self.streams = StreamSet(cfg.seed)
        self.params = params if params is not None else M.init_params(
            cfg.arch, self.streams.init)
        self.adam = Adam(self.params.trainable(), lr=cfg.lr)
        self.history: list[StepMetrics] = []
        self.events: list[str] = []
        self.step_index = 0

        res = dataset[0].image.shape[0]
        self.state_hw = (res // cfg.arch.resolution_factor,
                         res // cfg.arch.resolution_factor)
        state_shape = (*self.state_hw, cfg.arch.cell_size)
        self.pool: Optional[SamplePool] = None
        if cfg.schedule.mode == "mini_unroll":
            self.pool = SamplePool(dataset, cfg.effective_pool_size, state_shape,
                                   self.streams, cfg.arch.num_classes)
        sched = cfg.schedule
        self.rho_image = per_unroll_reset_prob(
            sched.image_reset_frac, sched.mini_steps, sched.target_steps)
        self.rho_state = per_unroll_reset_prob(
            sched.state_reset_frac, sched.mini_steps, sched.target_steps)

    # -- single optimizer steps ------------------------------------------

    def _batch_indices(self) -> np.ndarray:
        assert self.pool is not None
        if self.cfg.batch == len(self.pool):
            return np.arange(len(self.pool))
        return np.sort(self.streams.pool.choice_without_replacement(
            len(self.pool), self.cfg.batch))

    def mini_unroll_step(self) -> StepMetrics:
        assert self.pool is not None, "mini_unroll_step needs the pool mode"
        cfg, sched = self.cfg, self.cfg.schedule
        idx = self._batch_indices()
        entries = [self.pool.entries[i] for i in idx]
        states = np.stack([e.state for e in entries])
        images = np.stack([e.image for e in entries])
        labels = np.stack([e.label_onehot for e in entries])
        ages = np.array([e.image_age for e in entries])

        event = ""
        loss_val: Optional[float] = None
        mean_gate = None
        try:
            result = unroll_loss(states, images, labels, ages, sched.mini_steps,
                                 self.params, cfg.arch, sched, self.streams)
            mean_gate = result.mean_gate
            if result.loss is not None:
                loss_val = result.loss.item()
                if not np.isfinite(loss_val):
                    raise NonFiniteError("non-finite loss")
                backward(result.loss)
                report = self.adam.step()
                self.adam.zero_grad()
                if not report.applied:
                    event = f"update skipped: {report.reason}"
            for e, final in zip(entries, result.final_states):
                e.state = final
                e.image_age += sched.mini_steps
                e.state_age += sched.mini_steps
        except NonFiniteError as err:
            # skip the update and re-randomise the offending entries
            self.adam.zero_grad()
            loss_val = None
            event = f"non-finite unroll, states re-randomised ({err})"
            for e in entries:
                e.state = self.streams.init.normal(e.state.shape)
                e.state_age = 0

        self.pool.resample(self.rho_image, self.rho_state, self.streams)
        return self._record(loss_val, mean_gate, event)

    def full_unroll_step(self) -> StepMetrics:
        cfg, sched = self.cfg, self.cfg.schedule
        images, labels, states = [], [], []
        for _ in range(cfg.batch):
            s = self.dataset.draw(self.streams.data)
            images.append(s.image)
            labels.append(s.label.one_hot(cfg.arch.num_classes))
            states.append(self.streams.init.normal(
                (*self.state_hw, cfg.arch.cell_size)))
        ages = np.zeros(cfg.batch, dtype=int)

        event = ""
        loss_val: Optional[float] = None
        mean_gate = None
        try:
            result = unroll_loss(np.stack(states), np.stack(images), np.stack(labels),
                                 ages, sched.target_steps, self.params, cfg.arch,
                                 sched, self.streams)
            mean_gate = result.mean_gate
            if result.loss is not None:
                loss_val = result.loss.item()
                if not np.isfinite(loss_val):
                    raise NonFiniteError("non-finite loss")
                backward(result.loss)
                report = self.adam.step()
                self.adam.zero_grad()
                if not report.applied:
                    event = f"update skipped: {report.reason}"
        except NonFiniteError as err:
            self.adam.zero_grad()
            loss_val = None
            event = f"non-finite unroll, update skipped ({err})"
        return self._record(loss_val, mean_gate, event)

    def step_once(self) -> StepMetrics:
        if self.cfg.schedule.mode == "mini_unroll":
            return self.mini_unroll_step()
        return self.full_unroll_step()

    def _record(self, loss, mean_gate, event) -> StepMetrics:
        self.step_index += 1
        m = StepMetrics(step=self.step_index, loss=loss, mean_gate=mean_gate,
                        lr=self.cfg.lr, wall_time=time.perf_counter(), event=event)
        self.history.append(m)
        if event:
            self.events.append(f"step {self.step_index}: {event}")
        return m

    # -- full runs ---------------------------------------------------------

    def run(self, progress_every: int = 0) -> UpdateRuleParams:
        out_dir = Path(self.cfg.out_dir) if self.cfg.out_dir else None
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
        t_start = time.perf_counter()
        for i in range(self.cfg.steps):
            m = self.step_once()
            if progress_every and (i + 1) % progress_every == 0:
                loss_s = f"{m.loss:.4f}" if m.loss is not None else "absent"
                gate_s = f" gate={m.mean_gate:.3f}" if m.mean_gate is not None else ""
                print(f"step {m.step}/{self.cfg.steps} loss={loss_s}{gate_s} "
                      f"({time.perf_counter() - t_start:.1f}s)", flush=True)
            if out_dir and self.cfg.checkpoint_every and \
                    m.step % self.cfg.checkpoint_every == 0:
                self.save(out_dir / f"checkpoint_{m.step:06d}.ncaw")
        if out_dir:
            self.save(out_dir / "checkpoint_final.ncaw")
            self.write_metrics(out_dir / "metrics.csv", out_dir / "timings.csv")
            if self.events:
                (out_dir / "events.log").write_text("\n".join(self.events) + "\n")
        return self.params

    def save(self, path) -> None:
        save_checkpoint(self.params, self.cfg.arch,
                        {"step": self.step_index, "seed": self.cfg.seed}, path)

    def write_metrics(self, metrics_path, timings_path=None) -> None:
        """metrics.csv holds the deterministic columns so identical runs are
        byte-identical; wall-clock goes to the sibling timings.csv."""
        with open(metrics_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "mean_gate", "lr"])
            for m in self.history:
                w.writerow([m.step,
                            "" if m.loss is None else repr(m.loss),
                            "" if m.mean_gate is None else repr(m.mean_gate),
                            repr(m.lr)])
        if timings_path is not None:
            with open(timings_path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["step", "wall_time"])
                for m in self.history:
                    w.writerow([m.step, repr(m.wall_time)])
