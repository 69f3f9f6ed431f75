"""Imitation-learning loop, checkpoint resume and the ablation matrix."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash, from_dict, to_dict
from .heads import compute_losses
from .model import DrivingModel

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.bin"
LOSS_LOG = "loss_log.jsonl"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: DrivingModel
    checkpoint: Path
    loss_log: Path
    history: list = field(default_factory=list)
    seconds: float = 0.0

    def last(self, key: str, window: int = 1) -> float:
        return float(np.mean([h[key] for h in self.history[-window:]]))


def _schedule(cfg: ExperimentConfig) -> T.LRSchedule:
    s = cfg.train.schedule
    return T.LRSchedule(tuple(s.base_lrs), s.phase_epochs, s.halve_every)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def model_from_checkpoint(ckpt: Checkpoint | str | Path) -> tuple:
    """``(DrivingModel, ExperimentConfig)`` rebuilt from a checkpoint."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    cfg = from_dict(ckpt.config)
    model = DrivingModel(cfg.model, seed=cfg.train.seed)
    model.load_state_dict(ckpt.params)
    return model, cfg


def _snapshot(model, adam, cfg, epoch, batch, step) -> Checkpoint:
    return Checkpoint(
        params={k: p.data for k, p in model.params.items()}, config=to_dict(cfg), config_hash=config_hash(cfg),
        epoch=epoch, step=step, adam_m=dict(adam.m), adam_v=dict(adam.v), adam_step=adam.step,
        rng={"seed": cfg.train.seed, "epoch": epoch, "batch": batch})


def train_step(model: DrivingModel, inputs: dict, labels: dict, adam: T.AdamState, lr: float, cfg: ExperimentConfig,
               estimator_weight: float | None = None) -> dict:
    with T.Tape() as tape:
        out = model(inputs)
        losses = compute_losses(out, labels, cfg.train.weights, estimator_weight=estimator_weight)
    T.zero_grads(model.params)
    T.backward(tape, losses.total)
    T.adam_step(model.params, T.collect_grads(model.params), adam, lr=lr)
    bad = T.parameters_finite(model.params)
    if bad is not None:
        raise TrainingDiverged(f"parameter {bad} became non-finite")
    return losses.scalars()


def train(cfg: ExperimentConfig, dataset, out_dir, resume: bool | str | Path = False, progress=None) -> TrainResult:
    """Train on ``dataset`` (anything with ``__len__`` and ``batch(indices)``), writing to ``out_dir``.

    ``resume=True`` continues from ``out_dir/checkpoint.bin``; a path resumes
    from that file.  The loss log is truncated to the checkpoint's step first,
    so a resumed run reproduces the uninterrupted log line for line.
    """
    cfg = cfg.validate()
    tc = cfg.train
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / CHECKPOINT
    log_path = out / LOSS_LOG
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    sched = _schedule(cfg)

    model = DrivingModel(cfg.model, seed=tc.seed)
    adam = T.AdamState(lr=sched.base_lrs[0], weight_decay=tc.weight_decay)
    epoch, batch0, step = 0, 0, 0
    history = []
    if resume:
        src = ckpt_path if resume is True else Path(resume)
        ck = load_checkpoint(src)
        if ck.config_hash != config_hash(cfg):
            raise CheckpointError(f"{src}: config hash {ck.config_hash} does not match {config_hash(cfg)}")
        model.load_state_dict(ck.params)
        adam.m = {k: v.copy() for k, v in ck.adam_m.items()}
        adam.v = {k: v.copy() for k, v in ck.adam_v.items()}
        adam.step = ck.adam_step
        epoch, batch0, step = ck.rng["epoch"], ck.rng["batch"], ck.step
        kept = []
        if log_path.exists():
            with open(log_path) as f:
                kept = [line for line in f if line.strip()][:step]
        log_path.write_text("".join(kept))
        history = [json.loads(line) for line in kept]
    else:
        log_path.write_text("")

    t0 = time.perf_counter()
    n_batches = (n + tc.batch_size - 1) // tc.batch_size
    done = False
    with open(log_path, "a") as logf:
        while epoch < tc.epochs and not done:
            lr = T.lr_at(epoch, sched)
            order = epoch_order(tc.seed, epoch, n)
            for bi in range(batch0, n_batches):
                idx = order[bi * tc.batch_size:(bi + 1) * tc.batch_size]
                inputs, labels = dataset.batch(idx)
                est_w = 0.0 if step < tc.estimator_delay else None
                try:
                    scalars = train_step(model, inputs, labels, adam, lr, cfg, est_w)
                except T.NonFiniteError as e:
                    raise TrainingDiverged(f"step {step}: first non-finite tensor from op {e.op}"
                                           + (f" ({e.name})" if e.name else "")) from e
                step += 1
                rec = {"step": step, "epoch": epoch, "lr": lr, **scalars}
                logf.write(json.dumps(rec) + "\n")
                history.append(rec)
                if progress is not None:
                    progress(rec)
                if tc.max_steps and step >= tc.max_steps:
                    done = True
                    batch0 = bi + 1
                    break
            if not done:
                epoch, batch0 = epoch + 1, 0
                if epoch % tc.checkpoint_every == 0 or epoch == tc.epochs:
                    logf.flush()
                    save_checkpoint(_snapshot(model, adam, cfg, epoch, 0, step), ckpt_path)
            elif batch0 >= n_batches:
                epoch, batch0 = epoch + 1, 0
            log.info("epoch %d step %d loss %.4f", epoch, step, history[-1]["total"] if history else float("nan"))
    save_checkpoint(_snapshot(model, adam, cfg, epoch, batch0, step), ckpt_path)
    return TrainResult(model, ckpt_path, log_path, history, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# ablations

AXES = {
    "depth": ("model", "decoder_depth", (1, 4, 8, 12)),
    "learnable_vector": ("model", "readout", ("learnable_vector", "mean_pool")),
    "fusion": ("model", "fusion", (True, False)),
    "control": ("control", "mode", ("static_tcp", "dynamic")),
}


def ablation_variants(base: ExperimentConfig, axes: list) -> list:
    """One variant per value of each axis, others held at the base config: ``[(label, cfg)]``."""
    unknown = [a for a in axes if a not in AXES]
    if unknown:
        raise ValueError(f"unsupported ablation axis {unknown}; choose from {sorted(AXES)}")
    out = []
    for axis in axes:
        section, key, values = AXES[axis]
        for v in values:
            sub = dataclasses.replace(getattr(base, section), **{key: v})
            out.append((f"{axis}={v}", dataclasses.replace(base, **{section: sub}).validate()))
    return out


@dataclass
class AblationRow:
    label: str
    params: int
    ds: float
    rc: float
    final_loss: float
    report: object = None


def ablation_matrix(base: ExperimentConfig, axes: list, dataset, routes: list, out_dir, seed: int = 0) -> list:
    """Train and evaluate each variant with the same data, seed and routes.

    Variants that differ only in the control-mixing mode share one trained
    model, since mixing acts at inference time.
    """
    from .agent import ModelPolicy
    from .sim.evaluate import evaluate

    out = Path(out_dir)
    rows = []
    trained = {}
    for label, cfg in ablation_variants(base, axes):
        key = config_hash(dataclasses.replace(cfg, control=base.control))
        if key not in trained:
            res = train(cfg, dataset, out / label.replace("=", "_"))
            trained[key] = res
        res = trained[key]
        report = evaluate(ModelPolicy(res.model, cfg.control, cfg.sim.dt), routes, cfg.sim, seed=seed)
        rows.append(AblationRow(label, res.model.n_params(), report.mean_ds, report.mean_rc,
                                res.history[-1]["total"] if res.history else float("nan"), report))
    return rows


def ablation_table(rows: list) -> str:
    w = max([len(r.label) for r in rows] + [8])
    lines = [f"{'variant':<{w}s} {'params':>10s} {'DS':>7s} {'RC':>7s} {'loss':>8s}"]
    lines += [f"{r.label:<{w}s} {r.params:>10,d} {r.ds:7.2f} {r.rc:7.2f} {r.final_loss:8.4f}" for r in rows]
    return "\n".join(lines)
