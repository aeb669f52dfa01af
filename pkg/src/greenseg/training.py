"""Training protocol: early stopping, plateau decay, LR range test and the
end-to-end ``train`` driver that produces a JSONL run log."""
from __future__ import annotations

import contextlib
import copy
import dataclasses
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig
from .data.augment import augment as augment_sample
from .data.loader import DecodingDataset, LoaderConfig, make_loader
from .data.phantoms import generate_phantoms
from .data.preprocess import load_directory, split_by_patient
from .data.types import stack_batch
from .energy import EnergyError, EnergySession, efficiency
from .graph import backward, forward
from .losses import batch_overlap
from .models import Model, build_model, param_count
from .ops import BN_MOMENTUM
from .optim import DEFAULTS, OptimizerKind, SwaState, make_optimizer, swa_params, swa_update
from .parallel import Compressor, RankGroup, ddp_train_step, shard_batch
from .tensor import Precision

log = logging.getLogger(__name__)

LR_FIND_START = 1e-6
LR_FIND_END = 1.0
LR_FIND_BETA = 0.98
LR_FIND_SKIP = 10  # warm-up steps where the smoothed loss is still settling


# -- protocol pieces -------------------------------------------------------

def early_stop_check(history, patience: int) -> bool:
    """True once ``patience`` epochs have passed since the best (lowest) loss."""
    if not len(history):
        raise ValueError("validation history is empty")
    best = int(np.argmin(np.asarray(history, dtype=np.float64)))
    return (len(history) - 1 - best) >= patience


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.1
    patience: int = 5
    min_lr: float = 1e-6
    best: float = math.inf
    bad_epochs: int = 0


def lr_plateau_step(state: PlateauState, val_loss: float) -> float:
    """Divide the lr by ``1/factor`` after ``patience`` non-improving epochs."""
    if state.lr <= 0:
        raise ValueError("lr must be positive")
    if val_loss < state.best:
        state.best = float(val_loss)
        state.bad_epochs = 0
        return state.lr
    state.bad_epochs += 1
    if state.bad_epochs >= state.patience:
        state.lr = max(state.lr / (1.0 / state.factor), state.min_lr)
        state.bad_epochs = 0
    return state.lr


# -- lr range test ---------------------------------------------------------

@dataclass
class LrSweep:
    lrs: np.ndarray
    losses: np.ndarray
    smoothed: np.ndarray
    suggestion: float


def sweep_lrs(max_steps: int, start: float = LR_FIND_START, end: float = LR_FIND_END) -> np.ndarray:
    if max_steps == 1:
        return np.array([start])
    return start * (end / start) ** (np.arange(max_steps) / (max_steps - 1))


def lr_sweep(step_fn, max_steps: int = 100, start: float = LR_FIND_START, end: float = LR_FIND_END,
             beta: float = LR_FIND_BETA) -> LrSweep:
    """Generic range test: ``step_fn(lr) -> loss`` takes one training step.

    The suggestion is the lr where the bias-corrected EMA of the loss falls
    fastest (per unit log-lr), divided by 10.  The first ``LR_FIND_SKIP``
    steps are ignored when the sweep is long enough.  The sweep stops once
    the smoothed loss exceeds 4x its best value.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    lrs = sweep_lrs(max_steps, start, end)
    if max_steps == 1:
        warnings.warn("lr_find with a single step cannot locate a descent; returning the sweep start",
                      stacklevel=2)
        loss = float(step_fn(lrs[0]))
        return LrSweep(lrs, np.array([loss]), np.array([loss]), float(start))
    losses, smooth = [], []
    avg, best = 0.0, math.inf
    for i, lr in enumerate(lrs):
        loss = float(step_fn(float(lr)))
        losses.append(loss)
        if not math.isfinite(loss):
            smooth.append(math.nan)
            if any(math.isfinite(x) for x in losses):
                break
            continue
        avg = beta * avg + (1 - beta) * loss
        s = avg / (1 - beta ** (len([x for x in losses if math.isfinite(x)])))
        smooth.append(s)
        best = min(best, s)
        if s > 4 * best:
            break
    losses, smooth = np.array(losses), np.array(smooth)
    ok = np.isfinite(smooth)
    if not ok.any():
        raise FloatingPointError("lr_find: every loss was NaN/inf; set the learning rate manually")
    used = lrs[:len(smooth)]
    idx = np.flatnonzero(ok)
    if len(idx) < 2:
        return LrSweep(used, losses, smooth, float(used[idx[0]]) / 10)
    slope = np.gradient(smooth[idx], np.log(used[idx]))
    eligible = idx >= LR_FIND_SKIP
    if eligible.sum() < 2:
        eligible[:] = True
    steepest = idx[eligible][int(np.argmin(slope[eligible]))]
    return LrSweep(used, losses, smooth, float(used[steepest]) / 10)


def _cycle(data):
    while True:
        empty = True
        for b in data:
            empty = False
            yield b
        if empty:
            raise ValueError("lr_find needs at least one batch")


def lr_find(model: Model, data, max_steps: int = 100, loss: str = "dice", optimizer="adam",
            precision=Precision.F32, return_sweep: bool = False, **opt_kwargs):
    """Range test on a throwaway copy of ``model``.

    ``data`` is an iterable of ``(images, masks)`` batches (cycled when
    shorter than ``max_steps``).  ``optimizer`` is an optimizer kind or a
    callable ``params -> OptimizerState``.
    """
    work = model.copy()
    graph = work.training_graph(loss)
    if callable(optimizer):
        opt = optimizer(work.params)
    else:
        opt = make_optimizer(optimizer, work.params, **opt_kwargs)
    batches = _cycle(data)

    def step(lr):
        images, masks = next(batches)
        opt.lr = lr
        tr = forward(graph, {work.input_name: images, "mask": masks}, work.params, work.buffers,
                     training=True, precision=precision)
        value = float(tr.values["loss"])
        if not math.isfinite(value):
            return value
        grads = backward(tr, "loss")
        if not all(np.isfinite(g).all() for g in grads.values()):
            return math.nan
        opt.step(work.params, grads)
        return value

    with np.errstate(all="ignore"):
        sw = lr_sweep(step, max_steps)
    return sw if return_sweep else sw.suggestion


# -- run log ---------------------------------------------------------------

VOLATILE_FIELDS = ("epoch_seconds", "epoch_kj", "energy", "efficiency", "wall_seconds", "lr_find_seconds",
                   "step_seconds", "timestamp")


class RunLog:
    """Append-only JSONL records: one ``config`` record, one ``epoch``
    record per epoch, then one ``summary`` record."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record: dict):
        if record.get("type") == "config" and any(r["type"] == "config" for r in self.records):
            raise ValueError("config snapshot already recorded")
        if record.get("type") == "epoch" and self.epochs and record["epoch"] <= self.epochs[-1]["epoch"]:
            raise ValueError("epoch indices must increase")
        rec = json.loads(json.dumps(record))
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")

    @property
    def config(self) -> dict | None:
        return next((copy.deepcopy(r["config"]) for r in self.records if r["type"] == "config"), None)

    @property
    def epochs(self) -> list[dict]:
        return [r for r in self.records if r["type"] == "epoch"]

    @property
    def summary(self) -> dict | None:
        return next((r for r in self.records if r["type"] == "summary"), None)

    @property
    def complete(self) -> bool:
        return self.config is not None and bool(self.epochs) and self.summary is not None

    @classmethod
    def load(cls, path) -> "RunLog":
        rl = cls()
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rl.records.append(json.loads(line))
        rl.path = Path(path)
        return rl

    def stable_view(self) -> list[dict]:
        """Records with wall-time and energy fields removed (for determinism checks)."""
        out = []
        for r in self.records:
            out.append({k: v for k, v in r.items() if k not in VOLATILE_FIELDS})
        return out


# -- data ------------------------------------------------------------------

def load_slices(cfg: RunConfig):
    d = cfg.data
    if d.source == "phantoms":
        return generate_phantoms(d.n, d.side, seed=d.split_seed)
    if d.source == "dataset":
        return checkpoint.load_dataset(d.path)
    if d.source == "directory":
        return load_directory(d.path, time_policy=d.time_policy, drop_empty=d.drop_empty)[0]
    return load_directory(None, manifest=d.path, time_policy=d.time_policy, drop_empty=d.drop_empty)[0]


def evaluate(model: Model, pairs, loss: str = "dice", batch_size: int = 64, params=None,
             precision=Precision.F32) -> dict:
    """Mean loss plus pooled Dice/IoU over ``pairs`` (eval-mode BN)."""
    if not pairs:
        raise ValueError("nothing to evaluate")
    graph = model.training_graph(loss)
    params = model.params if params is None else params
    tp = fp = fn = 0.0
    total, count = 0.0, 0
    per_dice = []
    for i in range(0, len(pairs), batch_size):
        images, masks = stack_batch(pairs[i:i + batch_size])
        tr = forward(graph, {model.input_name: images, "mask": masks}, params, model.buffers,
                     training=False, precision=precision)
        total += float(tr.values["loss"]) * len(images)
        count += len(images)
        pb = tr.values[model.output_name] > 0.5
        mb = masks > 0.5
        tp += float(np.sum(pb & mb))
        fp += float(np.sum(pb & ~mb))
        fn += float(np.sum(~pb & mb))
        per_dice.extend(batch_overlap(tr.values[model.output_name], masks)[0])
    denom = 2 * tp + fp + fn
    dice = 1.0 if denom == 0 else 2 * tp / denom
    iou = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    return {"loss": total / count, "dice": dice, "iou": iou, "mean_slice_dice": float(np.mean(per_dice))}


def recompute_bn(model: Model, pairs, batch_size: int = 16, precision=Precision.F32):
    """Refresh BN running statistics with a cumulative average over ``pairs``."""
    if not model.buffers:
        return
    sums = {k: np.zeros_like(v, dtype=np.float64) for k, v in model.buffers.items()}
    n = 0
    for i in range(0, len(pairs), batch_size):
        images, _ = stack_batch(pairs[i:i + batch_size])
        bufs = {k: (np.zeros_like(v) if k.endswith(".mean") else np.ones_like(v)) for k, v in model.buffers.items()}
        # one update from (0, 1): running = (1-m)*init + m*batch, inverted to recover the batch statistic
        forward(model.graph, {model.input_name: images}, model.params, bufs, training=True,
                precision=precision)
        for k, v in bufs.items():
            init = 0.0 if k.endswith(".mean") else 1.0
            sums[k] += (v.astype(np.float64) - (1 - BN_MOMENTUM) * init) / BN_MOMENTUM
        n += 1
    for k in model.buffers:
        model.buffers[k] = (sums[k] / n).astype(np.float32)


# -- driver ----------------------------------------------------------------

def _optimizer_factory(cfg: RunConfig, lr: float):
    o = cfg.optimizer
    betas = None
    if o.beta1 is not None or o.beta2 is not None:
        d1, d2 = DEFAULTS[OptimizerKind(o.kind)]["betas"]
        betas = (o.beta1 if o.beta1 is not None else d1, o.beta2 if o.beta2 is not None else d2)

    def factory(params):
        return make_optimizer(o.kind, params, lr=lr, betas=betas, eps=o.eps, weight_decay=o.weight_decay,
                              amsgrad=o.amsgrad)
    return factory


def _energy_session(cfg: RunConfig) -> EnergySession:
    e = cfg.energy
    watts = {"CPU": e.cpu_watts, "GPU": e.gpu_watts, "RAM": e.ram_watts}
    return EnergySession(e.mode, watts, e.interval_ms)


def train(cfg: RunConfig, log_path=None, progress=None) -> RunLog:
    """Run the full protocol described by ``cfg`` and return its RunLog.

    ``progress(record)`` (optional) is called after each epoch record.
    """
    cfg.validate()
    t = cfg.training
    out_dir = Path(cfg.output.dir) if cfg.output.dir else None
    if log_path is None and out_dir is not None:
        log_path = out_dir / f"{cfg.output.run_name or cfg.model.family.value}.jsonl"
    runlog = RunLog(log_path)
    runlog.append({"type": "config", "config": cfg.to_dict()})
    precision = Precision(t.precision)

    slices = load_slices(cfg)
    train_set, val_set, test_set = split_by_patient(slices, seed=cfg.data.split_seed)
    if not train_set or not val_set or not test_set:
        raise ValueError("dataset split left an empty subset")
    model = build_model(cfg.model, seed=t.seed)

    dataset = DecodingDataset(train_set, cfg.data.decode_ms / 1000.0)
    loader = make_loader(dataset, cfg.loader, augment=augment_sample if t.augment else None)

    lr = cfg.optimizer.lr
    lr_found = None
    if t.lr_find:
        t0 = time.perf_counter()
        probe = make_loader(train_set, LoaderConfig(batch_size=cfg.loader.batch_size,
                                                    shuffle_seed=cfg.loader.shuffle_seed))
        lr_found = lr_find(model, probe, t.lr_find_max_steps, loss=t.loss,
                           optimizer=_optimizer_factory(cfg, lr), precision=precision)
        lr = float(min(max(lr_found, t.lr_min), 1.0))
        log.info("lr_find suggested %.3g (%.1fs)", lr_found, time.perf_counter() - t0)

    group = RankGroup(model, cfg.parallel.world_size, _optimizer_factory(cfg, lr), loss=t.loss,
                      precision=precision, powersgd_seed=t.seed,
                      bucket_cap_bytes=int(cfg.parallel.bucket_cap_mb * 2 ** 20) or None,
                      find_unused_parameters=cfg.parallel.find_unused_parameters)
    compressor = Compressor.parse(cfg.parallel.compressor)
    plateau = PlateauState(lr, t.lr_plateau_factor, t.lr_plateau_patience, t.lr_min)
    swa = SwaState(swa_start_epoch=t.swa_start_epoch) if t.swa else None

    history: list[float] = []
    best = {"loss": math.inf, "epoch": -1, "params": None, "buffers": None}
    stop_reason = "max_epochs"
    session = _energy_session(cfg)
    wall0 = time.perf_counter()
    session.start()
    try:
        prev_kj = 0.0
        for epoch in range(t.max_epochs):
            e0 = time.perf_counter()
            lr_used = plateau.lr
            losses, raw, sent = [], 0, 0
            for images, masks in loader:
                if len(images) < cfg.parallel.world_size:
                    continue
                m = ddp_train_step(group, shard_batch(images, masks, cfg.parallel.world_size), compressor)
                losses.append(m.loss)
                raw += m.bytes_raw
                sent += m.bytes_sent
            group.sync_to_model()
            val = evaluate(model, val_set, t.loss, t.eval_batch_size, precision=precision)
            history.append(val["loss"])
            if val["loss"] < best["loss"]:
                best.update(loss=val["loss"], epoch=epoch,
                            params={k: v.copy() for k, v in model.params.items()},
                            buffers={k: v.copy() for k, v in model.buffers.items()})
                if out_dir is not None:
                    checkpoint.save_model(out_dir / f"{cfg.output.run_name or cfg.model.family.value}.best.gseg",
                                          model, extra_meta={"epoch": epoch, "val_loss": val["loss"]})
            if swa is not None and epoch >= swa.swa_start_epoch:
                swa_update(swa, model.params, epoch)
            new_lr = lr_plateau_step(plateau, val["loss"])
            group.set_lr(new_lr)
            session.mark_epoch()
            kj = session.snapshot_kj()
            rec = {"type": "epoch", "epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None,
                   "val_loss": val["loss"], "val_dice": val["dice"], "lr": lr_used,
                   "bytes_raw": raw, "bytes_sent": sent,
                   "epoch_seconds": time.perf_counter() - e0, "epoch_kj": kj - prev_kj}
            prev_kj = kj
            runlog.append(rec)
            if progress:
                progress(rec)
            if early_stop_check(history, t.early_stop_patience):
                stop_reason = "early_stop"
                break
    except BaseException:
        with contextlib.suppress(Exception):
            session.stop()
        group.close()
        loader.close()
        raise
    report = session.stop()
    wall = time.perf_counter() - wall0
    group.close()
    loader.close()

    model.params.clear()
    model.params.update(best["params"])
    model.buffers.clear()
    model.buffers.update(best["buffers"])
    used_swa = False
    if swa is not None and swa.n_models:
        model.params.clear()
        model.params.update(swa_params(swa))
        recompute_bn(model, train_set, cfg.loader.batch_size, precision)
        used_swa = True
    test = evaluate(model, test_set, t.loss, t.eval_batch_size, precision=precision)
    try:
        per_kj, per_epoch_kj = efficiency(test["dice"], report)
    except EnergyError as exc:
        log.warning("%s", exc)
        per_kj = per_epoch_kj = None
    if out_dir is not None:
        checkpoint.save_model(out_dir / f"{cfg.output.run_name or cfg.model.family.value}.final.gseg", model,
                              extra_meta={"best_epoch": best["epoch"], "swa": used_swa})
    runlog.append({
        "type": "summary", "model": cfg.output.run_name or cfg.model.family.value,
        "family": cfg.model.family.value, "params": param_count(model),
        "epochs": len(history), "best_epoch": best["epoch"], "best_val_loss": best["loss"],
        "stop_reason": stop_reason, "lr_found": lr_found, "final_lr": plateau.lr, "swa": used_swa,
        "test_dice": test["dice"], "test_iou": test["iou"], "test_loss": test["loss"],
        "split": [len(train_set), len(val_set), len(test_set)],
        "energy": report.to_dict(), "efficiency": {"dice_per_kj": per_kj, "dice_per_epoch_kj": per_epoch_kj},
        "wall_seconds": wall,
    })
    runlog.model = model
    return runlog


def worker_sweep(cfg: RunConfig, workers=(4, 6, 8), log_dir=None) -> list[RunLog]:
    """One run per worker count; each log carries wall-time and energy."""
    logs = []
    for w in workers:
        c = copy.deepcopy(cfg)
        c.loader = dataclasses.replace(c.loader, workers=w)
        c.output.run_name = f"{cfg.output.run_name or cfg.model.family.value}-w{w}"
        path = Path(log_dir) / f"{c.output.run_name}.jsonl" if log_dir else None
        logs.append(train(c, log_path=path))
    return logs


class Finetuner:
    """Short fixed-lr training and evaluation for prune/finetune cycles."""

    def __init__(self, train_set, eval_set, loss: str = "dice", lr: float = 1e-3, batch_size: int = 16,
                 seed: int = 0, precision=Precision.F32):
        self.train_set, self.eval_set = train_set, eval_set
        self.loss, self.lr, self.precision = loss, lr, Precision(precision)
        self.loader = make_loader(train_set, LoaderConfig(batch_size=batch_size, shuffle_seed=seed))

    def evaluate(self, model: Model) -> float:
        return evaluate(model, self.eval_set, self.loss, precision=self.precision)["dice"]

    def finetune(self, model: Model, epochs: int) -> Model:
        group = RankGroup(model, 1, lambda p: make_optimizer("adam", p, lr=self.lr), loss=self.loss,
                          precision=self.precision)
        for _ in range(epochs):
            for images, masks in self.loader:
                ddp_train_step(group, [(images, masks)])
        group.sync_to_model()
        group.close()
        return model
