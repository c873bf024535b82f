"""Training under three execution modes.

``single``  one replica, sequential minibatches.
``dp``      one coordinator; each global batch is split across replica
            threads, gradients are combined onto replica 0, which steps and
            broadcasts its parameters.
``ddp``     ``workers`` peer execution contexts (processes or threads), each
            with a replica rebuilt from the init seed and its own data shard.
            Gradients meet in a rank-ordered all-reduce at the coordinator and
            every worker applies the same Adam step.
"""
from __future__ import annotations

import hashlib
import json
import logging
import multiprocessing as mp
import os
import queue
import shutil
import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import write_checkpoint
from .data import DatasetManifest, make_batches, shard_indices
from .errors import ConfigError, DomainError, ReplicaDivergenceError, TrainingAborted
from .models import Graph, ModelConfig, build_model, check_extent, training_loss
from .optim import (AdamState, LossScalerState, adam_step, autocast_forward,
                    scale_and_backward, unscale_check_update)
from .tensor import Tensor, backward, no_grad, scale

log = logging.getLogger(__name__)

MODES = ("single", "dp", "ddp")
OVERFLOW_FACTOR = 1e6


@dataclass
class TrainConfig:
    arch: str = "unet"
    base_ch: int = 8
    depth: int = 4
    deep_supervision: bool = False
    mode: str = "single"
    workers: int = 1
    amp: bool = False
    epochs: int = 50
    batch_per_worker: int = 16
    lr: float = 1e-3
    init_seed: int = 0
    data_seed: int = 0
    noise_seed: int = 0
    early_stop_patience: int | None = None
    shuffle: bool = True
    freeze_norm: bool = False
    backend: str = "process"
    out_dir: str = "runs"
    # test hooks
    trace_steps: int = 0
    inject_overflow_at: tuple[int, ...] = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.mode == "single" and self.workers != 1:
            raise ConfigError("single mode runs exactly one worker")
        if self.batch_per_worker < 1:
            raise ConfigError("batch_per_worker must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.backend not in ("process", "thread"):
            raise ConfigError(f"backend must be process or thread, got {self.backend!r}")
        self.inject_overflow_at = tuple(self.inject_overflow_at)
        self.model_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.arch, self.base_ch, self.depth,
                           deep_supervision=self.deep_supervision)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    wall_seconds: float
    skipped_steps: int = 0
    improved: bool = False
    patience_counter: int = 0


@dataclass
class TraceStep:
    step: int
    batch: list[int]
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]


@dataclass
class TrainResult:
    graph: Graph
    best_checkpoint: Path
    stats: list[EpochStats]
    trace: list[TraceStep] = field(default_factory=list)

    @property
    def best_val_loss(self) -> float:
        return min(s.val_loss for s in self.stats)


# -- reduction -------------------------------------------------------------------

def all_reduce_mean(buffers: Sequence[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Elementwise mean over workers, summed in rank order.

    Buffers are accumulated in a wider type (float64 for float32 inputs,
    long double for float64) and rounded once, so K equal inputs give back
    the input bit for bit.
    """
    if not buffers:
        raise ConfigError("all_reduce_mean needs at least one worker")
    names = list(buffers[0])
    for rank, buf in enumerate(buffers[1:], 1):
        if list(buf) != names:
            raise ReplicaDivergenceError(f"rank {rank} sent different gradient names")
        for k in names:
            if buf[k].shape != buffers[0][k].shape:
                raise ReplicaDivergenceError(f"rank {rank}: {k} has shape {buf[k].shape}")
    k_workers = len(buffers)
    out = {}
    for k in names:
        ref = buffers[0][k]
        acc = ref.astype(np.float64 if ref.dtype.itemsize < 8 else np.longdouble)
        for buf in buffers[1:]:
            acc += buf[k]
        acc /= k_workers
        out[k] = acc.astype(ref.dtype)
    return out


def param_digest(g: Graph) -> str:
    h = hashlib.sha256()
    for k, p in g.params.items():
        h.update(k.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


# -- shared step pieces ------------------------------------------------------------

def _local_grads(g: Graph, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                 scaler: LossScalerState, overflow: bool = False) -> float:
    mode = "eval" if cfg.freeze_norm else "train"
    outs = autocast_forward(g, Tensor(x), cfg.amp, mode)
    loss = training_loss(outs, Tensor(y))
    value = loss.item()
    if overflow:
        loss = scale(loss, OVERFLOW_FACTOR)
    if cfg.amp:
        scale_and_backward(loss, scaler)
    else:
        backward(loss)
    return value


def _grads_of(g: Graph) -> dict[str, np.ndarray]:
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in g.params.items()}


def _apply(g: Graph, opt: AdamState, scaler: LossScalerState, cfg: TrainConfig) -> bool:
    """Optimizer step; True when the step was skipped for overflow."""
    if cfg.amp:
        return unscale_check_update(g, opt, scaler) == "skipped"
    adam_step(g, opt)
    g.zero_grad()
    return False


def validation_loss(g, noisy: np.ndarray, clean: np.ndarray, batch_size: int = 16) -> float:
    """Mean L1 of the deepest head over all pixels, in fixed batch order."""
    if len(noisy) == 0:
        raise DomainError("validation split is empty")
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(noisy), batch_size):
            x, y = noisy[start:start + batch_size], clean[start:start + batch_size]
            pred = g.forward(Tensor(x), "eval")[-1].data
            total += float(np.abs(pred.astype(np.float64) - y).sum())
            count += y.size
    return total / count


def validate(g, ids: Sequence[str], manifest: DatasetManifest, batch_size: int = 16) -> float:
    if not ids:
        raise DomainError("validation split is empty")
    noisy, clean = manifest.load_pairs(ids)
    return validation_loss(g, noisy, clean, batch_size)


# -- DDP workers ---------------------------------------------------------------------

class QueueChannel:
    """Duplex channel over two queues with the Connection send/recv surface."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._in, self._out = inbox, outbox

    def send(self, obj) -> None:
        self._out.put(obj)

    def recv(self):
        return self._in.get()

    def close(self) -> None:
        pass

    @classmethod
    def pair(cls) -> tuple["QueueChannel", "QueueChannel"]:
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b), cls(b, a)


def _limit_blas(threads: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=threads)


def ddp_worker(rank: int, world: int, cfg: TrainConfig, noisy: np.ndarray,
               clean: np.ndarray, chan, blas_threads: int | None = None) -> None:
    limiter = _limit_blas(blas_threads) if blas_threads else None
    try:
        _ddp_worker_loop(rank, world, cfg, noisy, clean, chan)
    except Exception:
        chan.send(("error", rank, traceback.format_exc()))
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
        chan.close()


def _ddp_worker_loop(rank, world, cfg, noisy, clean, chan):
    g = build_model(cfg.model_config(), cfg.init_seed)
    opt, scaler = AdamState(lr=cfg.lr), LossScalerState()
    chan.send(("ready", rank))
    step = 0
    while True:
        cmd = chan.recv()
        if cmd[0] == "stop":
            return
        epoch = cmd[1]
        shard = shard_indices(len(noisy), world, rank, epoch, cfg.shuffle, cfg.data_seed)
        loss_sum, n_batches, skipped = 0.0, 0, 0
        for batch in make_batches(shard, cfg.batch_per_worker):
            pre = g.state_arrays() if (rank == 0 and step < cfg.trace_steps) else None
            loss = _local_grads(g, noisy[batch], clean[batch], cfg, scaler,
                                overflow=step in cfg.inject_overflow_at)
            chan.send(("grads", rank, loss, _grads_of(g), batch, pre))
            reply = chan.recv()
            if reply[0] == "stop":
                return
            for k, p in g.params.items():
                p.grad = reply[1][k]
            skipped += _apply(g, opt, scaler, cfg)
            loss_sum += loss
            n_batches += 1
            step += 1
        state = None
        if rank == 0:
            state = (g.state_arrays(), {"m": opt.m, "v": opt.v, **opt.hyper()}, scaler.to_dict())
        chan.send(("epoch_end", rank, loss_sum, n_batches, skipped, param_digest(g), state))


class _DDPGroup:
    """Coordinator side of the worker group."""

    def __init__(self, cfg: TrainConfig, noisy: np.ndarray, clean: np.ndarray):
        self.cfg = cfg
        self.world = cfg.workers
        self.chans, self.handles = [], []
        blas = max(1, (os.cpu_count() or 1) // self.world)
        if cfg.backend == "process":
            ctx = mp.get_context("spawn")
            for rank in range(self.world):
                parent, child = ctx.Pipe()
                proc = ctx.Process(target=ddp_worker, daemon=True,
                                   args=(rank, self.world, cfg, noisy, clean, child, blas))
                proc.start()
                child.close()
                self.chans.append(parent)
                self.handles.append(proc)
        else:
            for rank in range(self.world):
                mine, theirs = QueueChannel.pair()
                th = threading.Thread(target=ddp_worker, daemon=True,
                                      args=(rank, self.world, cfg, noisy, clean, theirs))
                th.start()
                self.chans.append(mine)
                self.handles.append(th)
        self.gather("ready")

    def gather(self, expect: str) -> list:
        msgs = []
        for rank, chan in enumerate(self.chans):
            try:
                msg = chan.recv()
            except (EOFError, OSError) as exc:
                self.shutdown()
                raise TrainingAborted(f"worker {rank} died") from exc
            if msg[0] == "error":
                self.shutdown()
                raise TrainingAborted(f"worker {msg[1]} failed:\n{msg[2]}")
            msgs.append(msg)
        kinds = {m[0] for m in msgs}
        if kinds != {expect} and not (expect == "step" and kinds <= {"grads", "epoch_end"}):
            self.shutdown()
            raise ReplicaDivergenceError(f"workers out of step: {sorted(kinds)}")
        if len(kinds) > 1:
            self.shutdown()
            raise ReplicaDivergenceError("workers disagree on the number of steps per epoch")
        return msgs

    def broadcast(self, msg) -> None:
        for chan in self.chans:
            chan.send(msg)

    def shutdown(self) -> None:
        for chan in self.chans:
            try:
                chan.send(("stop",))
            except (OSError, ValueError, BrokenPipeError):
                pass
        for h in self.handles:
            h.join(timeout=10)
            if isinstance(h, mp.process.BaseProcess) and h.is_alive():
                h.terminate()
        for chan in self.chans:
            chan.close()


# -- driver ---------------------------------------------------------------------------

class _Run:
    """Bookkeeping shared by every mode: validation, checkpoints, log, patience."""

    def __init__(self, manifest: DatasetManifest, cfg: TrainConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.log_path = self.out / "train_log.jsonl"
        self.log_path.write_text("")
        sigma = manifest.noise.sigma if manifest.noise else 0.0
        self.noise_label = f"{sigma:g}"
        self.best_val = float("inf")
        self.best_path: Path | None = None
        self.patience = 0
        self.stats: list[EpochStats] = []

    def end_epoch(self, epoch: int, graph: Graph, train_loss: float, val_loss: float,
                  t0: float, skipped: int, opt: AdamState | None, scaler: dict) -> bool:
        improved = val_loss < self.best_val
        if improved:
            self.best_val = val_loss
            self.patience = 0
            cfg = self.cfg
            path = self.out / f"{cfg.arch}_{cfg.mode}_{self.noise_label}_{epoch}.ckpt"
            meta = {"epoch": epoch, "val_loss": val_loss, "mode": cfg.mode,
                    "workers": cfg.workers, "amp": cfg.amp, "noise_sigma": self.noise_label,
                    "scaler": scaler}
            write_checkpoint(path, graph, opt, meta)
            shutil.copyfile(path, self.out / "best.ckpt")
            self.best_path = self.out / "best.ckpt"
        else:
            self.patience += 1
        st = EpochStats(epoch, train_loss, val_loss, max(time.perf_counter() - t0, 1e-9),
                        skipped, improved, self.patience)
        self.stats.append(st)
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(asdict(st)) + "\n")
        log.info("epoch %d train %.5f val %.5f %.2fs skipped %d", epoch, train_loss,
                 val_loss, st.wall_seconds, skipped)
        limit = self.cfg.early_stop_patience
        return limit is not None and self.patience >= limit


def train(manifest: DatasetManifest, cfg: TrainConfig) -> TrainResult:
    manifest.validate(need_noisy=True)
    check_extent(cfg.model_config(), manifest.resize_to, manifest.resize_to)
    noisy, clean = manifest.load_pairs(manifest.split["train"])
    val_noisy, val_clean = manifest.load_pairs(manifest.split["val"])
    if len(noisy) == 0:
        raise DomainError("training split is empty")
    run = _Run(manifest, cfg)
    if cfg.mode == "ddp":
        graph, trace = _train_ddp(cfg, run, noisy, clean, val_noisy, val_clean)
    else:
        graph, trace = _train_local(cfg, run, noisy, clean, val_noisy, val_clean)
    return TrainResult(graph, run.best_path, run.stats, trace)


def _train_local(cfg, run, noisy, clean, val_noisy, val_clean):
    k = cfg.workers if cfg.mode == "dp" else 1
    replicas = [build_model(cfg.model_config(), cfg.init_seed) for _ in range(k)]
    main = replicas[0]
    opt, scaler = AdamState(lr=cfg.lr), LossScalerState()
    pool = ThreadPoolExecutor(max_workers=k) if k > 1 else None
    trace, step = [], 0
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            order = shard_indices(len(noisy), 1, 0, epoch, cfg.shuffle, cfg.data_seed)
            loss_sum, n_batches, skipped = 0.0, 0, 0
            for batch in make_batches(order, k * cfg.batch_per_worker):
                pre = main.state_arrays() if step < cfg.trace_steps else None
                overflow = step in cfg.inject_overflow_at
                if k == 1:
                    loss = _local_grads(main, noisy[batch], clean[batch], cfg, scaler, overflow)
                else:
                    loss = _dp_grads(replicas, pool, batch, noisy, clean, cfg, scaler, overflow)
                if pre is not None:
                    trace.append(TraceStep(step, list(batch), pre,
                                           {n: a.copy() for n, a in _grads_of(main).items()}))
                skipped += _apply(main, opt, scaler, cfg)
                for rep in replicas[1:]:
                    rep.load_arrays(main.state_arrays())
                loss_sum += loss
                n_batches += 1
                step += 1
            val = validation_loss(main, val_noisy, val_clean, cfg.batch_per_worker)
            if run.end_epoch(epoch, main, loss_sum / n_batches, val, t0, skipped, opt,
                             scaler.to_dict()):
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return main, trace


def _dp_grads(replicas, pool, batch, noisy, clean, cfg, scaler, overflow) -> float:
    parts = [p.tolist() for p in np.array_split(np.asarray(batch), len(replicas)) if len(p)]
    active = replicas[:len(parts)]
    losses = list(pool.map(
        lambda rp: _local_grads(rp[0], noisy[rp[1]], clean[rp[1]], cfg, scaler, overflow),
        zip(active, parts)))
    total = sum(len(p) for p in parts)
    # combine onto replica 0, weighting each sub-batch by its share of the global batch
    main = replicas[0]
    for name, p in main.params.items():
        acc = np.zeros(p.shape, dtype=np.float64)
        for rep, part in zip(active, parts):
            g = rep.params[name].grad
            if g is not None:
                acc += g.astype(np.float64) * len(part)
        p.grad = (acc / total).astype(p.data.dtype)
    for rep in active[1:]:
        rep.zero_grad()
    return float(sum(l * len(p) for l, p in zip(losses, parts)) / total)


def _train_ddp(cfg, run, noisy, clean, val_noisy, val_clean):
    coord = build_model(cfg.model_config(), cfg.init_seed)
    group = _DDPGroup(cfg, noisy, clean)
    trace, step = [], 0
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            group.broadcast(("epoch", epoch))
            while True:
                msgs = group.gather("step")
                if msgs[0][0] == "epoch_end":
                    break
                reduced = all_reduce_mean([m[3] for m in msgs])
                group.broadcast(("reduced", reduced))
                if step < cfg.trace_steps:
                    batch = [i for m in msgs for i in m[4]]
                    trace.append(TraceStep(step, batch, msgs[0][5],
                                           {k: a.copy() for k, a in reduced.items()}))
                step += 1
            digests = {m[5] for m in msgs}
            if len(digests) != 1:
                group.shutdown()
                raise ReplicaDivergenceError(f"replica parameters diverged after epoch {epoch}")
            arrays, opt_state, scaler = msgs[0][6]
            coord.load_arrays(arrays)
            opt = AdamState(lr=opt_state["lr"], beta1=opt_state["beta1"], beta2=opt_state["beta2"],
                            eps=opt_state["eps"], step_count=opt_state["step_count"],
                            m=opt_state["m"], v=opt_state["v"])
            n_batches = msgs[0][3]
            train_loss = sum(m[2] for m in msgs) / (n_batches * len(msgs))
            val = validation_loss(coord, val_noisy, val_clean, cfg.batch_per_worker)
            if run.end_epoch(epoch, coord, train_loss, val, t0, msgs[0][4], opt, scaler):
                break
    finally:
        group.shutdown()
    return coord, trace


# -- timing --------------------------------------------------------------------------

@dataclass
class TimingRow:
    name: str
    total_seconds: float
    ts_percent: float

    @property
    def ts_label(self) -> str:
        return f"{self.ts_percent:.2f}%"


@dataclass
class TimingComparison:
    baseline: str
    rows: list[TimingRow]

    def row(self, name: str) -> TimingRow:
        return next(r for r in self.rows if r.name == name)

    def format(self) -> str:
        width = max([len(r.name) for r in self.rows] + [5])
        lines = [f"{'Setup':<{width}}  {'TT (s)':>10}  {'TS (%)':>8}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.total_seconds:>10.1f}  {r.ts_label:>8}")
        return "\n".join(lines)


def time_savings(seconds: float, baseline_seconds: float) -> float:
    """Percentage of the baseline's wall-clock time saved."""
    return 100.0 * (1.0 - seconds / baseline_seconds)


def time_report(runs: Mapping[str, Sequence[EpochStats] | float], baseline: str) -> TimingComparison:
    if baseline not in runs:
        raise ConfigError(f"baseline {baseline!r} not among {list(runs)}")

    def total(v):
        return float(v) if isinstance(v, (int, float)) else sum(s.wall_seconds for s in v)

    base = total(runs[baseline])
    rows = [TimingRow(name, total(v), time_savings(total(v), base)) for name, v in runs.items()]
    return TimingComparison(baseline, rows)
