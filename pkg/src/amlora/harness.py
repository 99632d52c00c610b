"""Sequential-stream training loop, metrics, and CSV report emission.

``run_stream`` trains one method over an ordered task stream, evaluating on
every task seen so far after each stage, and returns a ``MetricsReport``
holding the triangular accuracy matrix plus derived summary numbers. CSV
outputs use fixed column sets so external tooling can diff and plot them:

* metrics.csv    -- method, seed, order_id, after_task, eval_task, accuracy
* summary.csv    -- method, seed, avg_accuracy, mean_forgetting, trainable_params
* trajectory.csv -- per-task accuracy curves keyed the same way, rows grouped
  by eval_task so one task's curve is contiguous.

All files are written atomically (temp file, then rename).
"""

from __future__ import annotations

import csv
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Optimizer
from .baselines import Driver, MethodSpec, make_driver
from .errors import ConfigError, StateError
from .model import Backbone, ModelConfig, build_model
from .tasks import TaskData, TaskStream, generate_task


@dataclass
class TrainConfig:
    epochs: int = 1
    lr: float = 1e-2
    batch_size: int = 8
    optimizer: str = "adam"
    eval_batch: int = 200
    # Base-model pretraining on the stream's pretext task, before any
    # sequential stage; 0 epochs disables it.
    pretrain_epochs: int = 2
    pretrain_lr: float = 1e-3

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0 or self.pretrain_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch_size}")
        if self.pretrain_epochs < 0:
            raise ConfigError(
                f"pretrain_epochs must be >= 0, got {self.pretrain_epochs}")


@dataclass
class MetricsReport:
    method: str
    seed: int
    order_id: str
    acc: list[list[float]] = field(default_factory=list)
    trainable_per_task: list[int] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    config_digest: str = ""
    base_params: int = 0
    adapter_params_per_site: int = 0
    selector_params_per_site: int = 0
    num_sites: int = 0

    def num_tasks(self) -> int:
        return len(self.acc)

    def final_average_accuracy(self) -> float:
        if not self.acc:
            raise StateError("empty report has no final accuracy")
        return float(np.mean(self.acc[-1]))

    def forgetting(self) -> list[float]:
        """Per task: best accuracy ever seen minus accuracy at the end."""
        n = self.num_tasks()
        out = []
        for i in range(n):
            best = max(self.acc[t][i] for t in range(i, n))
            out.append(best - self.acc[-1][i])
        return out

    def mean_forgetting(self) -> float:
        f = self.forgetting()
        return float(np.mean(f)) if f else 0.0


def train_task(model: Backbone, optimizer: Optimizer | None, x: np.ndarray,
               y: np.ndarray, cfg: TrainConfig, rng: np.random.Generator,
               extra_loss_fn=None) -> int:
    """Epochs of shuffled minibatch steps; returns the step count."""
    cfg.validate()
    n = x.shape[0]
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            logits = model.forward(x[idx], mode="train", rng=rng)
            loss = ad.cross_entropy(logits, y[idx])
            if extra_loss_fn is not None:
                extra = extra_loss_fn()
                if extra is not None:
                    loss = loss + extra
            if not np.isfinite(loss.data):
                ad.reset_tape()
                raise StateError(f"non-finite loss at step {step}")
            ad.backward(loss)
            if optimizer is not None:
                optimizer.step()
            step += 1
    return step


def evaluate(model: Backbone, data: TaskData, batch: int = 200) -> float:
    """Argmax accuracy on the eval split, in [0, 1]; ties go to the lowest class."""
    x, y = data.eval_x, data.eval_y
    if x.shape[0] == 0:
        raise StateError("eval split is empty")
    correct = 0
    with ad.no_grad():
        for s in range(0, x.shape[0], batch):
            logits = model.forward(x[s:s + batch], mode="eval")
            pred = np.argmax(logits.data, axis=1)
            correct += int((pred == y[s:s + batch]).sum())
    return correct / x.shape[0]


def _overhead_counts(model: Backbone, report: MetricsReport):
    report.base_params = sum(p.size for _, p in model.base_parameters())
    report.num_sites = len(model.sites)
    for site in model.sites.values():
        if site.stack is not None:
            report.adapter_params_per_site = site.stack.param_count()
        if site.selector is not None:
            report.selector_params_per_site = site.selector.param_count()
        break


def pretrain_base(model_cfg: ModelConfig, model_seed: int, stream: TaskStream,
                  train_cfg: TrainConfig, pretrain_seed: int) -> Backbone:
    """Fresh base model, pretrained on the stream's pretext task and left inert.

    Deterministic in its arguments, so rebuilding yields byte-identical
    weights; every method starts from this same base.
    """
    model = build_model(model_cfg, model_seed)
    if stream.pretrain is not None and train_cfg.pretrain_epochs > 0:
        pdata = generate_task(stream.pretrain)
        model.set_base_trainable(True)
        pcfg = TrainConfig(epochs=train_cfg.pretrain_epochs,
                           lr=train_cfg.pretrain_lr,
                           batch_size=train_cfg.batch_size,
                           optimizer=train_cfg.optimizer,
                           pretrain_epochs=0)
        opt = Optimizer([t for _, t in model.base_parameters()],
                        kind=train_cfg.optimizer, lr=train_cfg.pretrain_lr)
        train_task(model, opt, pdata.train_x, pdata.train_y, pcfg,
                   np.random.default_rng(pretrain_seed))
        model.set_base_trainable(False)
    return model


def run_stream(stream: TaskStream, method: MethodSpec, model_cfg: ModelConfig,
               train_cfg: TrainConfig, seed: int, out_dir: str | None = None,
               checkpoint_path: str | None = None) -> MetricsReport:
    """Train one method over the stream; flush a partial report on abort."""
    model_ss, stage_root = np.random.SeedSequence(seed).spawn(2)
    aux = stage_root.spawn(len(stream) + 2)
    stage_seeds = [int(ss.generate_state(1)[0]) for ss in aux]
    attach_seed, pretrain_seed = stage_seeds[-2], stage_seeds[-1]
    model_seed = int(model_ss.generate_state(1)[0])
    model = pretrain_base(model_cfg, model_seed, stream, train_cfg,
                          pretrain_seed)
    driver = make_driver(method)
    driver.attach(model, attach_seed)

    data = [generate_task(spec) for spec in stream.tasks]
    report = MetricsReport(method=method.name, seed=seed,
                           order_id=stream.order_id)
    union_x = union_y = None
    if driver.union_training:
        union_x = np.concatenate([d.train_x for d in data])
        union_y = np.concatenate([d.train_y for d in data])

    own_acc: list[float] = []  # per-task accuracy of that task's own model
    try:
        for stage, tdata in enumerate(data):
            rng = np.random.default_rng(stage_seeds[stage])
            if driver.fresh_model_per_stage and stage > 0:
                model = pretrain_base(model_cfg, model_seed, stream,
                                      train_cfg, pretrain_seed)
                driver.attach(model, attach_seed)
            params = driver.start_stage(model, stage, stage_seeds[stage])
            opt = Optimizer(params, kind=train_cfg.optimizer,
                            lr=train_cfg.lr) if params else None
            if driver.union_training:
                tx, ty = union_x, union_y
            else:
                tx, ty = tdata.train_x, tdata.train_y
            t0 = time.perf_counter()
            train_task(model, opt, tx, ty, train_cfg, rng,
                       extra_loss_fn=lambda: driver.extra_loss(model))
            wall = time.perf_counter() - t0
            driver.end_stage(model, stage)

            if driver.fresh_model_per_stage:
                own_acc.append(evaluate(model, tdata, train_cfg.eval_batch))
                row = list(own_acc)
            else:
                row = [evaluate(model, data[i], train_cfg.eval_batch)
                       for i in range(stage + 1)]
            report.acc.append(row)
            report.trainable_per_task.append(sum(p.size for p in params))
            report.wall_clock.append(wall)
    except Exception:
        if out_dir is not None and report.acc:
            emit_report([report], out_dir)
        raise
    _overhead_counts(model, report)
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint
        save_checkpoint(model, checkpoint_path)
    if out_dir is not None:
        emit_report([report], out_dir)
    return report


def _atomic_write_rows(path: str, header: list[str], rows: list[list]):
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_report(reports: list[MetricsReport], out_dir: str):
    """Write metrics.csv, summary.csv, and trajectory.csv for a batch of runs."""
    os.makedirs(out_dir, exist_ok=True)
    metrics_rows = []
    summary_rows = []
    traj_rows = []
    for r in reports:
        n = r.num_tasks()
        for t in range(n):
            if len(r.acc[t]) != t + 1:
                raise StateError(
                    f"accuracy matrix is not triangular at row {t}")
            for i in range(t + 1):
                metrics_rows.append([r.method, r.seed, r.order_id, t, i,
                                     repr(float(r.acc[t][i]))])
        trainable = r.trainable_per_task[-1] if r.trainable_per_task else 0
        summary_rows.append([r.method, r.seed,
                             repr(r.final_average_accuracy()),
                             repr(r.mean_forgetting()), trainable])
        for i in range(n):
            for t in range(i, n):
                traj_rows.append([r.method, r.seed, r.order_id, t, i,
                                  repr(float(r.acc[t][i]))])
    _atomic_write_rows(
        os.path.join(out_dir, "metrics.csv"),
        ["method", "seed", "order_id", "after_task", "eval_task", "accuracy"],
        metrics_rows)
    _atomic_write_rows(
        os.path.join(out_dir, "summary.csv"),
        ["method", "seed", "avg_accuracy", "mean_forgetting", "trainable_params"],
        summary_rows)
    _atomic_write_rows(
        os.path.join(out_dir, "trajectory.csv"),
        ["method", "seed", "order_id", "after_task", "eval_task", "accuracy"],
        traj_rows)
