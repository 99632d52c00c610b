"""Task-specific low-rank adapter pairs and their per-task lifecycle.

Each adapter holds a pair (B: d_out x r, A: r x d_in) whose effective update
is (alpha/r) * B @ A. A stack keeps one adapter per task behind a structural
zero adapter at index 0; only the newest adapter is ever trainable.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, StateError

DEFAULT_RANK = 8
DEFAULT_ALPHA = 32.0


class LoraAdapter:
    """One task's low-rank pair. ``is_zero`` marks the structural zero adapter."""

    def __init__(self, A: Tensor | None, B: Tensor | None, rank: int,
                 alpha: float, task_id: int, is_zero: bool = False,
                 d_out: int | None = None):
        self.A = A
        self.B = B
        self.rank = rank
        self.alpha = float(alpha)
        self.task_id = task_id
        self.is_zero = is_zero
        self.d_out = d_out if d_out is not None else (
            B.data.shape[0] if B is not None else None)

    @property
    def frozen(self) -> bool:
        if self.is_zero:
            return True
        return not self.A.requires_grad

    def freeze(self):
        if self.is_zero:
            return
        self.A.requires_grad = False
        self.B.requires_grad = False
        self.A.grad = None
        self.B.grad = None

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def param_count(self) -> int:
        if self.is_zero:
            return 0
        return self.A.size + self.B.size

    def materialized(self) -> np.ndarray:
        """Dense (alpha/r) * B @ A; for export and oracle tests, not the hot path."""
        if self.is_zero:
            raise StateError("zero adapter has no materialized update")
        return self.scale * (self.B.data @ self.A.data)


def new_adapter(d_out: int, d_in: int, rank: int = DEFAULT_RANK,
                alpha: float = DEFAULT_ALPHA, task_id: int = 0,
                seed: int = 0) -> LoraAdapter:
    """A ~ Gaussian(0, 0.02), B = 0, so the update starts exactly at zero."""
    if rank < 1:
        raise ConfigError("adapter rank must be >= 1")
    if rank > min(d_in, d_out) // 2:
        raise ConfigError(
            f"rank {rank} too large for {d_out}x{d_in} (must be <= min/2)")
    rng = np.random.default_rng(seed)
    A = Tensor(rng.normal(0.0, 0.02, size=(rank, d_in)), requires_grad=True)
    B = Tensor(np.zeros((d_out, rank)), requires_grad=True)
    return LoraAdapter(A, B, rank, alpha, task_id, d_out=d_out)


def adapter_apply(adapter: LoraAdapter, x: Tensor) -> Tensor:
    """Low-rank-first forward: (alpha/r) * ((x A^T) B^T), rows = examples."""
    if adapter.is_zero:
        return Tensor(np.zeros(x.data.shape[:-1] + (adapter.d_out,)))
    if x.data.shape[-1] != adapter.A.data.shape[1]:
        raise DimensionError(
            f"adapter input dim {x.data.shape[-1]} != d_in {adapter.A.data.shape[1]}")
    low = ad.matmul(x, ad.transpose(adapter.A, (1, 0)))
    out = ad.matmul(low, ad.transpose(adapter.B, (1, 0)))
    return ad.mul(out, adapter.scale)


class AdapterStack:
    """Ordered adapters [zero, task_1, ..., task_n] for one adapted site."""

    def __init__(self, d_out: int, d_in: int, rank: int = DEFAULT_RANK,
                 alpha: float = DEFAULT_ALPHA):
        self.d_out = d_out
        self.d_in = d_in
        self.rank = rank
        self.alpha = float(alpha)
        self.adapters: list[LoraAdapter] = [
            LoraAdapter(None, None, rank, alpha, task_id=0, is_zero=True,
                        d_out=d_out)]
        self.current_task = 0
        self.training_active = False

    def __len__(self) -> int:
        return len(self.adapters)

    @property
    def task_adapters(self) -> list[LoraAdapter]:
        return self.adapters[1:]

    def begin_task(self, seed: int) -> LoraAdapter:
        """Freeze all previous adapters and append a fresh trainable one."""
        if self.training_active:
            raise StateError("begin_task called while a task is mid-training")
        for a in self.task_adapters:
            a.freeze()
        self.current_task += 1
        adapter = new_adapter(self.d_out, self.d_in, self.rank, self.alpha,
                              task_id=self.current_task, seed=seed)
        self.adapters.append(adapter)
        return adapter

    def outputs(self, x: Tensor) -> list[Tensor]:
        """Per-adapter contributions [0, dw_1 x, ..., dw_n x]."""
        return [adapter_apply(a, x) for a in self.adapters]

    def param_count(self) -> int:
        return sum(a.param_count() for a in self.task_adapters)


def merged_weight(stack: AdapterStack, w0: Tensor) -> np.ndarray:
    """W0 + sum of materialized updates (the merged view of incremental LoRA)."""
    if w0.data.shape != (stack.d_out, stack.d_in):
        raise DimensionError(
            f"base weight {w0.data.shape} does not match stack "
            f"({stack.d_out}, {stack.d_in})")
    w = w0.data.copy()
    for a in stack.task_adapters:
        w += a.materialized()
    return w
