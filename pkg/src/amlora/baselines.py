"""Training-method drivers for sequential task streams.

Each driver tells the harness what to attach to the model, which parameters
train during a given stage, and what extra loss terms apply. Methods:

* ``seqft``     -- full fine-tuning of all base weights, task after task.
* ``sinlora``   -- one low-rank adapter per site, trained continually and
                   never frozen.
* ``inclora``   -- a new adapter per task; prior adapters freeze and their
                   outputs are summed without any weighting.
* ``amlora``    -- a new adapter per task plus a gating selector that mixes
                   all adapter outputs with input-dependent softmax weights.
* ``pertaskft`` -- an independent fully fine-tuned model per task.
* ``mtl``       -- one model trained on the shuffled union of all tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterStack
from .errors import ConfigError
from .selector import selector_init, sparsity_loss, trainable_set

METHODS = ("seqft", "sinlora", "inclora", "amlora", "pertaskft", "mtl")


@dataclass
class MethodSpec:
    name: str
    rank: int = 8
    alpha: float = 32.0
    variant: str = "AR"
    # scalar, or one value per task stage (last value repeats if short)
    lam: object = 0.0

    def __post_init__(self):
        if self.name not in METHODS:
            raise ConfigError(f"unknown method {self.name!r} "
                              f"(choose from {METHODS})")

    def lam_at(self, stage: int) -> float:
        if isinstance(self.lam, (list, tuple)):
            if not self.lam:
                return 0.0
            return float(self.lam[min(stage, len(self.lam) - 1)])
        return float(self.lam)


def _site_seeds(seed: int, site_names) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(site_names))
    return {name: int(ss.generate_state(1)[0])
            for name, ss in zip(sorted(site_names), children)}


def _attach_stacks(model, spec: MethodSpec):
    model.set_base_trainable(False)
    for site in model.sites.values():
        d_out, d_in = site.w0.data.shape
        site.stack = AdapterStack(d_out, d_in, spec.rank, spec.alpha)


class Driver:
    """Base driver: no adapters, nothing trains."""

    fresh_model_per_stage = False
    union_training = False

    def __init__(self, spec: MethodSpec):
        self.spec = spec

    def attach(self, model, seed: int):
        model.set_rule("base")

    def start_stage(self, model, stage: int, seed: int) -> list:
        return []

    def extra_loss(self, model):
        return None

    def end_stage(self, model, stage: int):
        pass


class SeqFTDriver(Driver):
    def attach(self, model, seed):
        model.set_rule("base")
        model.set_base_trainable(True)

    def start_stage(self, model, stage, seed):
        return [t for _, t in model.base_parameters()]


class PerTaskFTDriver(SeqFTDriver):
    fresh_model_per_stage = True


class MTLDriver(SeqFTDriver):
    union_training = True


class SinLoraDriver(Driver):
    def attach(self, model, seed):
        _attach_stacks(model, self.spec)
        model.set_rule("single")
        seeds = _site_seeds(seed, model.sites)
        for name, site in model.sites.items():
            site.stack.begin_task(seeds[name])
            site.stack.training_active = True

    def start_stage(self, model, stage, seed):
        params = []
        for site in model.sites.values():
            a = site.stack.adapters[1]
            params.extend([a.A, a.B])
        return params


class IncLoraDriver(Driver):
    def attach(self, model, seed):
        _attach_stacks(model, self.spec)
        model.set_rule("sum")

    def start_stage(self, model, stage, seed):
        seeds = _site_seeds(seed, model.sites)
        params = []
        for name, site in model.sites.items():
            site.stack.begin_task(seeds[name])
            site.stack.training_active = True
            a = site.stack.adapters[-1]
            params.extend([a.A, a.B])
        return params

    def end_stage(self, model, stage):
        for site in model.sites.values():
            site.stack.training_active = False


class AmLoraDriver(Driver):
    def attach(self, model, seed):
        _attach_stacks(model, self.spec)
        for site in model.sites.values():
            site.selector = selector_init(
                1, site.w0.data.shape[0], self.spec.variant, 0.0)
        model.set_rule("gated")

    def start_stage(self, model, stage, seed):
        seeds = _site_seeds(seed, model.sites)
        lam = self.spec.lam_at(stage)
        params = []
        for name, site in model.sites.items():
            site.stack.begin_task(seeds[name])
            site.stack.training_active = True
            site.selector.extend_for_task(site.stack, seeds[name] + 1)
            site.selector.lam = lam
            newest = len(site.selector.heads) - 1
            for i, head in enumerate(site.selector.heads):
                head.requires_grad = (self.spec.variant == "AR"
                                      or i == newest)
            params.extend(trainable_set(site.selector, site.stack))
        return params

    def extra_loss(self, model):
        total = None
        for site in model.sites.values():
            if site.selector is None or site.selector.lam == 0.0:
                continue
            term = sparsity_loss(site.selector)
            total = term if total is None else total + term
        return total

    def end_stage(self, model, stage):
        for site in model.sites.values():
            site.stack.training_active = False


_DRIVERS = {
    "seqft": SeqFTDriver,
    "sinlora": SinLoraDriver,
    "inclora": IncLoraDriver,
    "amlora": AmLoraDriver,
    "pertaskft": PerTaskFTDriver,
    "mtl": MTLDriver,
}


def make_driver(spec: MethodSpec) -> Driver:
    return _DRIVERS[spec.name](spec)
