"""Training loops with simulated multi-host, multi-device data parallelism.

Devices are simulated in-process: each device processes its own
sub-batch, gradients are averaged in ascending device order (so runs
are bitwise reproducible), one optimizer update is applied, and metric
tables are summed componentwise before normalization.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import rng as R
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config
from .data import ShardSpec, build_dataset
from .metric_io import MetricWriter
from .models import ModelContract, get_model_cls
from .tensor import Tensor, value_and_grad


class TrainError(Exception):
    pass


@dataclass(frozen=True)
class Topology:
    host_count: int = 1
    devices_per_host: int = 1

    def __post_init__(self):
        if self.host_count < 1 or self.devices_per_host < 1:
            raise TrainError("topology extents must be >= 1")

    @property
    def total_devices(self) -> int:
        return self.host_count * self.devices_per_host


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"  # sgd | sgd_momentum | adam
    lr: float | Callable = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None

    def lr_at(self, step: int) -> float:
        lr = self.lr(step) if callable(self.lr) else self.lr
        if lr < 0:
            raise TrainError(f"negative learning rate {lr} at step {step}")
        return lr


def cosine_decay(base_lr: float, total_steps: int) -> Callable:
    def schedule(step: int) -> float:
        frac = min(step / max(total_steps, 1), 1.0)
        return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))
    return schedule


@dataclass(frozen=True)
class TrainState:
    step: int
    params: dict
    model_state: dict
    opt_state: dict
    rng: R.RngKey


def _init_opt_state(params: dict, opt: OptimizerSpec) -> dict:
    slots = {}
    if opt.kind == "sgd":
        return slots
    if opt.kind == "sgd_momentum":
        for name, p in params.items():
            slots[f"{name}/m"] = Tensor(np.zeros_like(p.data))
        return slots
    if opt.kind == "adam":
        for name, p in params.items():
            slots[f"{name}/m"] = Tensor(np.zeros_like(p.data))
            slots[f"{name}/v"] = Tensor(np.zeros_like(p.data))
        return slots
    raise TrainError(f"unknown optimizer kind {opt.kind!r}")


def _apply_update(params: dict, grads: dict, opt_state: dict,
                  opt: OptimizerSpec, step: int):
    lr = opt.lr_at(step)
    g = {k: v.data.astype(np.float64) for k, v in grads.items()}
    if opt.grad_clip is not None:
        norm = np.sqrt(sum(float((x * x).sum()) for x in g.values()))
        if norm > opt.grad_clip:
            g = {k: v * (opt.grad_clip / norm) for k, v in g.items()}
    new_params, new_slots = {}, dict(opt_state)
    for name in params:
        p = params[name].data
        gi = g[name]
        if opt.kind == "sgd":
            upd = lr * gi
        elif opt.kind == "sgd_momentum":
            m = opt.momentum * opt_state[f"{name}/m"].data + gi
            new_slots[f"{name}/m"] = Tensor(m.astype(p.dtype))
            upd = lr * m
        else:  # adam
            t = step + 1
            m = opt.beta1 * opt_state[f"{name}/m"].data + (1 - opt.beta1) * gi
            v = opt.beta2 * opt_state[f"{name}/v"].data + (1 - opt.beta2) * gi * gi
            new_slots[f"{name}/m"] = Tensor(m.astype(p.dtype))
            new_slots[f"{name}/v"] = Tensor(v.astype(p.dtype))
            mhat = m / (1 - opt.beta1 ** t)
            vhat = v / (1 - opt.beta2 ** t)
            upd = lr * mhat / (np.sqrt(vhat) + opt.eps)
        new_params[name] = Tensor((p.astype(np.float64) - upd).astype(p.dtype))
    return new_params, new_slots


def init_train_state(contract: ModelContract, opt: OptimizerSpec,
                     rng: R.RngKey, input_shape, input_dtype="f32") -> TrainState:
    """Initialize params/state on an all-zeros dummy input."""
    if input_shape[0] < 1:
        raise TrainError(f"input shape needs a concrete batch extent: {input_shape}")
    arch = contract.build_model()
    k_init, k_state = R.split(rng, 2)
    dummy = Tensor(np.zeros(input_shape), dtype=input_dtype)
    params, model_state = arch.init(k_init, dummy)
    return TrainState(
        step=0,
        params=params,
        model_state=model_state,
        opt_state=_init_opt_state(params, opt),
        rng=k_state,
    )


def _run_device(arch, params, model_state, batch, contract, metric_fn,
                train: bool, key=None):
    """One device's forward pass (and loss, when training)."""
    stash = {}

    def objective(p):
        outputs, new_ms = arch.apply(p, model_state, batch["inputs"],
                                     train=train, rng=key)
        stash["outputs"] = outputs
        stash["model_state"] = new_ms
        return contract.loss_fn(outputs, batch)

    if train:
        loss, grads = value_and_grad(objective, params)
    else:
        loss = objective(params)
        grads = None
    aux = {k: v for k, v in batch.items()
           if k not in ("inputs", "label", "batch_mask")}
    table = metric_fn(stash["outputs"], batch["label"],
                      batch.get("batch_mask"), **aux)
    return loss, grads, stash["model_state"], table


def _sum_tables(tables: list) -> dict:
    keys = set(tables[0])
    for t in tables[1:]:
        if set(t) != keys:
            missing = keys.symmetric_difference(t)
            raise TrainError(f"metric tables disagree on keys: {sorted(missing)}")
    return {
        k: (sum(t[k][0] for t in tables), sum(t[k][1] for t in tables))
        for k in sorted(keys)
    }


def train_step(state: TrainState, device_batches: list, topology: Topology,
               contract: ModelContract, opt: OptimizerSpec):
    """One synchronous data-parallel update; returns (new_state, MetricTable)."""
    d_total = topology.total_devices
    if len(device_batches) != d_total:
        raise TrainError(
            f"expected {d_total} device batches, got {len(device_batches)}")
    arch = contract.build_model()
    metric_fn = contract.get_metrics_fn()
    keys = R.split(state.rng, d_total + 1)
    new_rng = keys[-1]

    grad_sum = None
    state_sum = None
    tables = []
    for d, batch in enumerate(device_batches):  # ascending device order
        loss, grads, new_ms, table = _run_device(
            arch, state.params, state.model_state, batch, contract,
            metric_fn, train=True, key=keys[d])
        if not np.isfinite(loss.item()):
            raise TrainError(f"non-finite loss at step {state.step}, device {d}")
        if grad_sum is None:
            grad_sum = {k: v.data.astype(np.float64) for k, v in grads.items()}
            state_sum = {k: v.data.astype(np.float64) for k, v in new_ms.items()}
        else:
            for k, v in grads.items():
                grad_sum[k] = grad_sum[k] + v.data
            for k, v in new_ms.items():
                state_sum[k] = state_sum[k] + v.data
        tables.append(table)

    mean_grads = {k: Tensor(v / d_total) for k, v in grad_sum.items()}
    new_model_state = {
        k: Tensor((state_sum[k] / d_total).astype(state.model_state[k].data.dtype))
        for k in state_sum
    }
    new_params, new_opt = _apply_update(
        state.params, mean_grads, state.opt_state, opt, state.step)
    new_state = TrainState(
        step=state.step + 1,
        params=new_params,
        model_state=new_model_state,
        opt_state=new_opt,
        rng=new_rng,
    )
    return new_state, _sum_tables(tables)


def eval_step(state: TrainState, device_batches: list,
              contract: ModelContract) -> dict:
    """Pure evaluation over device batches; returns a summed MetricTable."""
    arch = contract.build_model()
    metric_fn = contract.get_metrics_fn()
    tables = []
    for batch in device_batches:
        _, _, new_ms, table = _run_device(
            arch, state.params, state.model_state, batch, contract,
            metric_fn, train=False)
        tables.append(table)
    return _sum_tables(tables)


def aggregate_metrics(tables: list) -> dict:
    """Componentwise-sum the tables, then normalize each metric."""
    if not tables:
        raise TrainError("no metric tables to aggregate")
    total = _sum_tables(tables)
    out = {}
    for name, (value, norm) in total.items():
        if norm <= 0:
            raise TrainError(f"metric {name!r} has zero total normalizer")
        out[name] = value / norm
    return out


def _split_device_batches(batch: dict, devices: int) -> list:
    n = batch["inputs"].shape[0]
    if n % devices:
        raise TrainError(f"host batch {n} not divisible by {devices} devices")
    per = n // devices
    return [
        {k: Tensor(v.data[d * per:(d + 1) * per]) for k, v in batch.items()}
        for d in range(devices)
    ]


_TRAINER_KINDS = ("classification", "segmentation", "detection")


def run_trainer(kind: str, config: Config, workdir: str,
                seed: int = 0, stop_when: Callable | None = None) -> dict:
    """Full training loop; returns the final aggregated eval metrics.

    Writes ``<workdir>/metrics.jsonl`` (with a deterministic logical
    clock so identical runs are byte-identical) and ``ckpt_<step>.bin``
    at every eval and at the end. ``stop_when`` is checked against eval
    metrics to allow stopping as soon as a target is reached.
    """
    if kind not in _TRAINER_KINDS:
        raise TrainError(f"unknown trainer kind {kind!r}; have {_TRAINER_KINDS}")
    os.makedirs(workdir, exist_ok=True)

    topology = Topology(
        host_count=config.get("topology.host_count", 1),
        devices_per_host=config.get("topology.devices_per_host", 1),
    )
    per_device_batch = config.get("batch_size", 32)
    total_steps = config.get("total_steps", 200)
    eval_every = config.get("eval_every", max(total_steps // 4, 1))

    root = R.RngKey.from_seed(seed)
    k_data, k_init = R.split(root, 2)
    datasets = [
        build_dataset(
            config.require("dataset.name"),
            ShardSpec(h, topology.host_count, topology.devices_per_host,
                      per_device_batch),
            k_data, config)
        for h in range(topology.host_count)
    ]
    meta = datasets[0].meta_data

    factory = get_model_cls(config.require("model.name"))
    contract = factory(config, meta)

    opt = OptimizerSpec(
        kind=config.get("optimizer.kind", "adam"),
        lr=config.get("optimizer.lr", 1e-3),
        momentum=config.get("optimizer.momentum", 0.9),
        grad_clip=config.get("optimizer.grad_clip"),
    )
    if config.get("optimizer.cosine_decay", False):
        opt = replace(opt, lr=cosine_decay(config.get("optimizer.lr", 1e-3),
                                           total_steps))

    input_shape = (1,) + tuple(meta.input_shape[1:])
    state = init_train_state(contract, opt, k_init, input_shape,
                             config.get("model.dtype", "f32"))

    # resume from the latest checkpoint already in the workdir, if any
    resumed = False
    if config.get("resume", True):
        ckpts = sorted(
            (int(f[5:-4]), f) for f in os.listdir(workdir)
            if f.startswith("ckpt_") and f.endswith(".bin"))
        if ckpts:
            step, fname = ckpts[-1]
            state = load_checkpoint(os.path.join(workdir, fname))
            for ds in datasets:  # replay the consumed prefix of the stream
                for _ in range(step):
                    next(ds.train_iter)
            resumed = True

    def run_eval(st: TrainState) -> dict:
        tables = []
        for h, ds in enumerate(datasets):
            for host_batch in ds.eval_iter():
                dev = _split_device_batches(host_batch, topology.devices_per_host)
                tables.append(eval_step(st, dev, contract))
        return aggregate_metrics(tables)

    clock_state = {"t": 0.0}

    def logical_clock():
        clock_state["t"] += 1.0
        return clock_state["t"]

    final_metrics = {}
    mode = "a" if resumed else "w"
    with open(os.path.join(workdir, "metrics.jsonl"), mode) as sink:
        writer = MetricWriter(sink, clock=logical_clock)
        train_tables = []

        def do_eval(step):
            nonlocal final_metrics
            final_metrics = run_eval(state)
            writer.write(step, {f"eval_{k}": v for k, v in final_metrics.items()})
            save_checkpoint(state, os.path.join(workdir, f"ckpt_{step}.bin"))

        for _ in range(total_steps - state.step):
            host_batches = [next(ds.train_iter) for ds in datasets]
            device_batches = []
            for hb in host_batches:
                device_batches.extend(
                    _split_device_batches(hb, topology.devices_per_host))
            state, table = train_step(state, device_batches, topology,
                                      contract, opt)
            train_tables.append(table)
            if state.step % eval_every == 0 or state.step == total_steps:
                writer.write(state.step, {
                    f"train_{k}": v
                    for k, v in aggregate_metrics(train_tables).items()
                })
                train_tables = []
                do_eval(state.step)
                if stop_when is not None and stop_when(final_metrics):
                    break
        if total_steps == 0:
            do_eval(0)
    return final_metrics
