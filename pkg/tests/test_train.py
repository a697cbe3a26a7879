import os

import numpy as np
import pytest

from deskml import checkpoint as CK
from deskml import rng as R
from deskml import tensor as T
from deskml import train as TR
from deskml.baselines import build_mlp
from deskml.config import Config
from deskml.data import DatasetMetaData
from deskml.models import (ArchitectureHandle, ModelContract,
                           classification_loss, classification_metrics)
from deskml.tensor import Tensor


def mlp_meta(dim=2, k=3):
    return DatasetMetaData(num_classes=k, input_shape=(-1, dim),
                           num_train_examples=64, num_eval_examples=16,
                           target_is_onehot=False)


def fresh_state(contract, opt=None, seed=0, dim=2, dtype="f32"):
    opt = opt or TR.OptimizerSpec(kind="sgd", lr=0.1)
    return TR.init_train_state(contract, opt, R.RngKey.from_seed(seed),
                               (1, dim), dtype)


def quadratic_contract():
    """Minimal contract: loss = 0.5 * sum(w^2), so one SGD step scales w."""
    def init(key, dummy):
        return {"w": Tensor(R.normal(key, (4,)))}, {}

    def apply(params, model_state, inputs, train=False, rng=None):
        return params["w"], model_state

    def loss_fn(outputs, batch):
        return T.tsum(outputs * outputs) * 0.5

    def metric_fn(outputs, label, batch_mask=None):
        return {"loss": (float((outputs.data ** 2).sum() / 2), 1.0)}

    return ModelContract(
        config=Config(), meta=mlp_meta(),
        build_model=lambda: ArchitectureHandle(init, apply),
        loss_fn=loss_fn, get_metrics_fn=lambda: metric_fn)


def toy_batch(n=4, dim=2, k=3, seed=0):
    k1, k2 = R.split(R.RngKey.from_seed(seed), 2)
    return {"inputs": Tensor(R.normal(k1, (n, dim)), dtype="f32"),
            "label": Tensor(R.randint(k2, (n,), 0, k))}


class TestInit:
    def test_mlp_parameter_count(self):
        contract = build_mlp(Config(), mlp_meta())
        state = fresh_state(contract)
        total = sum(int(np.prod(p.data.shape)) for p in state.params.values())
        # 2*64 + 64 + 64*3 + 3
        assert total == 387

    def test_init_deterministic(self):
        contract = build_mlp(Config(), mlp_meta())
        a = fresh_state(contract, seed=5)
        b = fresh_state(contract, seed=5)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_adam_slots_created(self):
        contract = build_mlp(Config(), mlp_meta())
        state = fresh_state(contract, TR.OptimizerSpec(kind="adam"))
        assert set(state.opt_state) == {
            f"{n}/{s}" for n in state.params for s in ("m", "v")}

    def test_unknown_optimizer(self):
        contract = build_mlp(Config(), mlp_meta())
        with pytest.raises(TR.TrainError, match="unknown optimizer"):
            fresh_state(contract, TR.OptimizerSpec(kind="nope"))


class TestOptimizer:
    def test_sgd_quadratic_contracts_weights(self):
        contract = quadratic_contract()
        opt = TR.OptimizerSpec(kind="sgd", lr=0.1)
        state = fresh_state(contract, opt)
        w0 = state.params["w"].data.copy()
        topo = TR.Topology(1, 1)
        state, _ = TR.train_step(state, [toy_batch()], topo, contract, opt)
        # grad of 0.5*||w||^2 is w, so w' = w - lr*w = 0.9*w
        assert np.allclose(state.params["w"].data, 0.9 * w0, atol=1e-6)

    def test_zero_lr_is_noop(self):
        contract = build_mlp(Config(), mlp_meta())
        opt = TR.OptimizerSpec(kind="adam", lr=0.0)
        state = fresh_state(contract, opt)
        new, _ = TR.train_step(state, [toy_batch()], TR.Topology(1, 1),
                               contract, opt)
        for name in state.params:
            assert np.array_equal(new.params[name].data, state.params[name].data)
        assert new.step == 1

    def test_momentum_accumulates(self):
        contract = quadratic_contract()
        opt = TR.OptimizerSpec(kind="sgd_momentum", lr=0.1, momentum=0.5)
        state = fresh_state(contract, opt)
        w0 = state.params["w"].data.copy()
        topo = TR.Topology(1, 1)
        state, _ = TR.train_step(state, [toy_batch()], topo, contract, opt)
        state, _ = TR.train_step(state, [toy_batch()], topo, contract, opt)
        # step1: m=w0, w1=0.9*w0. step2: m=0.5*w0+w1, w2=w1-0.1*m
        w2 = 0.9 * w0 - 0.1 * (0.5 * w0 + 0.9 * w0)
        assert np.allclose(state.params["w"].data, w2, atol=1e-6)

    def test_grad_clip_bounds_update(self):
        contract = quadratic_contract()
        opt = TR.OptimizerSpec(kind="sgd", lr=1.0, grad_clip=1e-3)
        state = fresh_state(contract, opt)
        w0 = state.params["w"].data.copy()
        state, _ = TR.train_step(state, [toy_batch()], TR.Topology(1, 1),
                                 contract, opt)
        assert np.abs(state.params["w"].data - w0).max() <= 1e-3 + 1e-9

    def test_cosine_decay_endpoints(self):
        sched = TR.cosine_decay(0.5, 100)
        assert sched(0) == pytest.approx(0.5)
        assert sched(50) == pytest.approx(0.25)
        assert sched(100) == pytest.approx(0.0, abs=1e-12)

    def test_negative_lr_rejected(self):
        with pytest.raises(TR.TrainError, match="negative"):
            TR.OptimizerSpec(kind="sgd", lr=-0.1).lr_at(0)


class TestDataParallel:
    def test_device_count_validated(self):
        contract = quadratic_contract()
        opt = TR.OptimizerSpec(kind="sgd", lr=0.1)
        state = fresh_state(contract, opt)
        with pytest.raises(TR.TrainError, match="device batches"):
            TR.train_step(state, [toy_batch()], TR.Topology(1, 4), contract, opt)

    def test_split_device_batches(self):
        batch = toy_batch(n=8)
        parts = TR._split_device_batches(batch, 4)
        assert len(parts) == 4
        rebuilt = np.concatenate([p["inputs"].data for p in parts])
        assert np.array_equal(rebuilt, batch["inputs"].data)
        with pytest.raises(TR.TrainError, match="divisible"):
            TR._split_device_batches(batch, 3)

    def test_four_devices_match_one_device(self):
        """Averaged sharded gradients equal the full-batch gradient (f64)."""
        cfg = Config({"model": {"dtype": "f64"}})
        contract = build_mlp(cfg, mlp_meta())
        opt = TR.OptimizerSpec(kind="adam", lr=1e-2)
        batch = toy_batch(n=32, seed=3)

        def run(devices):
            state = fresh_state(contract, opt, seed=1, dtype="f64")
            topo = TR.Topology(1, devices)
            for _ in range(5):
                state, _ = TR.train_step(
                    state, TR._split_device_batches(batch, devices),
                    topo, contract, opt)
            return state.params

        a, b = run(1), run(4)
        for name in a:
            diff = np.abs(a[name].data - b[name].data).max()
            assert diff < 1e-9, f"{name}: {diff}"

    def test_metric_tables_summed_across_devices(self):
        contract = build_mlp(Config(), mlp_meta())
        opt = TR.OptimizerSpec(kind="sgd", lr=0.0)
        state = fresh_state(contract, opt)
        batch = toy_batch(n=8, seed=2)
        _, table = TR.train_step(state, TR._split_device_batches(batch, 2),
                                 TR.Topology(1, 2), contract, opt)
        assert table["accuracy"][1] == 8.0


class TestEval:
    def test_eval_step_leaves_state_untouched(self):
        contract = build_mlp(Config(), mlp_meta())
        state = fresh_state(contract)
        before = {k: v.data.copy() for k, v in state.params.items()}
        TR.eval_step(state, [toy_batch()], contract)
        for name in before:
            assert np.array_equal(state.params[name].data, before[name])

    def test_aggregate_metrics(self):
        tables = [{"accuracy": (3.0, 4.0)}, {"accuracy": (1.0, 4.0)}]
        assert TR.aggregate_metrics(tables) == {"accuracy": 0.5}

    def test_aggregate_weighted_not_mean_of_means(self):
        # 9/10 on one device and 0/2 on another is 9/12, not 0.45
        tables = [{"acc": (9.0, 10.0)}, {"acc": (0.0, 2.0)}]
        assert TR.aggregate_metrics(tables)["acc"] == pytest.approx(0.75)

    def test_aggregate_errors(self):
        with pytest.raises(TR.TrainError, match="no metric"):
            TR.aggregate_metrics([])
        with pytest.raises(TR.TrainError, match="zero total normalizer"):
            TR.aggregate_metrics([{"a": (1.0, 0.0)}])
        with pytest.raises(TR.TrainError, match="disagree"):
            TR.aggregate_metrics([{"a": (1.0, 1.0)}, {"b": (1.0, 1.0)}])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        contract = build_mlp(Config(), mlp_meta())
        opt = TR.OptimizerSpec(kind="adam", lr=1e-2)
        state = fresh_state(contract, opt)
        state, _ = TR.train_step(state, [toy_batch()], TR.Topology(1, 1),
                                 contract, opt)
        path = str(tmp_path / "ckpt_1.bin")
        CK.save_checkpoint(state, path)
        loaded = CK.load_checkpoint(path)
        assert loaded.step == state.step
        assert loaded.rng == state.rng
        for group in ("params", "model_state", "opt_state"):
            a, b = getattr(state, group), getattr(loaded, group)
            assert set(a) == set(b)
            for name in a:
                assert np.array_equal(a[name].data, b[name].data)
                assert a[name].data.dtype == b[name].data.dtype

    def test_missing_file(self):
        with pytest.raises(CK.CheckpointError, match="not found"):
            CK.load_checkpoint("/nonexistent/ckpt_0.bin")

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(CK.CheckpointError, match="magic"):
            CK.load_checkpoint(str(p))

    def test_truncated(self, tmp_path):
        contract = build_mlp(Config(), mlp_meta())
        state = fresh_state(contract)
        path = tmp_path / "ckpt_0.bin"
        CK.save_checkpoint(state, str(path))
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CK.CheckpointError, match="truncated"):
            CK.load_checkpoint(str(path))


def trainer_config(**extra):
    base = {
        "model": {"name": "fully_connected_classification"},
        "dataset": {"name": "blobs_classification",
                    "num_train_examples": 64, "num_eval_examples": 16},
        "batch_size": 8,
        "total_steps": 8,
        "eval_every": 4,
        "optimizer": {"kind": "adam", "lr": 1e-2},
    }
    cfg = Config(base)
    for k, v in extra.items():
        cfg = Config({**cfg.to_dict(), k: v})
    return cfg


class TestRunTrainer:
    def test_writes_metrics_and_checkpoints(self, tmp_path):
        wd = str(tmp_path / "run")
        out = TR.run_trainer("classification", trainer_config(), wd, seed=0)
        assert "accuracy" in out and "loss" in out
        assert os.path.exists(os.path.join(wd, "metrics.jsonl"))
        assert os.path.exists(os.path.join(wd, "ckpt_4.bin"))
        assert os.path.exists(os.path.join(wd, "ckpt_8.bin"))

    def test_bitwise_deterministic(self, tmp_path):
        files = []
        for name in ("a", "b"):
            wd = str(tmp_path / name)
            TR.run_trainer("classification", trainer_config(), wd, seed=1)
            with open(os.path.join(wd, "metrics.jsonl"), "rb") as f:
                files.append(f.read())
        assert files[0] == files[1]

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        cfg = trainer_config()
        full = str(tmp_path / "full")
        TR.run_trainer("classification", cfg, full, seed=2)

        half_cfg = trainer_config(total_steps=4)
        split = str(tmp_path / "split")
        TR.run_trainer("classification", half_cfg, split, seed=2)
        TR.run_trainer("classification", cfg, split, seed=2)  # resumes at 4

        a = CK.load_checkpoint(os.path.join(full, "ckpt_8.bin"))
        b = CK.load_checkpoint(os.path.join(split, "ckpt_8.bin"))
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_eval_only_when_zero_steps(self, tmp_path):
        wd = str(tmp_path / "evalonly")
        out = TR.run_trainer("classification",
                             trainer_config(total_steps=0), wd, seed=0)
        assert "accuracy" in out
        assert os.path.exists(os.path.join(wd, "ckpt_0.bin"))

    def test_stop_when_halts_early(self, tmp_path):
        calls = []

        def stop(metrics):
            calls.append(metrics)
            return True

        wd = str(tmp_path / "early")
        TR.run_trainer("classification", trainer_config(), wd, seed=0,
                       stop_when=stop)
        assert len(calls) == 1
        assert not os.path.exists(os.path.join(wd, "ckpt_8.bin"))

    def test_multi_host_multi_device(self, tmp_path):
        cfg = trainer_config(topology={"host_count": 2, "devices_per_host": 2},
                             batch_size=4)
        out = TR.run_trainer("classification", cfg, str(tmp_path / "mh"), seed=0)
        assert "accuracy" in out

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(TR.TrainError, match="unknown trainer kind"):
            TR.run_trainer("nope", trainer_config(), str(tmp_path / "x"))
