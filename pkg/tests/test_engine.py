import math

import numpy as np
import pytest

from bars import autodiff as ad
from bars import engine
from bars.data import SplitSpec, split_train_val, synthetic_dataset
from bars.layers import Module
from bars.objectives import CostTable
from bars.search_space import Genotype, StageGene, decode, validate_genotype


@pytest.fixture
def data():
    ds = synthetic_dataset(0, 48, 3, size=8)
    return split_train_val(ds, SplitSpec(0.5, 0))


def short_run(**kw):
    base = dict(epochs=3, warmup_epochs=1, batch_size=12, w_lr=3e-3, alpha_lr=0.05, derive_k=3, derive_batch_size=24)
    base.update(kw)
    return engine.SearchRunConfig(**base)


def snapshot(params):
    return [p.data.copy() for p in params]


def assert_same(params, snap):
    for p, s in zip(params, snap):
        assert p.data.tobytes() == s.tobytes()


class TestConfigs:
    def test_warmup_must_leave_search_epochs(self):
        with pytest.raises(ValueError, match="warm-up"):
            engine.SearchRunConfig(epochs=3, warmup_epochs=3).validate()

    def test_schedule(self):
        s = engine.SearchRunConfig().schedule(10)
        assert s.lambda_ent == 0.0 and s.tau == 0.9**10

    def test_train_epochs(self):
        with pytest.raises(ValueError, match="epochs"):
            engine.TrainRunConfig(epochs=0).validate()


class TestParameterPartition:
    def test_steps_touch_only_their_own_parameters(self, micro_space, data):
        train, val = data
        state = engine.init_search(micro_space, short_run(), seed=0)
        net, arch = state.net, state.arch
        sched = state.run.schedule(1)
        table = CostTable(micro_space)
        xb, yb = train.images[:12], train.labels[:12]

        before_a = snapshot(arch.parameters())
        engine.weight_step(net, arch, xb, yb, sched.tau, state.w_opt, state.rng)
        state.w_opt.step()
        assert_same(arch.parameters(), before_a)

        before_w = snapshot(net.parameters())
        arch.set_requires_grad(True)
        engine.set_requires_grad(net.parameters(), False)
        loss, _ = engine.alpha_loss(net, arch, val.images[:12], val.labels[:12], sched, table, micro_space, state.rng)
        state.a_opt.zero_grad()
        loss.backward()
        state.a_opt.step()
        assert_same(net.parameters(), before_w)
        assert any(not np.array_equal(p.data, s) for p, s in zip(arch.parameters(), before_a))

    def test_optimizers_are_disjoint(self, micro_space):
        state = engine.init_search(micro_space, short_run())
        w_ids = {id(p) for p in state.w_opt.params}
        assert not any(id(p) in w_ids for p in state.a_opt.params)
        assert len(state.a_opt.params) == 3


class TestSearch:
    def test_determinism_and_outputs(self, micro_space, data, tmp_path):
        train, val = data
        outs = []
        for name in ("a", "b"):
            state = engine.init_search(micro_space, short_run(), seed=3)
            engine.run_search(state, train, val, out_dir=str(tmp_path / name))
            outs.append(state)
        ta = (tmp_path / "a" / "trajectory.csv").read_bytes()
        assert ta == (tmp_path / "b" / "trajectory.csv").read_bytes()
        rows = engine.read_trajectory(tmp_path / "a" / "trajectory.csv")
        assert [r["phase"] for r in rows] == ["warmup", "search", "search"]
        assert math.isnan(rows[0]["val_loss"]) and not math.isnan(rows[1]["val_loss"])
        assert list(rows[0]) == engine.trajectory_columns(micro_space)
        for r in rows:
            assert 0.0 <= r["shortcut_prob"] <= 1.0
        assert (tmp_path / "a" / "checkpoints" / "last.npz").exists()
        assert (tmp_path / "a" / "checkpoints" / "best.npz").exists()

    def test_resume_matches_uninterrupted(self, micro_space, data, tmp_path):
        train, val = data
        full = engine.init_search(micro_space, short_run(), seed=5)
        engine.run_search(full, train, val, out_dir=str(tmp_path / "full"))

        part = engine.init_search(micro_space, short_run(), seed=5)
        engine.run_search(part, train, val, out_dir=str(tmp_path / "part"), stop_after=2)
        resumed = engine.init_search(micro_space, short_run(), seed=5)
        engine.load_checkpoint(str(tmp_path / "part" / "checkpoints" / "last.npz"), resumed)
        assert resumed.epoch == 2
        engine.run_search(resumed, train, val, out_dir=str(tmp_path / "part"))
        assert (tmp_path / "full" / "trajectory.csv").read_bytes() == (tmp_path / "part" / "trajectory.csv").read_bytes()
        for p, q in zip(full.arch.parameters(), resumed.arch.parameters()):
            assert p.data.tobytes() == q.data.tobytes()

    def test_checkpoint_keeps_frozen_weights(self, micro_space, data, tmp_path):
        train, val = data
        state = engine.init_search(micro_space, short_run(epochs=2), seed=0)
        engine.run_search(state, train, val, out_dir=str(tmp_path))
        with np.load(tmp_path / "checkpoints" / "last.npz") as z:
            names = {k[4:] for k in z.files if k.startswith("net/")}
        assert set(state.net.state_dict()) == names

    def test_alpha_roundtrip(self, micro_space, tmp_path):
        state = engine.init_search(micro_space, short_run())
        state.arch.micro.data[...] = np.random.default_rng(0).standard_normal(state.arch.micro.shape)
        engine.save_alpha(str(tmp_path / "a.npz"), state.arch)
        other = engine.init_search(micro_space, short_run())
        engine.load_alpha(str(tmp_path / "a.npz"), other.arch)
        np.testing.assert_array_equal(other.arch.micro.data, state.arch.micro.data)

    def test_nan_loss_aborts_with_snapshot(self, micro_space, data, tmp_path):
        train, val = data
        state = engine.init_search(micro_space, short_run(warmup_epochs=0), seed=0)
        state.net.classifier.weight.data[...] = np.nan
        with pytest.raises(engine.SearchAborted) as info:
            engine.run_search(state, train, val, out_dir=str(tmp_path))
        assert info.value.snapshot and (tmp_path / "abort_snapshot.npz").exists()


class TestDerive:
    def test_k_one_returns_sample_without_loss(self, micro_space, data):
        _, val = data
        state = engine.init_search(micro_space, short_run())
        g, cands = engine.derive(state.net, val, k=1, rng=np.random.default_rng(0))
        assert len(cands) == 1 and math.isnan(cands[0].val_loss)
        assert validate_genotype(g, micro_space).ok

    def test_picks_lowest_validation_loss(self, micro_space, data):
        _, val = data
        state = engine.init_search(micro_space, short_run())
        g, cands = engine.derive(state.net, val, k=6, rng=np.random.default_rng(1), batch_size=24)
        best = min(cands, key=lambda c: c.val_loss)
        assert g == best.genotype
        csv_text = engine.candidates_csv(cands, cands.index(best))
        assert csv_text.count("\n") == 7

    def test_recalibration_restores_state(self, micro_space, data):
        train, val = data
        state = engine.init_search(micro_space, short_run())
        before = {k: v.copy() for k, v in state.net.state_dict().items()}
        engine.derive(state.net, val, k=2, rng=np.random.default_rng(0), recalibrate=1, train=train)
        after = state.net.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)


def genotype_with_dead_parts(config):
    full = [(i, j, "bconv3x3") for i, j in config.edges()]
    dead = [(0, 1, "bconv3x3"), (0, 2, "skip"), (1, 2, "none")]
    return Genotype([StageGene(dead, 1, 1), StageGene(list(full), 1, 1)], [(0, 2, "bconv3x3"), (1, 2, "skip")],
                    config.fingerprint())


class TestPrune:
    def test_drops_dead_edges(self, micro_space):
        g = genotype_with_dead_parts(micro_space)
        p = engine.prune_genotype(g, micro_space)
        assert p.stages[0].topology == [(0, 2, "skip")]
        assert p.reduction_topology == [(0, 2, "bconv3x3")]

    def test_unreachable_output_empties_cell(self):
        topo = {(0, 1): "skip", (1, 2): "none", (0, 2): "none"}
        assert engine.prune_topology(topo, 3) == []

    def test_preserves_function(self, micro_space, rng):
        g = genotype_with_dead_parts(micro_space)
        g.stages[0].topology = [(0, 1, "bconv3x3"), (1, 2, "none"), (0, 2, "skip")]
        g.reduction_topology = [(0, 1, "bconv3x3"), (0, 2, "bconv3x3"), (1, 2, "none")]
        src = decode(g, micro_space, np.random.default_rng(0))
        dst = engine.transfer_weights(src, decode(engine.prune_genotype(g, micro_space), micro_space))
        x = rng.random((5, 3, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(engine.predict_logits(src, x), engine.predict_logits(dst, x))
        assert dst.num_parameters() < src.num_parameters()

    def test_invalid_genotype(self, micro_space):
        g = genotype_with_dead_parts(micro_space)
        g.stages[0].depth = 9
        with pytest.raises(ValueError, match="depth"):
            engine.prune_genotype(g, micro_space)


class ConstantModel(Module):
    def __init__(self, k, classes):
        self.k, self.classes = k, classes

    def forward(self, x):
        logits = np.zeros((x.shape[0], self.classes), dtype=np.float32)
        logits[:, self.k] = 1.0
        return ad.Tensor(logits)


class TestEvaluate:
    def test_constant_classifier_on_balanced_data(self):
        ds = synthetic_dataset(0, 100, 10, size=8)
        res = engine.evaluate(ConstantModel(3, 10), ds)
        assert res["accuracy"] == pytest.approx(0.10)
        assert res == engine.evaluate(ConstantModel(3, 10), ds)

    def test_empty_split(self):
        with pytest.raises(ValueError, match="empty"):
            engine.evaluate(ConstantModel(0, 2), None)

    def test_train_final_and_packed_agreement(self, micro_space):
        ds = synthetic_dataset(1, 60, 3, size=8)
        train, test = split_train_val(ds, SplitSpec(0.5, 0))
        g = genotype_with_dead_parts(micro_space)
        run = engine.TrainRunConfig(epochs=2, batch_size=10, augment=True)
        model, hist = engine.train_final(g, micro_space, run, train, test, seed=0)
        assert len(hist) == 2 and {"train_loss", "test_acc"} <= set(hist[0])
        dense = engine.evaluate(model, test)
        logits = engine.predict_logits(model, test.images)
        model.export()
        assert model.is_packed
        assert engine.evaluate(model, test)["accuracy"] == dense["accuracy"]
        np.testing.assert_allclose(engine.predict_logits(model, test.images), logits, atol=1e-4)

    def test_train_final_deterministic(self, micro_space):
        ds = synthetic_dataset(1, 30, 3, size=8)
        g = genotype_with_dead_parts(micro_space)
        run = engine.TrainRunConfig(epochs=1, batch_size=10)
        a, _ = engine.train_final(g, micro_space, run, ds, seed=4)
        b, _ = engine.train_final(g, micro_space, run, ds, seed=4)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb and va.tobytes() == vb.tobytes()
