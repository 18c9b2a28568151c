"""One training step, optimizers, checkpoints and the run driver."""

import numpy as np
import pytest

from pagan import tensor as T
from pagan.config import TrainConfig
from pagan.data import load_dataset
from pagan.errors import FormatError, NumericError
from pagan.objectives import LN2, pagan_losses
from pagan.trainer import (LOSS_COLUMNS, SGD, Adam, Trainer, load_checkpoint, make_optimizers,
                           save_checkpoint, train, train_step)

from conftest import tiny_bundle

SMALL = dict(dataset="ring", n_data=256, batch_size=16, hidden="16,16", final_metrics=False,
             eval_every=0, checkpoint_every=0)


def small_config(**kw):
    return TrainConfig(**{**SMALL, **kw})


def small_trainer(**kw):
    cfg = small_config(**kw)
    return Trainer(cfg, load_dataset(cfg))


def param_copy(bundle):
    return {name: [p.data.copy() for p in ps] for name, ps in bundle.blocks().items()}


def same_params(a, b, blocks):
    return all(np.array_equal(x, y) for k in blocks for x, y in zip(a[k], b[k]))


class Recorder:
    def __init__(self, name, log):
        self.name, self.log = name, log

    def step(self, grads):
        self.log.append(self.name)


class TestOptimizers:
    def test_sgd(self):
        p = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum(T.mul(p, p))
        SGD([p], lr=0.1).step(tape.backward(loss))
        np.testing.assert_allclose(p.data, [0.8, 1.6])

    def test_adam_first_step_is_signed_lr(self):
        p = T.Tensor(np.array([1.0, -3.0]), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum(T.mul(p, p))
        Adam([p], lr=0.01).step(tape.backward(loss))
        np.testing.assert_allclose(p.data, [0.99, -2.99], rtol=1e-9)

    def test_negative_lr(self):
        with pytest.raises(ValueError):
            Adam([], lr=-1.0)
        with pytest.raises(ValueError):
            SGD([], lr=-1.0)

    def test_state_round_trip(self):
        p = T.Tensor(np.ones(3), requires_grad=True)
        opt = Adam([p])
        with T.Tape() as tape:
            loss = T.sum(T.mul(p, p))
        opt.step(tape.backward(loss))
        meta, arrays = opt.state()
        other = Adam([p])
        other.load_state(meta, arrays)
        assert other.t == 1 and np.array_equal(other.m[0], opt.m[0])
        with pytest.raises(FormatError):
            other.load_state(meta, arrays[:1])


class TestTrainStep:
    @pytest.mark.parametrize("optimizer", ["adam", "sgd"])
    def test_zero_lr_is_noop(self, optimizer):
        tr = small_trainer(lr=0.0, optimizer=optimizer)
        before = param_copy(tr.bundle)
        for _ in range(3):
            record = tr.train_step()
            assert set(record.losses) == set(LOSS_COLUMNS)
            assert all(np.isfinite(v) for v in record.losses.values())
        assert same_params(before, param_copy(tr.bundle), tr.bundle.blocks())

    def test_zero_lr_wasserstein(self):
        tr = small_trainer(lr=0.0, game="wasserstein", critic_steps=2)
        before = param_copy(tr.bundle)
        tr.train_step()
        assert same_params(before, param_copy(tr.bundle), tr.bundle.blocks())

    def test_update_order(self, rng):
        b = tiny_bundle(data_shape=(2,))
        log = []
        opts = {name: Recorder(name, log) for name in b.blocks()}
        train_step(b, rng.standard_normal((8, 2)), small_config(), rng, opts)
        assert log == ["psi_x", "psi_z", "psi_xx", "theta", "phi"]

    def test_critic_steps_order(self, rng):
        b = tiny_bundle(data_shape=(2,), critic=True)
        log = []
        opts = {name: Recorder(name, log) for name in b.blocks()}
        cfg = small_config(game="wasserstein", critic_steps=3)
        train_step(b, rng.standard_normal((8, 2)), cfg, rng, opts,
                   next_batch=lambda: rng.standard_normal((8, 2)))
        assert log == ["psi_x", "psi_z", "psi_xx"] * 3 + ["theta", "phi"]

    def test_critic_steps_need_batches(self, rng):
        b = tiny_bundle(data_shape=(2,), critic=True)
        with pytest.raises(ValueError):
            train_step(b, rng.standard_normal((8, 2)), small_config(game="wasserstein"), rng)

    @pytest.mark.parametrize("moving", [("psi_x", "psi_z", "psi_xx"), ("theta", "phi")])
    def test_blocks_untouched_by_other_update(self, moving, rng):
        b = tiny_bundle(data_shape=(2,))
        cfg = small_config(lr=1e-2)
        opts = make_optimizers(b, cfg)
        for name in opts:
            if name not in moving:
                opts[name] = Recorder(name, [])
        before = param_copy(b)
        train_step(b, rng.standard_normal((8, 2)), cfg, rng, opts)
        after = param_copy(b)
        still = [k for k in before if k not in moving]
        assert same_params(before, after, still)
        assert not same_params(before, after, moving)

    def test_generator_uses_pre_update_gradients(self):
        cfg = small_config(lr=1e-3)
        b = tiny_bundle(data_shape=(2,), seed=4)
        ref = tiny_bundle(data_shape=(2,), seed=4)
        x = np.random.default_rng(0).standard_normal((8, 2))
        with T.Tape() as tape:
            losses = pagan_losses(ref, x, np.random.default_rng(7), cfg.game_kind, cfg.augment)
        g = tape.backward(losses.gen_total)
        expected = [p.data - 1e-3 * g.array(p) / (np.abs(g.array(p)) + 1e-8)
                    for p in ref.theta + ref.phi]
        train_step(b, x, cfg, np.random.default_rng(7))
        for p, e in zip(b.theta + b.phi, expected):
            np.testing.assert_allclose(p.data, e, rtol=1e-12, atol=1e-15)

    def test_grad_norms_reported(self, rng):
        b = tiny_bundle(data_shape=(2,))
        record = train_step(b, rng.standard_normal((8, 2)), small_config(), rng)
        assert set(record.grad_norms) == {"psi_x", "psi_z", "psi_xx", "theta", "phi"}
        assert all(v > 0 for v in record.grad_norms.values())

    def test_nonfinite_gradient_names_block(self, monkeypatch, rng):
        b = tiny_bundle(data_shape=(2,))
        target = b.phi[0]
        original = T.Tape.backward

        class Poisoned:
            def __init__(self, grads):
                self.grads = grads

            def array(self, p):
                a = self.grads.array(p)
                return a * np.nan if p is target else a

        monkeypatch.setattr(T.Tape, "backward", lambda self, root: Poisoned(original(self, root)))
        before = param_copy(b)
        with pytest.raises(NumericError) as info:
            train_step(b, rng.standard_normal((8, 2)), small_config(), rng)
        assert info.value.where == "phi"
        assert same_params(before, param_copy(b), b.blocks())

    def test_step_zero_pair_loss_near_2ln2(self):
        values = []
        for seed in range(20):
            cfg = TrainConfig(dataset="shapes", n_data=64, batch_size=64, seed=seed)
            tr = Trainer(cfg, load_dataset(cfg))
            values.append(tr.train_step().losses["L_d^xx"])
        assert np.all(np.abs(np.array(values) - 2 * LN2) < 0.2), values


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        tr = small_trainer()
        tr.train_step()
        path = tr.save(tmp_path / "c.bin")
        ckpt = load_checkpoint(path, expected_hash=tr.config.hash())
        for name, arr in tr.bundle.state_arrays().items():
            assert ckpt.state[name].tobytes() == np.asarray(arr, dtype="<f4").tobytes(), name
        assert ckpt.step == 1 and ckpt.config_hash == tr.config.hash()

    def test_header(self, tmp_path):
        tr = small_trainer()
        blob = tr.save(tmp_path / "c.bin").read_bytes()
        assert blob[:8] == b"PAGANCKP" and blob[8:12] == b"\x01\x00\x00\x00"
        assert blob[12:44] == bytes.fromhex(tr.config.hash())

    @pytest.mark.parametrize("cut", [10, 100, -1])
    def test_truncated(self, tmp_path, cut):
        tr = small_trainer()
        path = tr.save(tmp_path / "c.bin")
        path.write_bytes(path.read_bytes()[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_corrupt_byte(self, tmp_path):
        path = small_trainer().save(tmp_path / "c.bin")
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = small_trainer().save(tmp_path / "c.bin")
        path.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_wrong_config(self, tmp_path):
        path = small_trainer().save(tmp_path / "c.bin")
        other = small_trainer(seed=9)
        before = param_copy(other.bundle)
        with pytest.raises(FormatError):
            other.restore(path)
        assert same_params(before, param_copy(other.bundle), other.bundle.blocks())

    def test_plain_bundle(self, tmp_path):
        b = tiny_bundle(data_shape=(2,), dtype=np.float32)
        path = save_checkpoint(b, tmp_path / "b.bin")
        assert load_checkpoint(path).optimizer_meta == {}

    def test_replay(self, tmp_path):
        a = small_trainer()
        for _ in range(5):
            a.train_step()
        path = a.save(tmp_path / "mid.bin")
        first = [a.train_step().row() for _ in range(10)]
        b = Trainer.from_checkpoint(path)
        assert b.step == 5
        assert [b.train_step().row() for _ in range(10)] == first

    def test_replay_matches_uninterrupted(self, tmp_path):
        a = small_trainer()
        rows = [a.train_step().row() for _ in range(8)]
        b = small_trainer()
        for _ in range(3):
            b.train_step()
        c = Trainer.from_checkpoint(b.save(tmp_path / "c.bin"))
        assert [c.train_step().row() for _ in range(5)] == rows[3:]


class TestRun:
    def test_steps_zero(self, tmp_path):
        run = train(small_config(steps=0), tmp_path / "run")
        assert sorted(p.name for p in run.iterdir()) == ["ckpt_0.bin", "config.txt", "manifest.txt"]
        assert load_checkpoint(run / "ckpt_0.bin").step == 0

    def test_layout(self, tmp_path):
        cfg = small_config(steps=6, checkpoint_every=3, eval_every=3, final_metrics=True)
        run = train(cfg, tmp_path / "run")
        names = {p.name for p in run.iterdir()}
        assert {"ckpt_3.bin", "ckpt_6.bin", "samples_3.txt", "recons_6.txt", "losses.tsv",
                "metrics.txt", "ring.txt", "config.txt", "manifest.txt"} <= names
        lines = (run / "losses.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["step", *LOSS_COLUMNS] and len(lines) == 7
        assert "status=completed" in (run / "manifest.txt").read_text()

    def test_image_snapshots(self, tmp_path):
        cfg = TrainConfig(dataset="shapes", n_data=64, batch_size=8, steps=1, eval_every=1,
                          final_metrics=False, width=4, hidden="16")
        run = train(cfg, tmp_path / "run")
        assert (run / "samples_1.pgm").read_bytes().startswith(b"P5\n128 128\n255\n")
        assert (run / "recons_1.pgm").read_bytes().startswith(b"P5\n256 64\n255\n")

    def test_deterministic(self, tmp_path):
        a = train(small_config(steps=15), tmp_path / "a")
        b = train(small_config(steps=15), tmp_path / "b")
        assert (a / "losses.tsv").read_bytes() == (b / "losses.tsv").read_bytes()

    def test_resume_appends(self, tmp_path):
        full = train(small_config(steps=8), tmp_path / "full")
        part = train(small_config(steps=4), tmp_path / "part")
        resumed = train(small_config(steps=8), tmp_path / "part", resume=part / "ckpt_4.bin")
        assert (resumed / "losses.tsv").read_bytes() == (full / "losses.tsv").read_bytes()

    def test_divergence_flag(self, tmp_path, monkeypatch):
        real_step = Trainer.train_step

        def exploding(self):
            record = real_step(self)
            if record.step == 2:
                record.losses["L_g"] = 2e4
            return record

        monkeypatch.setattr(Trainer, "train_step", exploding)
        run = train(small_config(steps=10), tmp_path / "run")
        manifest = (run / "manifest.txt").read_text()
        assert "status=diverged" in manifest and "diverged=true" in manifest
        assert len((run / "losses.tsv").read_text().splitlines()) == 4

    def test_numeric_error_flag(self, tmp_path, monkeypatch):
        def broken(self):
            raise NumericError("bad", where="theta")

        monkeypatch.setattr(Trainer, "train_step", broken)
        run = train(small_config(steps=3), tmp_path / "run")
        assert "diverged=true" in (run / "manifest.txt").read_text()

    def test_unwritable_dir(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError) as info:
            train(small_config(steps=1), blocker / "run")
        assert str(blocker) in str(info.value)
