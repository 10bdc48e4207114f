import os

import numpy as np
import pytest

from laddermoe import training as TR
from laddermoe.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from laddermoe.decoder import DecoderConfig
from laddermoe.encoder import EncoderConfig
from laddermoe.errors import FormatError, ParameterError
from laddermoe.model import Recognizer
from laddermoe.rng import rng_for


def tiny_model(seed=0, num_classes=3):
    enc = EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2,
                        adapter_layers=(0, 1), num_experts=4, top_k=2, expert_bottleneck=3)
    dec = DecoderConfig(num_permutations=3, max_label_len=2, vocab_size=num_classes + 3)
    return Recognizer.init(enc, dec, seed=seed)


def toy_data(n=24, num_classes=3, seed=0):
    rng = np.random.default_rng(seed)
    # class-dependent images so the task is learnable
    cats = rng.integers(0, num_classes, size=n)
    imgs = rng.random((n, 8, 8)) * 0.1
    for i, c in enumerate(cats):
        imgs[i, :, c * 2 : c * 2 + 2] += 0.9
    return TR.LabeledCrops.from_single_labels(np.clip(imgs, 0, 1), cats)


@pytest.fixture
def cfg():
    return TR.TrainConfig(batch_size=8, plm_epochs=1, osf_epochs=1, pretrain_epochs=2, seed=5)


class TestConfig:
    def test_paper_scale_constants_accepted(self):
        TR.TrainConfig(plm_epochs=35, osf_epochs=5, batch_size=32).validate()

    @pytest.mark.parametrize("field,value", [
        ("batch_size", 0), ("plm_epochs", -1), ("osf_epochs", -1),
        ("learning_rate", 0.0), ("beta1", 1.0), ("weight_decay", -0.1),
    ])
    def test_rejects(self, field, value):
        cfg = TR.TrainConfig()
        setattr(cfg, field, value)
        with pytest.raises(ParameterError):
            cfg.validate()


class TestFreezePartition:
    def test_partition_law(self):
        model = tiny_model()
        frozen, trainable = TR.freeze_partition(model)
        assert frozen | trainable == set(model.params)
        assert not frozen & trainable

    def test_backbone_frozen_rest_trainable(self):
        model = tiny_model()
        frozen, trainable = TR.freeze_partition(model)
        for name in model.params:
            expected_frozen = name.startswith("backbone.")
            assert (name in frozen) == expected_frozen
            assert model.params[name].requires_grad != expected_frozen
        assert any(n.startswith("adapters.") and n.endswith("gate") for n in trainable)
        assert any(n.startswith("decoder.") for n in trainable)


class TestPretrain:
    def test_learns_two_category_toy(self):
        model = tiny_model(num_classes=2)
        data = toy_data(n=32, num_classes=2, seed=1)
        cfg = TR.TrainConfig(batch_size=8, pretrain_epochs=20, pretrain_lr=3e-3, seed=0)
        ckpt, _ = TR.pretrain_backbone(data, model, cfg, num_classes=2)
        assert ckpt.extra["train_accuracy"] > 0.9

    def test_zero_epochs_identity(self):
        model = tiny_model(seed=3)
        before = {n: p.array.copy() for n, p in model.params.items()}
        data = toy_data(seed=2)
        cfg = TR.TrainConfig(pretrain_epochs=0, seed=0)
        ckpt, stats = TR.pretrain_backbone(data, model, cfg, num_classes=3)
        assert stats == []
        for n, arr in before.items():
            np.testing.assert_array_equal(model.params[n].array, arr)

    def test_same_seed_same_checkpoint(self, cfg):
        data = toy_data(seed=3)
        cka, _ = TR.pretrain_backbone(data, tiny_model(seed=1), cfg, num_classes=3)
        ckb, _ = TR.pretrain_backbone(data, tiny_model(seed=1), cfg, num_classes=3)
        for n in cka.params:
            np.testing.assert_array_equal(cka.params[n], ckb.params[n])


class TestTrainEpoch:
    def test_frozen_tensors_bitwise_unchanged(self, cfg):
        model = tiny_model(seed=2)
        data = toy_data(seed=4)
        frozen, trainable = TR.freeze_partition(model)
        before = {n: model.params[n].array.copy() for n in frozen}
        opt = TR.Adam({n: model.params[n] for n in trainable}, cfg.learning_rate)
        TR.train_epoch(model, data, TR.PLM, cfg, opt, rng_for(0, "t"), epoch=0)
        for n in frozen:
            np.testing.assert_array_equal(model.params[n].array, before[n])

    def test_overfits_single_sample(self):
        model = tiny_model(seed=4)
        data = toy_data(n=1, seed=5)
        cfg = TR.TrainConfig(batch_size=1, learning_rate=3e-3, seed=0)
        _, trainable = TR.freeze_partition(model)
        opt = TR.Adam({n: model.params[n] for n in trainable}, cfg.learning_rate)
        rng = rng_for(0, "overfit")
        losses = [TR.train_epoch(model, data, TR.OSF, cfg, opt, rng, e).mean_loss for e in range(5)]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_osf_ignores_permutation_count(self):
        data = toy_data(seed=6)
        results = []
        for k in (1, 12):
            model = tiny_model(seed=6)
            model.dec_cfg.num_permutations = k
            cfg = TR.TrainConfig(batch_size=8, seed=3)
            _, trainable = TR.freeze_partition(model)
            opt = TR.Adam({n: model.params[n] for n in trainable}, cfg.learning_rate)
            st = TR.train_epoch(model, data, TR.OSF, cfg, opt, rng_for(3, "s"), 0)
            results.append(st.mean_loss)
        assert results[0] == results[1]

    def test_bad_phase(self, cfg):
        model = tiny_model()
        _, trainable = TR.freeze_partition(model)
        opt = TR.Adam({n: model.params[n] for n in trainable}, 1e-3)
        with pytest.raises(ParameterError):
            TR.train_epoch(model, toy_data(), "warmup", cfg, opt, rng_for(0, "x"))


class TestRunSchedule:
    def test_zero_epochs_untouched(self, tmp_path):
        model = tiny_model(seed=7)
        before = {n: p.array.copy() for n, p in model.params.items()}
        cfg = TR.TrainConfig(plm_epochs=0, osf_epochs=0, seed=1)
        final, stats = TR.run_schedule(model, toy_data(), cfg, ckpt_dir=tmp_path)
        assert stats == []
        for n, arr in before.items():
            np.testing.assert_array_equal(final.params[n], arr)

    def test_determinism(self, cfg, tmp_path):
        data = toy_data(seed=7)

        def run(sub):
            model = tiny_model(seed=8)
            d = tmp_path / sub
            d.mkdir()
            final, _ = TR.run_schedule(model, data, cfg, val_data=data, ckpt_dir=d)
            return final, d

        a, da = run("a")
        b, db = run("b")
        for n in a.params:
            np.testing.assert_array_equal(a.params[n], b.params[n])
        assert (da / "ckpt_final.bin").read_bytes() == (db / "ckpt_final.bin").read_bytes()

    def test_resume_equivalence(self, tmp_path):
        data = toy_data(seed=8)
        cfg = TR.TrainConfig(batch_size=8, plm_epochs=2, osf_epochs=2, seed=9)

        full_dir = tmp_path / "full"
        full_dir.mkdir()
        model = tiny_model(seed=9)
        TR.pretrain_backbone(data, model, cfg, num_classes=3, epochs=1)
        backbone = {n: p.array.copy() for n, p in model.params.items()}
        final_full, _ = TR.run_schedule(model, data, cfg, val_data=data, ckpt_dir=full_dir)

        # fresh model, same backbone; stop at the phase boundary, then resume
        part_dir = tmp_path / "part"
        part_dir.mkdir()
        model2 = tiny_model(seed=9)
        model2.load_arrays(backbone)
        cfg_stop = TR.TrainConfig(batch_size=8, plm_epochs=2, osf_epochs=0, seed=9)
        TR.run_schedule(model2, data, cfg_stop, val_data=data, ckpt_dir=part_dir)
        boundary = load_checkpoint(part_dir / "ckpt_plm.bin")

        model3 = tiny_model(seed=9)
        model3.load_arrays(backbone)
        resume_dir = tmp_path / "resume"
        resume_dir.mkdir()
        final_resumed, _ = TR.run_schedule(
            model3, data, cfg, val_data=data, ckpt_dir=resume_dir, resume=boundary
        )
        for n in final_full.params:
            np.testing.assert_array_equal(final_full.params[n], final_resumed.params[n])
        assert final_full.extra == final_resumed.extra
        assert (
            (full_dir / "ckpt_final.bin").read_bytes()
            == (resume_dir / "ckpt_final.bin").read_bytes()
        )


class TestCheckpointFormat:
    def make_ckpt(self, model, cfg):
        return Checkpoint(
            phase="plm", epoch=1, enc_cfg=model.enc_cfg, dec_cfg=model.dec_cfg,
            train_cfg=cfg, params={n: p.array.copy() for n, p in model.params.items()},
            rng_state=rng_for(0, "ck").bit_generator.state,
            optim_step=3,
            optim_m={"decoder.proj.w": np.ones((8, 6))},
            optim_v={"decoder.proj.w": np.full((8, 6), 0.5)},
        )

    def test_save_load_save_identical_bytes(self, tmp_path, cfg):
        model = tiny_model(seed=10)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        ckpt = self.make_ckpt(model, cfg)
        save_checkpoint(ckpt, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_values(self, tmp_path, cfg):
        model = tiny_model(seed=11)
        path = tmp_path / "c.bin"
        ckpt = self.make_ckpt(model, cfg)
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.phase == "plm" and loaded.epoch == 1
        assert loaded.rng_state == ckpt.rng_state
        assert loaded.optim_step == 3
        for n in ckpt.params:
            np.testing.assert_array_equal(loaded.params[n], ckpt.params[n])
        assert loaded.enc_cfg == model.enc_cfg
        assert loaded.dec_cfg == model.dec_cfg

    def test_truncated_file_rejected(self, tmp_path, cfg):
        model = tiny_model(seed=12)
        path = tmp_path / "d.bin"
        save_checkpoint(self.make_ckpt(model, cfg), path)
        raw = path.read_bytes()
        for cut in (3, 10, len(raw) // 2, len(raw) - 1):
            path.write_bytes(raw[:cut])
            with pytest.raises(FormatError):
                load_checkpoint(path)

    def test_trailing_garbage_rejected(self, tmp_path, cfg):
        model = tiny_model(seed=13)
        path = tmp_path / "e.bin"
        save_checkpoint(self.make_ckpt(model, cfg), path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "f.bin"
        path.write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(FormatError):
            load_checkpoint(path)
