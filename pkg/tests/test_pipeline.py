"""Training phases, checkpoints, evaluation, prediction and configuration."""

import dataclasses

import numpy as np
import pytest

from msedensenet import checkpoint as ckpt
from msedensenet import data as D
from msedensenet import metrics as M
from msedensenet import nn
from msedensenet import pipeline as P
from msedensenet.optim import LrSchedule, classification_schedule, schedule_epoch

TINY = dict(
    synth_train_per_class=6,
    synth_val_per_class=2,
    cls_epochs=3,
    reg_epochs=3,
    fusion_epochs=3,
)


@pytest.fixture(scope="module")
def tiny_data():
    cfg = P.load_config(**TINY)
    return P.load_data(cfg)


@pytest.fixture(scope="module")
def backbones(tiny_data):
    cfg = P.load_config(**TINY)
    train, val = tiny_data
    cls_net, cls_hist = P.train_backbone(cfg, "classification", train, val)
    reg_net, reg_hist = P.train_backbone(cfg, "regression", train, val)
    return cls_net, reg_net, cls_hist, reg_hist


@pytest.fixture(scope="module")
def fusion_model(backbones):
    cls_net, reg_net, _, _ = backbones
    return nn.FusionModel(cls_net, reg_net, nn.build_fusion_mlp(24, 24, seed=3))


class TestConfig:
    def test_defaults_are_desk(self):
        cfg = P.load_config()
        spec = cfg.network_spec("classification")
        assert spec.input_size == (32, 32, 3)
        assert (spec.growth_rate, spec.modules_per_block, spec.num_dense_blocks, spec.se_ratio) == (6, 2, 2, 4)
        assert (cfg.cls_epochs, cfg.reg_epochs, cfg.fusion_epochs, cfg.cls_batch_size) == (30, 15, 15, 8)

    def test_full_scale_profile(self):
        cfg = P.load_config(profile="paper")
        assert cfg.network_spec("regression") == nn.NetworkSpec.full_scale("regression")
        phases = P.phases_from_config(cfg)
        assert phases["classification"].optimizer == "sgd" and phases["classification"].epochs == 250
        assert phases["classification"].batch_size == 2 and phases["regression"].epochs == 50
        assert phases["regression"].optimizer == "adam" and phases["fusion"].optimizer == "adam"
        assert phases["fusion"].schedule.plateau_patience == 4
        assert phases["fusion"].schedule.plateau_factor == 0.1
        assert schedule_epoch(phases["classification"].schedule, 151)[0] == pytest.approx(1e-4)

    def test_file_parsing(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# desk run\nseed = 42\naugment=no  # trailing comment\ncls_lr=0.005\n\noutput_dir=out dir\n")
        cfg = P.load_config(str(path))
        assert (cfg.seed, cfg.augment, cfg.cls_lr, cfg.output_dir) == (42, False, 0.005, "out dir")

    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed=1\n")
        assert P.load_config(str(path), seed=9).seed == 9

    @pytest.mark.parametrize(
        "text,match",
        [("colour=blue\n", "unknown config key"), ("seed=abc\n", "expected int"), ("augment=maybe\n", "boolean"), ("seed\n", "key=value")],
    )
    def test_errors_name_the_line(self, tmp_path, text, match):
        path = tmp_path / "bad.cfg"
        path.write_text("# header\n" + text)
        with pytest.raises(ValueError, match=match) as info:
            P.load_config(str(path))
        assert ":2:" in str(info.value)

    def test_unknown_profile(self):
        with pytest.raises(ValueError, match="profile"):
            P.load_config(profile="cluster")

    def test_text_round_trip(self, tmp_path):
        cfg = dataclasses.replace(P.load_config(), seed=5, augment=False)
        path = tmp_path / "c.cfg"
        path.write_text(cfg.to_text())
        assert P.load_config(str(path)) == cfg

    def test_derive_seed(self):
        assert P.derive_seed(1, "a", 3) == P.derive_seed(1, "a", 3)
        assert len({P.derive_seed(1, "a"), P.derive_seed(1, "b"), P.derive_seed(2, "a")}) == 3


class TestTrainPhase:
    def test_invalid_phase(self):
        with pytest.raises(ValueError):
            P.TrainPhase("warmup", "sgd", 1, 2, LrSchedule(), "cce")
        with pytest.raises(ValueError):
            P.TrainPhase("fusion", "rmsprop", 1, 2, LrSchedule(), "cce")

    def test_history_and_checkpoint(self, tiny_data, tmp_path):
        train, val = tiny_data
        net = nn.build_sedensenet(nn.NetworkSpec.desk(), seed=1)
        phase = P.TrainPhase("classification", "sgd", 3, 8, classification_schedule(3, 0.01), "cce", True, False)
        path = tmp_path / "best.msed"
        net, hist = P.train_phase(net, train, val, phase, seed=0, checkpoint_path=path)
        assert [r.epoch for r in hist.records] == [1, 2, 3]
        assert hist.records[0].improved and path.exists()
        loaded = P.read_checkpoint(path)
        assert float(loaded.meta["best_val"]) == max(hist.val_metrics)
        assert int(loaded.meta["epoch"]) == hist.best.epoch
        assert isinstance(loaded.optimizer_state, P.SgdState)
        assert loaded.rng() is not None

    def test_lr_follows_schedule(self, backbones):
        _, _, cls_hist, reg_hist = backbones
        sched = classification_schedule(3, 0.01, 0.7)
        for rec in cls_hist.records:
            assert (rec.lr, rec.momentum) == schedule_epoch(sched, rec.epoch, cls_hist.val_losses[: rec.epoch - 1])
        assert all(r.lr == 0.001 for r in reg_hist.records)

    def test_fusion_plateau_lr(self, tiny_data, fusion_model):
        train, val = tiny_data
        phase = P.TrainPhase("fusion", "adam", 6, 8, LrSchedule(0.001, plateau_patience=1, plateau_factor=0.1), "cce")
        _, hist = P.train_phase(fusion_model, train, val, phase, seed=0)
        for rec in hist.records:
            assert rec.lr == schedule_epoch(phase.schedule, rec.epoch, hist.val_losses[: rec.epoch - 1])[0]

    def test_best_weights_restored(self, tiny_data):
        train, val = tiny_data
        net = nn.build_sedensenet(nn.NetworkSpec.desk("regression"), seed=2)
        phase = P.TrainPhase("regression", "adam", 3, 8, LrSchedule(0.001), "mse")
        net, hist = P.train_phase(net, train, val, phase, seed=0)
        out = P.model_outputs(net, val.images)
        val_mse = float(((out[:, 0] - val.regression_targets) ** 2).mean())
        assert val_mse == pytest.approx(min(hist.val_metrics), rel=1e-5)
        assert hist.best.val_metric == min(hist.val_metrics)

    def test_fusion_never_touches_backbones(self, tiny_data, backbones):
        train, val = tiny_data
        cls_net, reg_net, _, _ = backbones
        before = {k: v.copy() for net in (cls_net, reg_net) for k, v in net.state_dict().items()}
        cfg = P.load_config(**TINY)
        for augment in (False, True):
            P.train_fusion(dataclasses.replace(cfg, fusion_augment=augment, fusion_epochs=2), cls_net, reg_net, train, val)
            after = {k: v for net in (cls_net, reg_net) for k, v in net.state_dict().items()}
            assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_refuses_mismatched_input_sizes(self, tiny_data, backbones):
        train, val = tiny_data
        spec = dataclasses.replace(nn.NetworkSpec.desk("regression"), input_size=(16, 16, 3))
        other = nn.build_sedensenet(spec, seed=0)
        with pytest.raises(ValueError, match="different input sizes"):
            P.train_fusion(P.load_config(**TINY), backbones[0], other, train, val)

    def test_regression_ranks_extreme_stages(self, tiny_data):
        train, val = tiny_data
        net, _ = P.train_backbone(P.load_config(**dict(TINY, reg_epochs=15)), "regression", train, val)
        sev = P.severity_by_stage(net, val)
        assert sev[4] > sev[0]

    def test_nan_loss_names_layer(self, tiny_data):
        train, val = tiny_data
        net = nn.build_sedensenet(nn.NetworkSpec.desk(), seed=1)
        net.blocks[0].layers[1].conv.weight.data[:] = np.nan
        phase = P.TrainPhase("classification", "sgd", 1, 8, LrSchedule(0.01), "cce")
        with pytest.raises(FloatingPointError, match=r"blocks\.0\.layers\.1\.conv"):
            P.train_phase(net, train, val, phase, seed=0)

    def test_empty_split(self, tiny_data):
        train, _ = tiny_data
        empty = train.subset([])
        net = nn.build_sedensenet(nn.NetworkSpec.desk(), seed=1)
        with pytest.raises(ValueError, match="non-empty"):
            P.train_phase(net, train, empty, P.phases_from_config(P.load_config())["classification"], seed=0)


class TestCheckpoint:
    def test_round_trip_bitwise(self, fusion_model, tmp_path):
        path = tmp_path / "fusion.msed"
        P.save_checkpoint(fusion_model, path)
        loaded = P.load_checkpoint(path)
        x = np.random.default_rng(0).uniform(0, 1, (10, 3, 32, 32)).astype(np.float32)
        for a, b in zip(fusion_model.predict(x), loaded.predict(x)):
            assert np.array_equal(a, b)

    def test_backbone_round_trip(self, backbones, tmp_path):
        cls_net = backbones[0]
        P.save_checkpoint(cls_net, tmp_path / "cls.msed")
        loaded = P.load_checkpoint(tmp_path / "cls.msed")
        assert loaded.spec == cls_net.spec
        x = np.random.default_rng(1).uniform(0, 1, (4, 3, 32, 32)).astype(np.float32)
        assert np.array_equal(P.model_outputs(cls_net, x), P.model_outputs(loaded, x))

    def test_size_bound(self, fusion_model, tmp_path):
        path = tmp_path / "fusion.msed"
        P.save_checkpoint(fusion_model, path)
        n_floats = sum(v.size for v in fusion_model.state_dict().values())
        assert n_floats * 4 < path.stat().st_size < 10 * 1024 * 1024

    def test_bad_magic(self, fusion_model, tmp_path):
        path = tmp_path / "m.msed"
        P.save_checkpoint(fusion_model, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(ckpt.CheckpointError, match="magic"):
            P.load_checkpoint(path)

    def test_future_version(self):
        buf = bytearray(ckpt.encode({"kind": "backbone"}, {}))
        buf[4:8] = (ckpt.VERSION + 1).to_bytes(4, "little")
        with pytest.raises(ckpt.CheckpointError, match="newer"):
            ckpt.decode(bytes(buf))

    def test_truncated_and_corrupt(self):
        buf = ckpt.encode({"a": "1"}, {"t": np.arange(6, dtype=np.float32).reshape(2, 3)})
        with pytest.raises(ckpt.CheckpointError):
            ckpt.decode(buf[:-7])
        flipped = bytearray(buf)
        flipped[20] ^= 0xFF
        with pytest.raises(ckpt.CheckpointError, match="CRC"):
            ckpt.decode(bytes(flipped))

    def test_container_round_trip(self):
        tensors = {"w": np.arange(24, dtype=np.float32).reshape(2, 3, 4), "s": np.array(3.5, dtype=np.float32)}
        meta, back = ckpt.decode(ckpt.encode({"k": "v=w"}, tensors))
        assert meta == {"k": "v=w"}
        assert all(np.array_equal(back[k], tensors[k]) and back[k].shape == tensors[k].shape for k in tensors)

    def test_shape_mismatch_vs_spec(self, backbones, tmp_path):
        cls_net = backbones[0]
        meta = P._model_meta(cls_net)
        meta["spec.growth_rate"] = "7"
        tensors = {f"model.{k}": v for k, v in cls_net.state_dict().items()}
        ckpt.write(tmp_path / "x.msed", meta, tensors)
        with pytest.raises(ckpt.CheckpointError, match="do not match"):
            P.load_checkpoint(tmp_path / "x.msed")


class TestEvaluateAndPredict:
    def test_memorized_set(self):
        ds = D.synth_generate(2, 32, seed=4)
        # 120 optimizer steps are too few for 0.99 running statistics to settle
        spec = dataclasses.replace(nn.NetworkSpec.desk(), bn_momentum=0.9)
        net = nn.build_sedensenet(spec, seed=0)
        phase = P.TrainPhase("classification", "adam", 60, 5, LrSchedule(0.003), "cce")
        net, _ = P.train_phase(net, ds, ds, phase, seed=0, l2=0.0)
        cm, rep = P.evaluate(net, ds)
        assert rep.accuracy == 1.0 and cm.total == len(ds)

    def test_report_matches_metrics(self, tiny_data, fusion_model):
        _, val = tiny_data
        cm, rep = P.evaluate(fusion_model, val)
        assert cm.total == len(val) and cm.counts.shape == (5, 5)
        assert rep == M.report(cm, D.STAGE_NAMES)

    def test_evaluate_is_deterministic(self, tiny_data, fusion_model):
        _, val = tiny_data
        assert P.evaluate(fusion_model, val)[0] == P.evaluate(fusion_model, val)[0]

    def test_evaluate_rejects_regression_and_empty(self, tiny_data, backbones):
        _, val = tiny_data
        with pytest.raises(ValueError):
            P.evaluate(backbones[1], val)
        with pytest.raises(ValueError, match="empty"):
            P.evaluate(backbones[0], val.subset([]))

    def test_predict(self, tiny_data, fusion_model):
        _, val = tiny_data
        for sample in val:
            probs, severity = P.predict(fusion_model, sample.image)
            assert probs.shape == (5,) and abs(probs.sum() - 1.0) <= 1e-6
            assert 0 <= int(np.argmax(probs)) <= 4
            assert isinstance(severity, float) and np.isfinite(severity)

    def test_predict_wrong_size(self, fusion_model):
        with pytest.raises(ValueError, match="wrong input size"):
            P.predict(fusion_model, np.zeros((3, 16, 16)))


class TestOrchestration:
    def test_train_multitask_outputs(self, tmp_path):
        cfg = P.load_config(output_dir=str(tmp_path / "run"), **TINY)
        result = P.train_multitask(cfg)
        assert result.confusion.counts.shape == (5, 5)
        assert result.model.mlp.in_dim == 48
        assert set(result.histories) == {"classification", "regression", "fusion"}
        for name in ("report.txt", "report.jsonl", "confusion.csv", "history.jsonl", "cls_best.msed", "reg_best.msed", "fusion_best.msed"):
            assert (tmp_path / "run" / name).exists(), name
        assert M.ConfusionMatrix.from_csv(tmp_path / "run" / "confusion.csv") == result.confusion

    def test_strict_reruns_identical(self, tmp_path):
        outputs = []
        for run in ("a", "b"):
            cfg = P.load_config(output_dir=str(tmp_path / run), strict_determinism=True, **TINY)
            P.train_multitask(cfg)
            outputs.append({n: (tmp_path / run / n).read_bytes() for n in ("report.jsonl", "history.jsonl", "fusion_best.msed")})
        assert outputs[0] == outputs[1]

    def test_different_seeds_differ(self):
        a = P.load_data(P.load_config(seed=1, **TINY))[0]
        b = P.load_data(P.load_config(seed=2, **TINY))[0]
        assert not np.array_equal(a.images, b.images)

    def test_folder_data_source(self, tmp_path):
        D.export_dataset(D.synth_generate(4, 32, seed=1), tmp_path / "imgs")
        cfg = P.load_config(data_dir=str(tmp_path / "imgs"), train_fraction=0.75)
        train, val = P.load_data(cfg)
        assert (len(train), len(val)) == (15, 5)


def test_classification_loss_decreases_early():
    """Desk classification phase: training loss strictly decreases over the
    first three epochs for at least four of five seeds."""
    decreasing = 0
    cfg = P.load_config()
    phase = dataclasses.replace(P.phases_from_config(cfg)["classification"], epochs=3)
    phase = dataclasses.replace(phase, schedule=classification_schedule(10, cfg.cls_lr, cfg.cls_momentum))
    for seed in range(1, 6):
        run_cfg = dataclasses.replace(cfg, seed=seed)
        train, val = P.load_data(run_cfg)
        net = nn.build_sedensenet(run_cfg.network_spec("classification"), P.derive_seed(seed, "init", "classification"))
        _, hist = P.train_phase(net, train, val, phase, P.derive_seed(seed, "classification"), cfg.l2, cfg.augment_policy())
        losses = [r.train_loss for r in hist.records]
        decreasing += all(b < a for a, b in zip(losses, losses[1:]))
    assert decreasing >= 4
