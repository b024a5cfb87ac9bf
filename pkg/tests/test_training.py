import json
import math

import numpy as np
import pytest

from dunet import checkpoint
from dunet.autodiff import ShapeError
from dunet.experiments import ExperimentConfig, compare, load_split, run_eval, run_train, standardize
from dunet.nets import ModelSpec, build_model
from dunet.training import (ArrayDataset, ConfigError, TrainConfig, TrainingError, infer, loss_csv,
                            thread_count, train)


def tiny_config(tmp_path, kind="dunet", seed=0, epochs=3, **data):
    ds = {"layout": "synthetic", "size": 32, "target": "od",
          "synthetic": {"task": "fundus", "n_train": 6, "n_test": 3, "seed": 4, "size": 64}}
    ds.update(data)
    return ExperimentConfig.from_dict({
        "seed": seed, "output_dir": str(tmp_path / f"{kind}_{seed}"), "dataset": ds,
        "scattering": {"J": 2, "L": 2, "order": 2},
        "model": {"kind": kind, "base_channels": 4},
        "train": {"lr": 3e-3, "epochs": epochs, "batch_size": 4}})


def toy_data(rng, n=4, size=16):
    imgs = rng.random((n, 1, size, size)).astype(np.float32)
    masks = (imgs > 0.5).astype(np.float32)
    return ArrayDataset(imgs, masks)


def toy_model(seed=0):
    return build_model(ModelSpec("unet", 1, 2, 1, 0, (16, 16), zero_head=False), seed=seed)


class TestTrainConfig:
    def test_all_problems_listed(self):
        with pytest.raises(ConfigError) as exc:
            TrainConfig(lr=-1, epochs=-2, batch_size=0, loss_kind="l2", optimizer="rmsprop").validate()
        msg = str(exc.value)
        for key in ("lr", "epochs", "batch_size", "loss_kind", "optimizer"):
            assert f"train.{key}" in msg

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="unknown"):
            TrainConfig.from_dict({"learning_rate": 1})


class TestTrain:
    def test_loss_decreases_and_is_deterministic(self):
        runs = []
        for _ in range(2):
            g = toy_model()
            r = train(g, toy_data(np.random.default_rng(0)), TrainConfig(epochs=15, batch_size=2, seed=3))
            runs.append((r.losses, checkpoint.dumps(g.state_dict())))
        assert runs[0] == runs[1]
        assert runs[0][0][-1] < runs[0][0][0]

    def test_seed_changes_order(self):
        losses = []
        for seed in (1, 2):
            g = toy_model()
            losses.append(train(g, toy_data(np.random.default_rng(0)),
                                TrainConfig(epochs=2, batch_size=1, seed=seed)).losses)
        assert losses[0] != losses[1]

    def test_artifacts(self, tmp_path):
        g = toy_model()
        r = train(g, toy_data(np.random.default_rng(0)), TrainConfig(epochs=2, seed=9), tmp_path,
                  header={"kind": "unet"})
        text = (tmp_path / "loss.csv").read_text()
        assert text.startswith("# seed=9\n# kind=unet\nepoch,loss\n1,")
        assert len(text.strip().splitlines()) == 5
        assert checkpoint.load(r.checkpoint_path).keys() == g.params.keys()

    def test_warm_start_zero_epochs_is_identity(self, tmp_path):
        rng = np.random.default_rng(1)
        data = toy_data(rng)
        g = toy_model(seed=1)
        train(g, data, TrainConfig(epochs=3), tmp_path)
        before = infer(g, data.images)
        fresh = toy_model(seed=99)
        train(fresh, data, TrainConfig(epochs=0, warm_start_checkpoint=str(tmp_path / "model.sgw")))
        np.testing.assert_array_equal(infer(fresh, data.images), before)

    def test_incompatible_warm_start_lists_params(self, tmp_path):
        g = toy_model()
        checkpoint.save(tmp_path / "m.sgw", g.state_dict())
        other = build_model(ModelSpec("unet", 1, 3, 1, 0, (16, 16)))
        with pytest.raises(ShapeError) as exc:
            train(other, toy_data(np.random.default_rng(0)),
                  TrainConfig(epochs=1, warm_start_checkpoint=str(tmp_path / "m.sgw")))
        assert "enc0.conv1.w" in str(exc.value) and "head.w" in str(exc.value)

    def test_nan_aborts_with_diagnostics(self):
        g = toy_model()
        g.params["enc0.conv2.w"].value[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingError) as exc:
            train(g, toy_data(np.random.default_rng(0)), TrainConfig(epochs=1))
        assert "epoch 1" in str(exc.value) and "enc0.conv2.w" in str(exc.value)

    def test_empty_dataset(self):
        with pytest.raises(ConfigError, match="empty"):
            ArrayDataset(np.zeros((0, 1, 4, 4)), np.zeros((0, 1, 4, 4)))


class TestInfer:
    def test_open_interval_and_repeatable(self):
        g = toy_model()
        x = np.random.default_rng(0).random((3, 1, 16, 16)) * 1e4
        a, b = infer(g, x), infer(g, x)
        assert a.shape == (3, 1, 16, 16)
        assert np.all((a > 0) & (a < 1)) and np.all(np.isfinite(a))
        assert a.tobytes() == b.tobytes()

    def test_missing_sc(self):
        g = build_model(ModelSpec("dunet", 1, 2, 1, 9, (16, 16)))
        with pytest.raises(ValueError, match="scattering"):
            infer(g, np.zeros((1, 1, 16, 16)))


def test_thread_env(monkeypatch):
    monkeypatch.setenv("DUNET_NUM_THREADS", "2")
    assert thread_count() == 2
    monkeypatch.setenv("DUNET_NUM_THREADS", "zero")
    with pytest.raises(ConfigError):
        thread_count()


def test_loss_csv_format():
    assert loss_csv([0.5, 0.25], {"seed": 1}) == "# seed=1\nepoch,loss\n1,0.5\n2,0.25\n"


class TestExperimentConfig:
    def test_round_trip(self, tmp_path):
        cfg = tiny_config(tmp_path)
        again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
        assert again.to_json() == cfg.to_json()

    def test_derived_spec(self, tmp_path):
        spec = tiny_config(tmp_path).model_spec()
        assert spec.depth == 2 and spec.sc_channels == 27 and spec.input_size == (32, 32)

    def test_problems_listed_together(self, tmp_path):
        d = json.loads(tiny_config(tmp_path).to_json())
        d["model"]["depth"] = 3
        d["train"]["lr"] = 0
        d["eval"]["threshold"] = 2
        with pytest.raises(ConfigError) as exc:
            ExperimentConfig.from_dict(d).validate()
        msg = str(exc.value)
        assert "bottleneck spatial mismatch" in msg and "train.lr" in msg and "threshold" in msg

    def test_missing_root(self, tmp_path):
        d = json.loads(tiny_config(tmp_path).to_json())
        d["dataset"].update(root=str(tmp_path / "absent"), synthetic=None)
        with pytest.raises(ConfigError, match="does not exist"):
            ExperimentConfig.from_dict(d).validate()

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown"):
            ExperimentConfig.from_dict({"optimiser": {}})

    def test_seed_override(self, tmp_path):
        cfg = tiny_config(tmp_path).with_overrides(seed=5)
        assert cfg.seed == 5 and cfg.train.seed == 5


def test_standardize():
    x = np.random.default_rng(0).random((2, 3, 8, 8)) * 5 + 2
    z = standardize(x)
    np.testing.assert_allclose(z.mean(axis=(2, 3)), 0, atol=1e-6)
    np.testing.assert_allclose(z.std(axis=(2, 3)), 1, atol=1e-5)
    assert np.all(standardize(np.ones((1, 1, 4, 4))) == 0)


class TestRuns:
    @pytest.mark.filterwarnings("ignore:.*Hausdorff undefined")
    def test_train_and_eval(self, tmp_path):
        cfg = tiny_config(tmp_path, epochs=2)
        split = load_split(cfg, "train", True)
        assert split.raw.shape == (6, 3, 32, 32) and split.sc.shape == (6, 27, 8, 8)
        run_train(cfg, split)
        rep = run_eval(cfg)
        out = tmp_path / "dunet_0"
        for f in ("config.json", "model.sgw", "loss.csv", "eval/metrics.csv", "eval/summary.json"):
            assert (out / f).is_file()
        assert len(list((out / "eval" / "masks").glob("*.png"))) == 3
        assert len(rep.per_sample) == 3
        assert all(math.isfinite(r.entropy) for r in rep.per_sample)

    def test_compare(self, tmp_path):
        aggs = [("unet", {"d": 1}, {"dice": {"mean": 0.9, "std": 0.01, "n": 3}}),
                ("dunet", {"d": 1}, {"dice": {"mean": 0.95, "std": 0.02, "n": 3}}),
                ("dunet", {"d": 1}, {"dice": {"mean": 0.97, "std": 0.0, "n": 3}})]
        table = compare(aggs).splitlines()
        assert table[0].startswith("model,runs,dice,miou")
        assert table[1].startswith("unet,1,0.9000±0.0100")
        assert table[2].startswith("dunet,2,0.9600±0.0100")

    def test_compare_mismatch(self):
        with pytest.raises(ConfigError, match="mismatched datasets"):
            compare([("unet", {"d": 1}, {}), ("dunet", {"d": 2}, {})])
