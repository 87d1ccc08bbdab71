import json

import numpy as np
import pytest
import torch
from PIL import Image

from bbnet.core import ConfigError, ModelConfig, TrainConfig
from bbnet.dataset import scan_dataset
from bbnet.harness import (
    LOSS_COLUMNS,
    AblationError,
    ablate,
    apply_switch,
    cmd_eval,
    cmd_predict,
    read_loss_log,
    seed_everything,
    train,
)
from bbnet.network import BBNet, load_checkpoint, state_hash


def _cfgs(tmp_path, synth_root, **kw):
    base = dict(learning_rate=0.03, batch_size=4, max_steps=4, seed=1, checkpoint_every=2,
                data_root=str(synth_root), out_dir=str(tmp_path / "run"))
    base.update(kw)
    return ModelConfig.tiny(), TrainConfig(**base)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, synth_root):
    tmp = tmp_path_factory.mktemp("trained")
    m, t = _cfgs(tmp, synth_root)
    return train(m, t), tmp / "run"


class TestTrain:
    def test_outputs(self, trained):
        manifest, run = trained
        for name in ("config.txt", "loss_log.csv", "loss_curve.png", "manifest.json", "train_report.json"):
            assert (run / name).exists(), name
        assert [p.rsplit("/", 1)[1] for p in manifest.checkpoints] == ["step_000002.pt", "step_000004.pt", "final.pt"]
        rows = read_loss_log(manifest.loss_log)
        assert [r["step"] for r in rows] == [1, 2, 3, 4]
        assert list(rows[0]) == list(LOSS_COLUMNS)
        for r in rows:
            parts = r["l_wbce_final"] + r["l_wiou_final"] + r["l_wbce_ofs"] + r["l_wiou_ofs"]
            assert r["l_total"] == pytest.approx(parts)

    def test_manifest(self, trained):
        manifest, run = trained
        data = json.loads((run / "manifest.json").read_text())
        assert data["seed"] == 1 and len(data["code_hash"]) == 64
        assert data["model_config"]["channels"] == 16
        assert data["final_checkpoint_hash"] == state_hash(load_checkpoint(manifest.checkpoints[-1]))
        report = json.loads((run / "train_report.json").read_text())
        assert report["n_images"] == 12

    def test_same_seed_same_checkpoint(self, trained, tmp_path, synth_root):
        manifest, _ = trained
        m, t = _cfgs(tmp_path, synth_root)
        again = train(m, t, evaluate=False)
        assert again.final_checkpoint_hash == manifest.final_checkpoint_hash

    def test_zero_steps_keeps_init(self, tmp_path, synth_root):
        m, t = _cfgs(tmp_path, synth_root, max_steps=0)
        manifest = train(m, t, evaluate=False)
        seed_everything(1)
        assert manifest.final_checkpoint_hash == state_hash(BBNet(m))

    def test_missing_data_root(self, tmp_path):
        with pytest.raises(ConfigError):
            train(ModelConfig.tiny(), TrainConfig(out_dir=str(tmp_path / "run")))
        assert not (tmp_path / "run").exists()

    def test_empty_dataset(self, tmp_path):
        (tmp_path / "data").mkdir()
        with pytest.raises(ConfigError):
            train(ModelConfig.tiny(), TrainConfig(data_root=str(tmp_path / "data"), out_dir=str(tmp_path / "run")))


class TestPredictEval:
    def test_predict_files(self, trained, synth_root, tmp_path):
        manifest, _ = trained
        group_dir = scan_dataset(synth_root)[0].image_paths[0].parent
        written = cmd_predict(manifest.checkpoints[-1], group_dir, tmp_path / "pred")
        assert sorted(p.name for p in written) == sorted(p.name for p in group_dir.glob("*.png"))
        for p in written:
            arr = np.asarray(Image.open(p))
            assert arr.dtype == np.uint8 and arr.shape == (96, 96)
        again = cmd_predict(manifest.checkpoints[-1], group_dir, tmp_path / "pred2")
        for a, b in zip(written, again):
            assert a.read_bytes() == b.read_bytes()

    def test_predict_native_size(self, trained, tmp_path):
        manifest, _ = trained
        (tmp_path / "grp").mkdir()
        for i in range(2):
            Image.fromarray(np.zeros((50, 70, 3), np.uint8)).save(tmp_path / "grp" / f"x{i}.jpg")
        written = cmd_predict(manifest.checkpoints[-1], tmp_path / "grp", tmp_path / "out")
        assert [p.name for p in written] == ["x0.png", "x1.png"]
        assert np.asarray(Image.open(written[0])).shape == (50, 70)

    def test_predict_empty_dir(self, trained, tmp_path):
        with pytest.raises(FileNotFoundError):
            cmd_predict(trained[0].checkpoints[-1], tmp_path, tmp_path / "out")

    def test_self_eval(self, synth_root, tmp_path):
        mask_dir = scan_dataset(synth_root)[0].mask_paths[0].parent
        report = cmd_eval(mask_dir, mask_dir, tmp_path / "r.json")
        summary = json.loads((tmp_path / "r.json").read_text())
        assert summary["mae"] == 0 and summary["f_max"] == 1
        assert len((tmp_path / "r_per_image.csv").read_text().splitlines()) == len(report.per_image) + 1


class TestAblation:
    @pytest.mark.parametrize("switch,check", [
        ("no_cfe", lambda m, t: not m.use_cfe),
        ("no_ofs", lambda m, t: not m.use_ofs),
        ("no_lgr", lambda m, t: not m.use_lgr),
        ("no_gamma", lambda m, t: not m.learn_gamma),
        ("consensus_off", lambda m, t: not m.group_consensus),
        ("bce_only", lambda m, t: t.bce_only),
        ("iters=0", lambda m, t: m.multiview_iters == 0),
        ("iters=3", lambda m, t: m.multiview_iters == 3),
        ("top_n=4", lambda m, t: m.lgr_top_n == 4),
    ])
    def test_switches(self, switch, check):
        assert check(*apply_switch(ModelConfig.tiny(), TrainConfig(), switch))

    @pytest.mark.parametrize("switch", ["no_backbone", "iters=4", "top_n=0", "top_n=x", "no_cfe=1", ""])
    def test_bad_switch(self, switch):
        with pytest.raises(AblationError):
            apply_switch(ModelConfig.tiny(), TrainConfig(), switch)

    def test_no_gamma_fixes_one(self):
        m, _ = apply_switch(ModelConfig.tiny(), TrainConfig(), "no_gamma")
        net = BBNet(m)
        assert net.ofs.gamma.item() == 1.0 and "ofs.gamma" not in dict(net.named_parameters())

    def test_side_by_side(self, tmp_path, synth_root):
        m, t = _cfgs(tmp_path, synth_root, max_steps=2)
        rows = ablate(m, t, ["no_lgr", "iters=0"])
        assert list(rows) == ["full", "no_lgr", "iters=0"]
        for name in ("ablation.json", "ablation.csv", "ablation.png"):
            assert (tmp_path / "run" / name).exists()
        assert (tmp_path / "run" / "iters_0" / "manifest.json").exists()
        assert set(rows["full"]) == {"s_alpha", "mae", "e_max", "f_max", "e_mean", "f_mean", "final_loss"}
