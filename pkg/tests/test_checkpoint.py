import json

import numpy as np
import pytest

from src.model.checkpoint import (
    checkpoint_from_model,
    load_checkpoint,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from src.model.mmfnet import MMFNet
from src.tensor.optim import AdamW


@pytest.fixture
def trained_pair(toy_config):
    model = MMFNet(toy_config)
    optimizer = AdamW(list(model.named_parameters()), lr=1e-3)
    grads = {param: np.full(param.shape, 0.1, dtype=np.float32) for param in model.parameters()}
    optimizer.step(grads)
    return model, optimizer


class TestCheckpoint:
    def test_save_load_save_is_byte_identical(self, tmp_path, trained_pair):
        model, optimizer = trained_pair
        first = save_checkpoint(checkpoint_from_model(model, optimizer, 3, {"seed": 1}, {"val_loss": 0.5}),
                                tmp_path / "a.json")
        second = save_checkpoint(load_checkpoint(first), tmp_path / "b.json")

        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        manifest_a = json.loads(first.read_text())
        manifest_b = json.loads(second.read_text())
        manifest_a.pop("data_file"), manifest_b.pop("data_file")
        assert manifest_a == manifest_b

    def test_manifest_layout(self, tmp_path, trained_pair):
        model, _ = trained_pair
        path = save_checkpoint(checkpoint_from_model(model, iteration=5), tmp_path / "ckpt")
        manifest = json.loads(path.read_text())
        assert path.suffix == ".json"
        assert manifest["iteration"] == 5
        assert manifest["data_file"] == "ckpt.bin"
        first, second = manifest["tensors"][:2]
        assert first["offset"] == 0
        assert second["offset"] == first["len"]
        total = sum(entry["len"] for entry in manifest["tensors"])
        assert (tmp_path / "ckpt.bin").stat().st_size == 4 * total

    def test_restored_model_predicts_identically(self, tmp_path, trained_pair, rng):
        model, _ = trained_pair
        restored = restore_model(load_checkpoint(save_checkpoint(checkpoint_from_model(model), tmp_path / "m.json")))
        y_t, x_ct = rng.standard_normal((1, 1, 16, 16)), rng.standard_normal((1, 1, 16, 16))
        x_sdm = rng.standard_normal((1, 3, 16, 16))
        np.testing.assert_array_equal(restored.predict_noise(y_t, x_ct, x_sdm, 10),
                                      model.predict_noise(y_t, x_ct, x_sdm, 10))

    def test_optimizer_state_restores(self, tmp_path, trained_pair):
        model, optimizer = trained_pair
        checkpoint = load_checkpoint(save_checkpoint(checkpoint_from_model(model, optimizer), tmp_path / "o.json"))
        assert all(name.startswith("adam.") for name in checkpoint.optimizer_state())
        assert not any(name.startswith("adam.") for name in checkpoint.model_state())

        fresh = AdamW(list(model.named_parameters()), lr=1e-3)
        restore_optimizer(checkpoint, fresh)
        assert fresh.step_count == 1
        for key, value in optimizer.state_dict().items():
            np.testing.assert_array_equal(fresh.state_dict()[key], value)

    def test_optimizer_state_required(self, tmp_path, trained_pair):
        model, optimizer = trained_pair
        checkpoint = load_checkpoint(save_checkpoint(checkpoint_from_model(model), tmp_path / "w.json"))
        with pytest.raises(RuntimeError, match="no optimizer state"):
            restore_optimizer(checkpoint, optimizer)


class TestCheckpointErrors:
    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.json")

    def test_corrupt_manifest(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(RuntimeError, match="Unreadable"):
            load_checkpoint(tmp_path / "bad.json")

    def test_truncated_blob(self, tmp_path, trained_pair):
        model, _ = trained_pair
        path = save_checkpoint(checkpoint_from_model(model), tmp_path / "t.json")
        blob = tmp_path / "t.bin"
        blob.write_bytes(blob.read_bytes()[:-16])
        with pytest.raises(RuntimeError, match="inconsistent"):
            load_checkpoint(path)

    def test_weights_must_match_config(self, tmp_path, trained_pair, make_model_config):
        model, _ = trained_pair
        checkpoint = checkpoint_from_model(model)
        checkpoint.model_config = make_model_config(base_channels=8)
        with pytest.raises(RuntimeError, match="Inconsistent checkpoint"):
            restore_model(checkpoint)
