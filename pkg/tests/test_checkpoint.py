"""Checkpoint container tests: bit-exact round trip, corruption handling."""

import numpy as np
import pytest

from hicomex.checkpoint import (load_checkpoint, load_sidecar, save_checkpoint,
                                save_sidecar)
from hicomex.errors import CheckpointError


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        entries = {
            "backbone.patch.shared.conv.weight": rng.normal(size=(4, 1, 3, 3)),
            "au_head.bias": rng.normal(size=12),
            "scalar.like": np.array(3.25),
            "momentum/au_head.bias": rng.normal(size=12) * 1e-8,
        }
        path = tmp_path / "model.hcmx"
        save_checkpoint(path, "f" * 64, entries)
        digest, loaded = load_checkpoint(path)
        assert digest == "f" * 64
        assert list(loaded) == list(entries)
        for name in entries:
            assert loaded[name].shape == entries[name].shape
            assert np.array_equal(loaded[name], entries[name])
            assert loaded[name].tobytes() == entries[name].tobytes()

    def test_deterministic_bytes(self, tmp_path):
        entries = {"a.weight": np.linspace(0, 1, 7), "b.bias": np.zeros(3)}
        save_checkpoint(tmp_path / "one.hcmx", "0" * 64, entries)
        save_checkpoint(tmp_path / "two.hcmx", "0" * 64, entries)
        assert (tmp_path / "one.hcmx").read_bytes() == \
            (tmp_path / "two.hcmx").read_bytes()

    def test_magic_bytes_present(self, tmp_path):
        save_checkpoint(tmp_path / "m.hcmx", "0" * 64, {"w": np.ones(2)})
        assert (tmp_path / "m.hcmx").read_bytes()[:4] == b"HCMX"

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "bad.hcmx").write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "bad.hcmx")

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "t.hcmx"
        save_checkpoint(path, "0" * 64, {"w": np.ones(2)})
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_sidecar_round_trip(self, tmp_path):
        meta = {"stage": 2, "epochs_completed": 3, "lr": 0.003,
                "history": [{"epoch": 0, "train_loss": 1.5}]}
        save_sidecar(tmp_path / "m.json", meta)
        assert load_sidecar(tmp_path / "m.json") == meta
