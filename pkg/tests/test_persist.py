"""Manifest and checkpoint persistence: roundtrips and corruption detection."""

import json

import numpy as np
import pytest

from scoregap import (
    RunManifest,
    init_mlp,
    linear_schedule,
    load_checkpoint,
    load_manifest,
    mlp_forward,
    preset_family,
    save_checkpoint,
    save_manifest,
    train_mlp,
)
from scoregap.persist import (
    CorruptArtifactError,
    HashMismatchError,
    VersionMismatchError,
)


class TestManifest:
    def _manifest(self):
        return RunManifest(config={"schedule": {"T": 10}}, master_seed=42)

    def test_roundtrip(self, tmp_path):
        m = self._manifest()
        path = save_manifest(m, tmp_path / "manifest.json")
        loaded = load_manifest(path)
        assert loaded.config == m.config
        assert loaded.master_seed == 42
        assert loaded.created == m.created

    def test_output_hashes_verify(self, tmp_path):
        m = self._manifest()
        out = tmp_path / "data.csv"
        out.write_text("a,b\n1,2\n")
        m.record_output(out, tmp_path)
        path = save_manifest(m, tmp_path / "manifest.json")
        load_manifest(path)  # verifies

        out.write_text("a,b\n1,3\n")  # tamper
        with pytest.raises(HashMismatchError):
            load_manifest(path)

    def test_missing_output_detected(self, tmp_path):
        m = self._manifest()
        out = tmp_path / "data.csv"
        out.write_text("x\n")
        m.record_output(out, tmp_path)
        path = save_manifest(m, tmp_path / "manifest.json")
        out.unlink()
        with pytest.raises(HashMismatchError):
            load_manifest(path)

    def test_future_version_rejected_naming_both(self, tmp_path):
        path = save_manifest(self._manifest(), tmp_path / "manifest.json")
        doc = json.loads(path.read_text())
        doc["format_version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(VersionMismatchError, match=r"99.*supports 1"):
            load_manifest(path)

    def test_corrupt_json(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("{not json")
        with pytest.raises(CorruptArtifactError):
            load_manifest(path)

    def test_save_load_save_is_byte_stable(self, tmp_path):
        path = save_manifest(self._manifest(), tmp_path / "m1.json")
        first = path.read_bytes()
        again = save_manifest(load_manifest(path), tmp_path / "m2.json")
        assert again.read_bytes() == first


class TestCheckpoint:
    def _model(self):
        return init_mlp(d=2, n_classes=3, hidden=(8, 4), n_freq=4, seed=9,
                        p_uncond=0.15, zero_final=False)

    def test_roundtrip_identical_parameters(self, tmp_path):
        m = self._model()
        path = save_checkpoint(m, tmp_path / "ckpt.txt")
        loaded = load_checkpoint(path)
        assert loaded.widths == m.widths
        assert loaded.p_uncond == m.p_uncond
        assert loaded.seed == m.seed
        for a, b in zip(m.weights + m.biases, loaded.weights + loaded.biases):
            np.testing.assert_array_equal(a, b)

    def test_loaded_model_forward_identical(self, tmp_path):
        s = linear_schedule(20, 1e-4, 0.02)
        m, _ = train_mlp(preset_family("bimodal-1d"), s, steps=30, batch=16, seed=2)
        loaded = load_checkpoint(save_checkpoint(m, tmp_path / "ckpt.txt"))
        x = np.random.default_rng(0).normal(size=(5, 1))
        out1, _ = mlp_forward(m, x, 3, 0)
        out2, _ = mlp_forward(loaded, x, 3, 0)
        np.testing.assert_array_equal(out1, out2)

    def test_flipped_byte_is_hash_mismatch(self, tmp_path):
        path = save_checkpoint(self._model(), tmp_path / "ckpt.txt")
        header, body = path.read_text().splitlines()
        mid = len(body) // 2
        flipped = body[:mid] + ("0" if body[mid] != "0" else "1") + body[mid + 1:]
        path.write_text(header + "\n" + flipped + "\n")
        with pytest.raises(HashMismatchError):
            load_checkpoint(path)

    def test_version_skew(self, tmp_path):
        path = save_checkpoint(self._model(), tmp_path / "ckpt.txt")
        header, body = path.read_text().splitlines()
        doc = json.loads(header)
        doc["format_version"] = 7
        path.write_text(json.dumps(doc) + "\n" + body + "\n")
        with pytest.raises(VersionMismatchError, match=r"7.*supports 1"):
            load_checkpoint(path)

    def test_truncated_file_corrupt(self, tmp_path):
        path = tmp_path / "ckpt.txt"
        path.write_text("{}")
        with pytest.raises(CorruptArtifactError):
            load_checkpoint(path)

    def test_wrong_parameter_count_corrupt(self, tmp_path):
        path = save_checkpoint(self._model(), tmp_path / "ckpt.txt")
        header, body = path.read_text().splitlines()
        doc = json.loads(header)
        blob = bytes.fromhex(body)[:-16]
        from scoregap.persist import sha256_bytes

        doc["param_sha256"] = sha256_bytes(blob)
        path.write_text(json.dumps(doc) + "\n" + blob.hex() + "\n")
        with pytest.raises(CorruptArtifactError, match="parameters"):
            load_checkpoint(path)
