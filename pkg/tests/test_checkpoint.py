"""Raw-blob checkpoint format: byte-exact round trips, verified manifests."""

import json

import numpy as np
import pytest

from refconv.checkpoint import (Checkpoint, CheckpointError, MANIFEST_NAME,
                                load_checkpoint, save_checkpoint)
from refconv.models import SurgeryOptions, build_zoo, merge_model, surgery
from refconv.network import init_params


def sample_checkpoint(model_id="tiny_dense", seed=0):
    g = build_zoo(model_id)
    return g, Checkpoint(model_id=model_id, stage="baseline", precision="float32",
                         seed=seed, params=init_params(g, seed))


def test_roundtrip_is_bit_exact(tmp_path):
    _, ckpt = sample_checkpoint()
    save_checkpoint(ckpt, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.model_id == ckpt.model_id and back.stage == ckpt.stage
    assert back.seed == ckpt.seed and back.precision == ckpt.precision
    for name, roles in ckpt.params.items():
        for role, arr in roles.items():
            assert back.params[name][role].tobytes() == arr.tobytes()


def test_save_load_save_identical_blobs(tmp_path):
    _, ckpt = sample_checkpoint()
    d1 = save_checkpoint(ckpt, tmp_path / "a")
    back = load_checkpoint(d1)
    d2 = save_checkpoint(back, tmp_path / "b")
    for f1 in sorted((d1 / "blobs").iterdir()):
        f2 = d2 / "blobs" / f1.name
        assert f1.read_bytes() == f2.read_bytes()
    assert (d1 / MANIFEST_NAME).read_text() == (d2 / MANIFEST_NAME).read_text()


def test_manifest_records_shapes_hashes_lengths(tmp_path):
    _, ckpt = sample_checkpoint()
    save_checkpoint(ckpt, tmp_path / "ck")
    manifest = json.loads((tmp_path / "ck" / MANIFEST_NAME).read_text())
    assert manifest["stage"] == "baseline"
    assert manifest["blob_dtype"] == "<f4"
    for entry in manifest["layers"]:
        for t in entry["tensors"]:
            n_items = int(np.prod(t["shape"])) if t["shape"] else 1
            assert t["bytes"] == 4 * n_items
            assert len(t["sha256"]) == 64


def test_corrupted_blob_is_rejected(tmp_path):
    _, ckpt = sample_checkpoint()
    out = save_checkpoint(ckpt, tmp_path / "ck")
    victim = next((out / "blobs").iterdir())
    raw = bytearray(victim.read_bytes())
    raw[0] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="sha256"):
        load_checkpoint(out)


def test_truncated_blob_is_rejected(tmp_path):
    _, ckpt = sample_checkpoint()
    out = save_checkpoint(ckpt, tmp_path / "ck")
    victim = next((out / "blobs").iterdir())
    victim.write_bytes(victim.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="bytes"):
        load_checkpoint(out)


def test_missing_manifest_and_blob(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
    _, ckpt = sample_checkpoint()
    out = save_checkpoint(ckpt, tmp_path / "ck")
    next((out / "blobs").iterdir()).unlink()
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(out)


def test_invalid_stage_rejected():
    with pytest.raises(CheckpointError):
        Checkpoint(model_id="x", stage="trained", precision="float32", seed=0, params={})


def test_float64_training_saves_float32_blobs(tmp_path):
    g = build_zoo("tiny_dense")
    ckpt = Checkpoint(model_id="tiny_dense", stage="baseline", precision="float64",
                      seed=0, params=init_params(g, 0, dtype=np.float64))
    save_checkpoint(ckpt, tmp_path / "ck")
    manifest = json.loads((tmp_path / "ck" / MANIFEST_NAME).read_text())
    assert manifest["precision"] == "float64"
    assert manifest["blob_dtype"] == "<f4"
    back = load_checkpoint(tmp_path / "ck")
    assert next(iter(back.params.values()))["weight"].dtype == np.float32


def test_merged_manifest_has_no_refocus_blobs_and_matches_baseline_layout(tmp_path):
    g, base = sample_checkpoint("tiny_dw")
    sg, sc = surgery(g, base, SurgeryOptions())
    mg, merged = merge_model(sg, sc)
    d_base = save_checkpoint(base, tmp_path / "base")
    d_merged = save_checkpoint(merged, tmp_path / "merged")
    mb = json.loads((d_base / MANIFEST_NAME).read_text())
    mm = json.loads((d_merged / MANIFEST_NAME).read_text())
    roles_of = lambda m: {e["name"]: sorted(t["role"] for t in e["tensors"])
                          for e in m["layers"]}
    assert roles_of(mm) == roles_of(mb)
    assert not any("refocus" in f.name for f in (d_merged / "blobs").iterdir())
