import json
import os

import numpy as np
import pytest

from winofi.engine import OpType
from winofi.errors import ConfigError, ShapeError
from winofi.modelio import (
    BUILTIN_MODELS,
    ConvLayer,
    Dataset,
    builtin_model,
    generate_dataset,
    generate_toy_model,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
)
from winofi.runtime import enumerate_ops, run_inference


def _read_bytes(path):
    out = {}
    for name in sorted(os.listdir(path)):
        with open(os.path.join(path, name), "rb") as f:
            out[name] = f.read()
    return out


def test_model_save_load_roundtrip(tmp_path):
    model = generate_toy_model(depth=2, channels=3, bit_width=8, seed=91, hw=6)
    d1 = tmp_path / "m1"
    save_model(model, str(d1))
    loaded = load_model(str(d1))
    d2 = tmp_path / "m2"
    save_model(loaded, str(d2))
    assert _read_bytes(str(d1)) == _read_bytes(str(d2))
    # loaded model behaves identically
    ds = generate_dataset(model, 2, seed=92)
    for s in ds.samples:
        assert run_inference(model, s).output == run_inference(loaded, s).output


def test_model_roundtrip_with_bias_and_constrained(tmp_path):
    from winofi.modelio import ConstrainedReluLayer

    model = generate_toy_model(depth=1, channels=2, bit_width=16, seed=93, hw=6)
    bias = np.array([100, -200], dtype=np.int64)
    model.layers[0].bias = bias
    model.layers[1] = ConstrainedReluLayer(lo=0, hi=500, mode="zero")
    model.validate()
    d = tmp_path / "m"
    save_model(model, str(d))
    loaded = load_model(str(d))
    assert np.array_equal(loaded.layers[0].bias, bias)
    assert loaded.layers[1].lo == 0 and loaded.layers[1].hi == 500
    assert loaded.layers[1].mode == "zero"
    d2 = tmp_path / "m2"
    save_model(loaded, str(d2))
    assert _read_bytes(str(d)) == _read_bytes(str(d2))


def test_checksum_mismatch_rejected(tmp_path):
    model = generate_toy_model(depth=1, channels=1, bit_width=8, seed=94, hw=4)
    d = tmp_path / "m"
    save_model(model, str(d))
    blob = (d / "weights.bin").read_bytes()
    (d / "weights.bin").write_bytes(blob[:-1] + bytes([blob[-1] ^ 0xFF]))
    with pytest.raises(ConfigError):
        load_model(str(d))


def test_stride2_winograd_model_rejected(tmp_path):
    model = generate_toy_model(depth=1, channels=1, bit_width=8, seed=95, hw=6, engine="winograd")
    d = tmp_path / "m"
    save_model(model, str(d))
    manifest = json.loads((d / "manifest.json").read_text())
    manifest["layers"][0]["stride"] = 2
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with pytest.raises(ShapeError):
        load_model(str(d))


def test_unknown_fields_strict_vs_lenient(tmp_path, caplog):
    model = generate_toy_model(depth=1, channels=1, bit_width=8, seed=96, hw=4)
    d = tmp_path / "m"
    save_model(model, str(d))
    manifest = json.loads((d / "manifest.json").read_text())
    manifest["experimental_field"] = True
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with pytest.raises(ConfigError):
        load_model(str(d), strict=True)
    loaded = load_model(str(d), strict=False)
    assert loaded.name == model.name


def test_missing_version_rejected(tmp_path):
    model = generate_toy_model(depth=1, channels=1, bit_width=8, seed=97, hw=4)
    d = tmp_path / "m"
    save_model(model, str(d))
    manifest = json.loads((d / "manifest.json").read_text())
    del manifest["format_version"]
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with pytest.raises(ConfigError):
        load_model(str(d), strict=False)


def test_builtin_toycnn_layer_counts():
    # depth*2 (conv+relu) + flatten + linear
    m8 = builtin_model("toycnn-int8")
    assert len(m8.layers) == BUILTIN_MODELS["toycnn-int8"]["depth"] * 2 + 2 == 8
    assert m8.bit_width == 8
    m16 = builtin_model("toycnn-int16")
    assert m16.bit_width == 16
    with pytest.raises(ConfigError):
        builtin_model("nope")


def test_builtin_models_deterministic():
    a = builtin_model("toycnn-int8")
    b = builtin_model("toycnn-int8")
    for la, lb in zip(a.layers, b.layers):
        if isinstance(la, ConvLayer):
            assert la.weights == lb.weights


def test_generate_toy_model_deterministic():
    a = generate_toy_model(depth=2, channels=2, bit_width=8, seed=5)
    b = generate_toy_model(depth=2, channels=2, bit_width=8, seed=5)
    for la, lb in zip(a.layers, b.layers):
        if isinstance(la, ConvLayer):
            assert la.weights == lb.weights
    c = generate_toy_model(depth=2, channels=2, bit_width=8, seed=6)
    assert any(
        isinstance(lc, ConvLayer) and lc.weights != la.weights
        for la, lc in zip(a.layers, c.layers)
    )


def test_depth1_single_channel_direct_mul_count():
    model = generate_toy_model(depth=1, channels=1, bit_width=8, seed=98, hw=4, padding=0)
    space = enumerate_ops(model, "direct")
    assert space.count(op_type=OpType.MUL) == 36


def test_int16_variant_doubles_neuron_bits():
    m8 = generate_toy_model(depth=1, channels=2, bit_width=8, seed=99, hw=6)
    m16 = generate_toy_model(depth=1, channels=2, bit_width=16, seed=99, hw=6)
    s8 = enumerate_ops(m8, "direct")
    s16 = enumerate_ops(m16, "direct")
    assert s8.total_ops == s16.total_ops
    assert s16.total_neuron_bits == 2 * s8.total_neuron_bits
    assert s16.total_op_bits == 2 * s8.total_op_bits


def test_dataset_roundtrip(tmp_path):
    model = generate_toy_model(depth=1, channels=1, bit_width=16, seed=100, hw=6)
    ds = generate_dataset(model, 4, seed=101)
    labeled = Dataset(ds.samples, labels=[0, 1, 2, 3])
    d = tmp_path / "ds"
    save_dataset(labeled, str(d))
    loaded = load_dataset(str(d))
    assert len(loaded) == 4
    assert loaded.labels == [0, 1, 2, 3]
    for a, b in zip(labeled.samples, loaded.samples):
        assert a == b
    d2 = tmp_path / "ds2"
    save_dataset(loaded, str(d2))
    assert _read_bytes(str(d)) == _read_bytes(str(d2))


def test_dataset_generation_deterministic():
    model = generate_toy_model(depth=1, channels=1, bit_width=8, seed=102, hw=4)
    a = generate_dataset(model, 3, seed=7)
    b = generate_dataset(model, 3, seed=7)
    for s, t in zip(a.samples, b.samples):
        assert s == t


def test_dataset_label_length_checked():
    model = generate_toy_model(depth=1, channels=1, bit_width=8, seed=103, hw=4)
    ds = generate_dataset(model, 3, seed=8)
    with pytest.raises(ConfigError):
        Dataset(ds.samples, labels=[1])
