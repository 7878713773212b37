import numpy as np
import pytest

from winofi.analyze import Campaign
from winofi.errors import ConfigError
from winofi.mitigate import RangeProfile, apply_constrained_activation, profile_ranges
from winofi.modelio import (
    ConvLayer,
    Dataset,
    FlattenLayer,
    LinearLayer,
    ModelDef,
    ReluLayer,
    generate_dataset,
    generate_toy_model,
)
from winofi.qtensor import QTensor, QuantParams
from winofi.runtime import run_inference


@pytest.fixture(scope="module")
def model():
    return generate_toy_model(depth=2, channels=2, bit_width=16, seed=81, hw=6)


@pytest.fixture(scope="module")
def dataset(model):
    return generate_dataset(model, 5, seed=82)


def test_profile_requires_samples(model):
    with pytest.raises(ConfigError):
        profile_ranges(model, Dataset([]))


def test_profile_zero_input_zero_bias():
    model = generate_toy_model(depth=2, channels=2, bit_width=8, seed=83, hw=6)
    zeros = Dataset([QTensor((1, 1, 6, 6), np.zeros(36), model.input_qparams)])
    prof = profile_ranges(model, zeros)
    for lid in model.conv_layer_ids():
        assert prof.get(lid) == (0, 0)


def test_profile_single_sample_is_that_sample(model, dataset):
    one = Dataset(dataset.samples[:1])
    prof = profile_ranges(model, one)
    conv_ids = tuple(model.conv_layer_ids())
    res = run_inference(model, dataset.samples[0], capture_act=conv_ids)
    for lid in conv_ids:
        arr = res.activations[lid].array
        assert prof.get(lid) == (int(arr.min()), int(arr.max()))


def test_profile_union_is_monotone_aggregation(model, dataset):
    a = Dataset(dataset.samples[:2])
    b = Dataset(dataset.samples[2:])
    both = profile_ranges(model, dataset)
    merged = profile_ranges(model, a).merged(profile_ranges(model, b))
    assert both.ranges == merged.ranges


def test_apply_clamp_and_zero_modes():
    prof = RangeProfile({0: (0, 40)})
    q = QTensor((3,), [10, 120, -5], QuantParams(8, 1.0))
    clamped = apply_constrained_activation(q, prof, 0, mode="clamp")
    assert clamped.data.tolist() == [10, 40, 0]
    zeroed = apply_constrained_activation(q, prof, 0, mode="zero")
    assert zeroed.data.tolist() == [10, 0, 0]


def test_apply_in_range_is_identity():
    prof = RangeProfile({0: (-10, 50)})
    q = QTensor((4,), [0, -10, 50, 20], QuantParams(8, 1.0))
    assert apply_constrained_activation(q, prof, 0) == q


def test_apply_missing_layer_raises():
    prof = RangeProfile({1: (0, 10)})
    q = QTensor((1,), [5], QuantParams(8, 1.0))
    with pytest.raises(ConfigError):
        apply_constrained_activation(q, prof, 0)
    with pytest.raises(ConfigError):
        apply_constrained_activation(q, prof, 1, mode="bogus")


def test_clamp_output_always_within_profile(model, dataset):
    prof = profile_ranges(model, dataset)
    camp = Campaign(model, dataset, "direct", seed=84, ranges=prof)
    lid = model.conv_layer_ids()[0]
    res = camp.corrupted_output(0, 0, 1e-3, camp.base_scope, capture=(lid,))
    # capture is pre-activation; check the next activation instead via a
    # fresh run capturing activation points
    from winofi.inject import InjectionConfig, op_level_hook

    cfg = InjectionConfig(ber=1e-3, seed=84)
    hook, _ = op_level_hook(cfg, camp.opspace, trial=0, sample=0)
    out = run_inference(model, dataset.samples[0], "direct", hook,
                        ranges=prof, capture_act=(lid,))
    lo, hi = prof.get(lid)
    arr = out.activations[lid].array
    assert arr.min() >= lo and arr.max() <= hi


def test_fault_free_idempotence(model, dataset):
    prof = profile_ranges(model, dataset)
    for mode in ("clamp", "zero"):
        for s in dataset.samples:
            plain = run_inference(model, s, "direct").output
            constrained = run_inference(model, s, "direct", ranges=prof, range_mode=mode).output
            assert constrained == plain


def test_constrained_relu_layer_type(model, dataset):
    # baking profiled bounds into the model as constrained_relu layers matches
    # runner-level range application
    from winofi.modelio import ConstrainedReluLayer

    prof = profile_ranges(model, dataset)
    layers = []
    conv_id = None
    for i, layer in enumerate(model.layers):
        if isinstance(layer, ConvLayer):
            conv_id = i
            layers.append(layer)
        elif isinstance(layer, ReluLayer) and conv_id is not None and conv_id in prof:
            lo, hi = prof.get(conv_id)
            layers.append(ConstrainedReluLayer(lo=lo, hi=hi, mode="clamp"))
        else:
            layers.append(layer)
    baked = ModelDef(
        name="baked", bit_width=model.bit_width, input_shape=model.input_shape,
        input_scale=model.input_scale, layers=layers, engine=model.engine,
    )
    from winofi.inject import InjectionConfig, op_level_hook
    from winofi.runtime import enumerate_ops

    space = enumerate_ops(model, "direct")
    cfg = InjectionConfig(ber=5e-4, seed=85)
    for t in range(3):
        hook, _ = op_level_hook(cfg, space, trial=t)
        a = run_inference(model, dataset.samples[0], "direct", hook, ranges=prof).output
        hook, _ = op_level_hook(cfg, space, trial=t)
        b = run_inference(baked, dataset.samples[0], "direct", hook).output
        assert a == b


def test_clamp_improves_accuracy_under_faults(model, dataset):
    # paired Monte-Carlo: same seeds with and without constrained activation
    prof = profile_ranges(model, dataset)
    ber, trials = 3e-4, 40
    for engine in ("direct", "winograd"):
        plain = Campaign(model, dataset, engine, seed=86).run_point(ber, trials)
        clamped = Campaign(model, dataset, engine, seed=86, ranges=prof).run_point(ber, trials)
        assert clamped.mean_accuracy >= plain.mean_accuracy
    # test is only meaningful if faults actually hurt the plain run
    assert plain.mean_accuracy < 1.0


def test_profile_json_roundtrip(tmp_path, model, dataset):
    prof = profile_ranges(model, dataset)
    path = tmp_path / "profile.json"
    prof.save_json(str(path))
    loaded = RangeProfile.load_json(str(path))
    assert loaded.ranges == prof.ranges
    assert loaded.point == "post_activation"
    import json

    doc = json.loads(path.read_text())
    for lid, (lo, hi) in prof.ranges.items():
        assert doc[str(lid)] == [lo, hi]
    assert doc["_meta"]["point"] == "post_activation"


def test_profile_rejects_inverted_range():
    with pytest.raises(ConfigError):
        RangeProfile({0: (5, 1)})
