import numpy as np
import pytest

from winofi.engine import OpType, Stage
from winofi.errors import ShapeError
from winofi.modelio import generate_dataset, generate_toy_model
from winofi.runtime import enumerate_ops, run_inference, top1

from conftest import CountingHook


@pytest.fixture(scope="module")
def toy8():
    return generate_toy_model(depth=2, channels=2, bit_width=8, seed=11, hw=6)


@pytest.fixture(scope="module")
def toy16():
    return generate_toy_model(depth=2, channels=2, bit_width=16, seed=12, hw=6)


def _dry_run_counts(model, engine):
    x = generate_dataset(model, 1, seed=3).samples[0]
    hook = CountingHook()
    run_inference(model, x, engine, hook)
    return hook


@pytest.mark.parametrize("engine", ["direct", "winograd"])
def test_enumerate_matches_dry_run(toy8, engine):
    space = enumerate_ops(toy8, engine)
    hook = _dry_run_counts(toy8, engine)
    assert space.total_ops == len(hook.op_ids)
    assert hook.op_ids == list(range(space.total_ops))
    for lid in space.conv_layer_ids():
        for stage in Stage:
            for typ in OpType:
                assert space.count(lid, stage, typ) == hook.total(lid, stage, typ), (lid, stage, typ)


def test_enumerate_single_layer_counts():
    model = generate_toy_model(depth=1, channels=1, bit_width=8, seed=1, hw=4, padding=0)
    direct = enumerate_ops(model, "direct")
    assert direct.count(op_type=OpType.MUL) == 36
    wino = enumerate_ops(model, "winograd")
    assert wino.count(op_type=OpType.MUL) == 16
    assert wino.count(stage=Stage.WG_INPUT_TF, op_type=OpType.ADD) == 32
    assert wino.count(stage=Stage.WG_INVERSE_TF, op_type=OpType.ADD) == 24


def test_enumerate_two_identical_layers_doubles():
    # uniform channel counts end to end, so both conv layers are identical
    uni1 = generate_toy_model(depth=1, channels=3, bit_width=8, seed=9, hw=6, in_channels=3)
    uni2 = generate_toy_model(depth=2, channels=3, bit_width=8, seed=9, hw=6, in_channels=3)
    for engine in ("direct", "winograd"):
        s1 = enumerate_ops(uni1, engine)
        s2 = enumerate_ops(uni2, engine)
        assert s2.total_ops == 2 * s1.total_ops
        assert s2.total_muls == 2 * s1.total_muls
        a, b = s2.conv_layer_ids()
        assert s2.count(layer_id=a) == s2.count(layer_id=b) == s1.total_ops


def test_enumerate_with_instrumented_filter_transform(toy8):
    from winofi.engine import WinogradConfig

    cfg = WinogradConfig(instrument_filter_transform=True)
    space = enumerate_ops(toy8, "winograd", wg_cfg=cfg)
    x = generate_dataset(toy8, 1, seed=3).samples[0]
    hook = CountingHook()
    run_inference(toy8, x, "winograd", hook, wg_cfg=cfg)
    assert space.total_ops == len(hook.op_ids)
    assert hook.op_ids == list(range(space.total_ops))
    for lid in space.conv_layer_ids():
        assert space.count(lid, Stage.WG_FILTER_TF, OpType.ADD) == hook.total(lid, Stage.WG_FILTER_TF, OpType.ADD)
        assert space.count(lid, Stage.WG_FILTER_TF, OpType.ADD) > 0
    # default space excludes the stage entirely
    default = enumerate_ops(toy8, "winograd")
    assert default.count(stage=Stage.WG_FILTER_TF) == 0
    assert default.total_ops < space.total_ops


def test_op_info_and_region_lookup(toy8):
    for engine in ("direct", "winograd"):
        space = enumerate_ops(toy8, engine)
        hook = _dry_run_counts(toy8, engine)
        # random spot checks against the recorded stream
        seen = {}
        x = generate_dataset(toy8, 1, seed=3).samples[0]

        class Recorder:
            def __init__(self):
                self.info = {}

            def __call__(self, op_id, layer_id, op_type, stage, value):
                self.info[op_id] = (layer_id, Stage(stage), OpType(op_type))
                return value

        rec = Recorder()
        run_inference(toy8, x, engine, rec)
        rng = np.random.default_rng(0)
        for op_id in rng.integers(0, space.total_ops, size=200):
            assert space.op_info(int(op_id)) == rec.info[int(op_id)]


def test_record_of_and_scope_matching(toy8):
    from winofi.engine import OpRecord
    from winofi.inject import Scope

    space = enumerate_ops(toy8, "winograd")
    rec = space.record_of(0)
    assert isinstance(rec, OpRecord)
    assert rec.op_id == 0
    assert rec.bit_width in (space.width_mul, space.width_add)
    assert space.op_info(0) == (rec.layer_id, rec.stage, rec.op_type)
    scope = Scope(exclude_layers=frozenset({rec.layer_id}))
    assert not scope.matches(rec)
    assert Scope().matches(rec)


def test_mul_add_in_range_arithmetic(toy8):
    for engine in ("direct", "winograd"):
        space = enumerate_ops(toy8, engine)
        rng = np.random.default_rng(1)
        for _ in range(50):
            a, b = sorted(rng.integers(0, space.total_ops + 1, size=2).tolist())
            muls = sum(1 for i in range(a, b) if space.op_info(i)[2] == OpType.MUL)
            got_m, got_a = space.mul_add_in_range(a, b)
            assert got_m == muls
            assert got_a == (b - a) - muls


def test_op_bit_totals(toy8, toy16):
    s8 = enumerate_ops(toy8, "direct")
    assert (s8.width_mul, s8.width_add) == (16, 8)
    assert s8.total_op_bits == s8.total_muls * 16 + s8.total_adds * 8
    s16 = enumerate_ops(toy16, "direct")
    assert (s16.width_mul, s16.width_add) == (32, 16)
    uniform = enumerate_ops(toy8, "direct", fault_bits=8)
    assert uniform.uniform_width
    assert uniform.total_op_bits == s8.total_ops * 8
    custom = enumerate_ops(toy8, "direct", fault_bits={"MUL": 16, "ADD": 8})
    assert custom.total_op_bits == s8.total_muls * 16 + s8.total_adds * 8
    assert not custom.uniform_width
    assert custom.width_pad == 16


def test_neuron_layout(toy8):
    space = enumerate_ops(toy8, "direct")
    plan = toy8.execution_plan()
    sizes = {}
    for lid, (layer, in_shape, out_shape, spec) in enumerate(plan):
        if spec is not None:
            sizes[lid] = int(np.prod(out_shape))
    assert space.neuron_sizes == sizes
    assert space.total_neurons == sum(sizes.values())
    assert space.total_neuron_bits == 8 * space.total_neurons


def test_run_inference_rejects_wrong_qparams(toy8):
    from winofi.qtensor import QTensor, QuantParams

    x = generate_dataset(toy8, 1, seed=5).samples[0]
    wrong = QTensor(x.shape, x.data, QuantParams(8, x.qparams.scale * 2))
    with pytest.raises(ShapeError):
        run_inference(toy8, wrong)


def test_run_inference_deterministic(toy16):
    x = generate_dataset(toy16, 1, seed=6).samples[0]
    a = run_inference(toy16, x, "winograd").output
    b = run_inference(toy16, x, "winograd").output
    assert a == b


def test_engines_agree_on_full_model(toy8, toy16):
    for model in (toy8, toy16):
        for s in generate_dataset(model, 3, seed=7).samples:
            d = run_inference(model, s, "direct").output
            w = run_inference(model, s, "winograd").output
            assert d == w


def test_top1_deterministic_tie_break():
    from winofi.qtensor import QTensor, QuantParams

    q = QTensor((1, 4), [3, 7, 7, 1], QuantParams(8, 1.0))
    assert top1(q) == 1


def test_capture_points(toy8):
    x = generate_dataset(toy8, 1, seed=8).samples[0]
    conv_ids = toy8.conv_layer_ids()
    res = run_inference(toy8, x, capture=tuple(conv_ids), capture_act=tuple(conv_ids))
    assert set(res.conv_outputs) == set(conv_ids)
    assert set(res.activations) == set(conv_ids)
    # activation point is post-relu: non-negative everywhere
    for q in res.activations.values():
        assert q.array.min() >= 0
