"""winofi: desk-scale soft-error fault injection for quantized direct and
Winograd convolution, with vulnerability analysis, fine-grained TMR planning,
and constrained-activation mitigation."""

__version__ = "0.1.0"

from .analyze import (
    Campaign,
    CampaignResult,
    VulnReport,
    layer_vulnerability,
    optype_vulnerability,
    rmse_layer,
    sweep_ber,
)
from .engine import (
    AT_F2X2_3X3,
    BT_F2X2_3X3,
    G2_F2X2_3X3,
    G_F2X2_3X3,
    WINOGRAD_F2X2_3X3,
    ConvSpec,
    OpRecord,
    OpType,
    Stage,
    WinogradConfig,
    conv_direct,
    conv_winograd,
)
from .errors import BitPositionError, ConfigError, ShapeError
from .inject import (
    FaultTrace,
    Granularity,
    InjectionConfig,
    Scope,
    ber_neuron_to_op_scale,
    neuron_level_inject,
    op_level_hook,
)
from .modelio import (
    BUILTIN_MODELS,
    ConstrainedReluLayer,
    ConvLayer,
    Dataset,
    FlattenLayer,
    LinearLayer,
    ModelDef,
    ReluLayer,
    builtin_model,
    generate_dataset,
    generate_toy_model,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
)
from .mitigate import RangeProfile, apply_constrained_activation, profile_ranges
from .qtensor import QTensor, QuantParams, flip_bits, quantize
from .runtime import OpSpace, enumerate_ops, run_inference, top1
from .tmr import (
    CostModel,
    Segment,
    TmrPlan,
    full_protection_overhead,
    measure_segment_vulnerability,
    plan_tmr,
    run_with_tmr,
    segment_ops,
    tmr_overhead,
)

__all__ = [name for name in dir() if not name.startswith("_")]
