"""Direct and Winograd 3x3 stride-1 convolution over integer tensors.

Both engines produce bit-identical outputs on the same inputs: the Winograd
path runs its transforms in scaled integers (the filter transform uses 2G, so
every intermediate is an exact integer carrying a factor of 4 that the final
requantization shift absorbs). Every primitive multiply and accumulation add
can be routed through an instrumentation hook:

    hook(op_id, layer_id, op_type, stage, value) -> value

The hook sees each operation's widened integer result exactly once, in a
canonical order that is stable for a fixed (weights, input shape, engine), and
may return a modified integer. ``hook=None`` selects a vectorized fault-free
path that matches the hooked path element-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .qtensor import QTensor, QuantParams


class OpType(IntEnum):
    MUL = 0
    ADD = 1


class Stage(IntEnum):
    DIRECT_MAC = 0
    WG_INPUT_TF = 1
    WG_FILTER_TF = 2
    WG_EWMUL = 3
    WG_CHANNEL_SUM = 4
    WG_INVERSE_TF = 5


Hook = Callable[[int, int, int, int, int], int]


@dataclass(frozen=True)
class OpRecord:
    """Identity of one primitive operation within an inference."""

    op_id: int
    layer_id: int
    op_type: OpType
    stage: Stage
    bit_width: int


# F(2x2, 3x3) transform constants (exact rationals; G carries halves).
BT_F2X2_3X3 = np.array(
    [[1, 0, -1, 0], [0, 1, 1, 0], [0, -1, 1, 0], [0, 1, 0, -1]], dtype=np.int64
)
G_F2X2_3X3 = np.array(
    [[1.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.5, -0.5, 0.5], [0.0, 0.0, 1.0]], dtype=np.float64
)
AT_F2X2_3X3 = np.array([[1, 1, 1, 0], [0, 1, -1, -1]], dtype=np.int64)
# Doubled filter transform: (2G) g (2G)^T = 4 * G g G^T stays integral.
G2_F2X2_3X3 = np.array([[2, 0, 0], [1, 1, 1], [1, -1, 1], [0, 0, 2]], dtype=np.int64)


@dataclass(frozen=True)
class WinogradConfig:
    """F(2x2, 3x3): 4x4 input tiles, 2x2 output tiles, 16 multiplies per tile.

    The filter transform runs once per inference over static weights, so by
    default it is precomputed fault-free and owns no op_ids (matching the
    transient-computation fault model); ``instrument_filter_transform`` routes
    it through the hook as WG_FILTER_TF ADDs instead.
    """

    m_tile: int = 2
    bt: np.ndarray = field(default_factory=lambda: BT_F2X2_3X3.copy())
    g: np.ndarray = field(default_factory=lambda: G_F2X2_3X3.copy())
    at: np.ndarray = field(default_factory=lambda: AT_F2X2_3X3.copy())
    instrument_filter_transform: bool = False

    def __post_init__(self):
        if self.m_tile != 2:
            raise ShapeError("only the F(2x2,3x3) tile size is supported")
        if not (
            np.array_equal(self.bt, BT_F2X2_3X3)
            and np.array_equal(self.g, G_F2X2_3X3)
            and np.array_equal(self.at, AT_F2X2_3X3)
        ):
            raise ShapeError("transform matrices must be the exact F(2x2,3x3) constants")
        assert (self.m_tile + 3 - 1) ** 2 == 16

    @staticmethod
    def tile_grid(out_h: int, out_w: int) -> tuple[int, int]:
        """Tile counts covering an output plane (ragged edges round up)."""
        return (out_h + 1) // 2, (out_w + 1) // 2


WINOGRAD_F2X2_3X3 = WinogradConfig()


@dataclass
class ConvSpec:
    """One 3x3 stride-1 convolution layer: weights, bias, and requant target."""

    in_channels: int
    out_channels: int
    padding: int
    weights: QTensor
    out_qparams: QuantParams
    bias: Optional[np.ndarray] = None
    kernel_size: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.kernel_size != 3:
            raise ShapeError(f"kernel_size must be 3, got {self.kernel_size}")
        if self.stride != 1:
            raise ShapeError(f"stride must be 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        expect = (self.out_channels, self.in_channels, 3, 3)
        if self.weights.shape != expect:
            raise ShapeError(f"weights shape {self.weights.shape} != {expect}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.int64)
            if self.bias.shape != (self.out_channels,):
                raise ShapeError(f"bias must have length {self.out_channels}")
        if self.out_qparams.bit_width != self.weights.qparams.bit_width:
            raise ShapeError("weights and output must share one bit width")

    def out_hw(self, in_h: int, in_w: int) -> tuple[int, int]:
        oh = in_h + 2 * self.padding - 2
        ow = in_w + 2 * self.padding - 2
        if oh < 1 or ow < 1:
            raise ShapeError(f"input {in_h}x{in_w} too small for 3x3 conv with padding {self.padding}")
        return oh, ow

    def requant_shift(self, in_qparams: QuantParams) -> int:
        """Right-shift turning accumulator scale (in*w) into the output scale.

        Negative values mean an exact left shift. Requires power-of-two scales.
        """
        return (
            self.out_qparams.scale_exponent()
            - in_qparams.scale_exponent()
            - self.weights.qparams.scale_exponent()
        )


def requant_scalar(acc: int, shift: int, int_min: int, int_max: int) -> int:
    """Round-half-away-from-zero shift, then saturate."""
    if shift > 0:
        half = 1 << (shift - 1)
        v = (acc + half) >> shift if acc >= 0 else -((-acc + half) >> shift)
    elif shift < 0:
        v = acc << -shift
    else:
        v = acc
    if v < int_min:
        return int_min
    if v > int_max:
        return int_max
    return v


def requant_array(acc: np.ndarray, shift: int, int_min: int, int_max: int) -> np.ndarray:
    if shift > 0:
        half = np.int64(1) << np.int64(shift - 1)
        mag = (np.abs(acc) + half) >> np.int64(shift)
        v = np.sign(acc) * mag
    elif shift < 0:
        v = acc << np.int64(-shift)
    else:
        v = acc.copy()
    return np.clip(v, int_min, int_max)


def _check_input(x: QTensor, spec: ConvSpec) -> tuple[int, int, int, int]:
    if len(x.shape) != 4:
        raise ShapeError(f"input must be (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"input has {c} channels, spec expects {spec.in_channels}")
    if x.qparams.bit_width != spec.weights.qparams.bit_width:
        raise ShapeError("input and weights must share one bit width")
    return n, c, h, w


def conv_direct(x: QTensor, spec: ConvSpec, hook: Optional[Hook] = None, *, layer_id: int = 0, op_base: int = 0) -> QTensor:
    """Stride-1 cross-correlation with per-MAC instrumentation.

    Canonical op order: output channel, output row, output col, input channel,
    kernel row, kernel col; each MAC emits its MUL then its accumulation ADD.
    """
    n_, c_, h, w = _check_input(x, spec)
    oh, ow = spec.out_hw(h, w)
    shift = spec.requant_shift(x.qparams)
    oq = spec.out_qparams
    if hook is None:
        return _conv_direct_vec(x, spec, oh, ow, shift)

    pad = spec.padding
    xp = np.zeros((n_, c_, h + 2 * pad, w + 2 * pad), dtype=np.int64)
    xp[:, :, pad : pad + h, pad : pad + w] = x.array
    xl = xp.tolist()
    wl = spec.weights.array.tolist()
    bias = spec.bias
    lo, hi = oq.int_min, oq.int_max
    out = np.empty((n_, spec.out_channels, oh, ow), dtype=np.int64)
    mul, add, stg = int(OpType.MUL), int(OpType.ADD), int(Stage.DIRECT_MAC)
    op_id = op_base
    for n in range(n_):
        xn = xl[n]
        for k in range(spec.out_channels):
            wk = wl[k]
            b = int(bias[k]) if bias is not None else 0
            for oy in range(oh):
                for ox in range(ow):
                    acc = b
                    for c in range(c_):
                        xc = xn[c]
                        wkc = wk[c]
                        for ry in range(3):
                            xrow = xc[oy + ry]
                            wrow = wkc[ry]
                            for rx in range(3):
                                p = wrow[rx] * xrow[ox + rx]
                                p = hook(op_id, layer_id, mul, stg, p)
                                op_id += 1
                                acc = hook(op_id, layer_id, add, stg, acc + p)
                                op_id += 1
                    out[n, k, oy, ox] = requant_scalar(acc, shift, lo, hi)
    return QTensor(out.shape, out, oq)


def _conv_direct_vec(x: QTensor, spec: ConvSpec, oh: int, ow: int, shift: int) -> QTensor:
    n_, c_, h, w = x.shape
    pad = spec.padding
    xp = np.zeros((n_, c_, h + 2 * pad, w + 2 * pad), dtype=np.int64)
    xp[:, :, pad : pad + h, pad : pad + w] = x.array
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N, C, OH, OW, 3, 3)
    acc = np.einsum("nchwyx,kcyx->nkhw", win, spec.weights.array, dtype=np.int64)
    if spec.bias is not None:
        acc = acc + spec.bias[None, :, None, None]
    out = requant_array(acc, shift, spec.out_qparams.int_min, spec.out_qparams.int_max)
    return QTensor(out.shape, out, spec.out_qparams)


def conv_winograd(
    x: QTensor,
    spec: ConvSpec,
    cfg: Optional[WinogradConfig] = None,
    hook: Optional[Hook] = None,
    *,
    layer_id: int = 0,
    op_base: int = 0,
) -> QTensor:
    """F(2x2,3x3) convolution, element-exact with :func:`conv_direct`.

    Within a layer the op stream is: filter transform for every (k, c), then
    per tile the stages input transform (per c), element-wise multiply
    (per k, c), channel-sum accumulation (per k, c), inverse transform (per k).
    Odd output planes are computed on a tile grid rounded up to even and the
    padded outputs discarded.
    """
    if cfg is None:
        cfg = WINOGRAD_F2X2_3X3
    n_, c_, h, w = _check_input(x, spec)
    oh, ow = spec.out_hw(h, w)
    # +2: Winograd folds the deferred /4 of the doubled filter transform here.
    shift = spec.requant_shift(x.qparams) + 2
    oq = spec.out_qparams
    if hook is None:
        return _conv_winograd_vec(x, spec, oh, ow, shift)

    k_, pad = spec.out_channels, spec.padding
    ty_, tx_ = WinogradConfig.tile_grid(oh, ow)
    xp = np.zeros((n_, c_, 2 * ty_ + 2, 2 * tx_ + 2), dtype=np.int64)
    xp[:, :, pad : pad + h, pad : pad + w] = x.array
    xl = xp.tolist()
    wl = spec.weights.array.tolist()
    bias = spec.bias
    lo, hi = oq.int_min, oq.int_max
    out = np.empty((n_, k_, oh, ow), dtype=np.int64)
    mul, add = int(OpType.MUL), int(OpType.ADD)
    s_ftf, s_itf = int(Stage.WG_FILTER_TF), int(Stage.WG_INPUT_TF)
    s_ew, s_cs, s_inv = int(Stage.WG_EWMUL), int(Stage.WG_CHANNEL_SUM), int(Stage.WG_INVERSE_TF)
    op_id = op_base

    if not cfg.instrument_filter_transform:
        u_arr = np.matmul(np.matmul(G2_F2X2_3X3, spec.weights.array), G2_F2X2_3X3.T)
        u_all = u_arr.tolist()
    else:
        # Filter transform (2G) g (2G)^T per (k, c); the doublings are emitted
        # as self-additions so the stage is pure ADDs.
        u_all = []
    for k in range(k_ if cfg.instrument_filter_transform else 0):
        uk = []
        for c in range(c_):
            g = wl[k][c]
            t = [[0] * 3 for _ in range(4)]
            for j in range(3):
                t[0][j] = hook(op_id, layer_id, add, s_ftf, g[0][j] + g[0][j])
                op_id += 1
            for j in range(3):
                s = hook(op_id, layer_id, add, s_ftf, g[0][j] + g[1][j])
                op_id += 1
                t[1][j] = hook(op_id, layer_id, add, s_ftf, s + g[2][j])
                op_id += 1
            for j in range(3):
                s = hook(op_id, layer_id, add, s_ftf, g[0][j] - g[1][j])
                op_id += 1
                t[2][j] = hook(op_id, layer_id, add, s_ftf, s + g[2][j])
                op_id += 1
            for j in range(3):
                t[3][j] = hook(op_id, layer_id, add, s_ftf, g[2][j] + g[2][j])
                op_id += 1
            u = [[0] * 4 for _ in range(4)]
            for i in range(4):
                ti = t[i]
                u[i][0] = hook(op_id, layer_id, add, s_ftf, ti[0] + ti[0])
                op_id += 1
                s = hook(op_id, layer_id, add, s_ftf, ti[0] + ti[1])
                op_id += 1
                u[i][1] = hook(op_id, layer_id, add, s_ftf, s + ti[2])
                op_id += 1
                s = hook(op_id, layer_id, add, s_ftf, ti[0] - ti[1])
                op_id += 1
                u[i][2] = hook(op_id, layer_id, add, s_ftf, s + ti[2])
                op_id += 1
                u[i][3] = hook(op_id, layer_id, add, s_ftf, ti[2] + ti[2])
                op_id += 1
            uk.append(u)
        u_all.append(uk)

    for n in range(n_):
        xn = xl[n]
        for ty in range(ty_):
            for tx in range(tx_):
                y0, x0 = 2 * ty, 2 * tx
                # Input transform B^T d B per input channel.
                v_all = []
                for c in range(c_):
                    d = [xn[c][y0 + i][x0 : x0 + 4] for i in range(4)]
                    t = [[0] * 4 for _ in range(4)]
                    for j in range(4):
                        t[0][j] = hook(op_id, layer_id, add, s_itf, d[0][j] - d[2][j])
                        op_id += 1
                    for j in range(4):
                        t[1][j] = hook(op_id, layer_id, add, s_itf, d[1][j] + d[2][j])
                        op_id += 1
                    for j in range(4):
                        t[2][j] = hook(op_id, layer_id, add, s_itf, d[2][j] - d[1][j])
                        op_id += 1
                    for j in range(4):
                        t[3][j] = hook(op_id, layer_id, add, s_itf, d[1][j] - d[3][j])
                        op_id += 1
                    v = [[0] * 4 for _ in range(4)]
                    for i in range(4):
                        ti = t[i]
                        v[i][0] = hook(op_id, layer_id, add, s_itf, ti[0] - ti[2])
                        op_id += 1
                        v[i][1] = hook(op_id, layer_id, add, s_itf, ti[1] + ti[2])
                        op_id += 1
                        v[i][2] = hook(op_id, layer_id, add, s_itf, ti[2] - ti[1])
                        op_id += 1
                        v[i][3] = hook(op_id, layer_id, add, s_itf, ti[1] - ti[3])
                        op_id += 1
                    v_all.append(v)
                # Element-wise multiply in the transform domain.
                p_all = [[None] * c_ for _ in range(k_)]
                for k in range(k_):
                    uk = u_all[k]
                    for c in range(c_):
                        u, v = uk[c], v_all[c]
                        p = [0] * 16
                        for i in range(4):
                            ui, vi = u[i], v[i]
                            for j in range(4):
                                p[4 * i + j] = hook(op_id, layer_id, mul, s_ew, ui[j] * vi[j])
                                op_id += 1
                        p_all[k][c] = p
                # Channel sum, accumulated in the transform domain.
                s_acc = [[0] * 16 for _ in range(k_)]
                for k in range(k_):
                    sk = s_acc[k]
                    for c in range(c_):
                        pc = p_all[k][c]
                        for e in range(16):
                            sk[e] = hook(op_id, layer_id, add, s_cs, sk[e] + pc[e])
                            op_id += 1
                # Inverse transform A^T S A per output channel.
                for k in range(k_):
                    sk = s_acc[k]
                    m = [[0] * 4 for _ in range(2)]
                    for j in range(4):
                        s = hook(op_id, layer_id, add, s_inv, sk[j] + sk[4 + j])
                        op_id += 1
                        m[0][j] = hook(op_id, layer_id, add, s_inv, s + sk[8 + j])
                        op_id += 1
                    for j in range(4):
                        s = hook(op_id, layer_id, add, s_inv, sk[4 + j] - sk[8 + j])
                        op_id += 1
                        m[1][j] = hook(op_id, layer_id, add, s_inv, s - sk[12 + j])
                        op_id += 1
                    b4 = 4 * int(bias[k]) if bias is not None else 0
                    for i in range(2):
                        mi = m[i]
                        s = hook(op_id, layer_id, add, s_inv, mi[0] + mi[1])
                        op_id += 1
                        y_a = hook(op_id, layer_id, add, s_inv, s + mi[2])
                        op_id += 1
                        s = hook(op_id, layer_id, add, s_inv, mi[1] - mi[2])
                        op_id += 1
                        y_b = hook(op_id, layer_id, add, s_inv, s - mi[3])
                        op_id += 1
                        oy = y0 + i
                        if oy < oh:
                            if x0 < ow:
                                out[n, k, oy, x0] = requant_scalar(y_a + b4, shift, lo, hi)
                            if x0 + 1 < ow:
                                out[n, k, oy, x0 + 1] = requant_scalar(y_b + b4, shift, lo, hi)
    return QTensor(out.shape, out, oq)


def _conv_winograd_vec(x: QTensor, spec: ConvSpec, oh: int, ow: int, shift: int) -> QTensor:
    n_, c_, h, w = x.shape
    pad = spec.padding
    ty_, tx_ = WinogradConfig.tile_grid(oh, ow)
    xp = np.zeros((n_, c_, 2 * ty_ + 2, 2 * tx_ + 2), dtype=np.int64)
    xp[:, :, pad : pad + h, pad : pad + w] = x.array
    tiles = sliding_window_view(xp, (4, 4), axis=(2, 3))[:, :, ::2, ::2]  # (N,C,TY,TX,4,4)
    v = np.matmul(np.matmul(BT_F2X2_3X3, tiles), BT_F2X2_3X3.T)
    u = np.matmul(np.matmul(G2_F2X2_3X3, spec.weights.array), G2_F2X2_3X3.T)  # (K,C,4,4)
    s = np.einsum("kcij,nctuij->nktuij", u, v, dtype=np.int64)
    y = np.matmul(np.matmul(AT_F2X2_3X3, s), AT_F2X2_3X3.T)  # (N,K,TY,TX,2,2)
    if spec.bias is not None:
        y = y + 4 * spec.bias[None, :, None, None, None, None]
    plane = y.transpose(0, 1, 2, 4, 3, 5).reshape(n_, spec.out_channels, 2 * ty_, 2 * tx_)
    out = requant_array(plane[:, :, :oh, :ow], shift, spec.out_qparams.int_min, spec.out_qparams.int_max)
    return QTensor(out.shape, out, spec.out_qparams)


# Per-layer op counting (must match the hooked emission exactly; checked in tests).

def direct_layer_counts(n: int, c: int, k: int, oh: int, ow: int) -> dict[Stage, dict[OpType, int]]:
    macs = n * k * oh * ow * c * 9
    return {Stage.DIRECT_MAC: {OpType.MUL: macs, OpType.ADD: macs}}


def winograd_layer_counts(
    n: int, c: int, k: int, oh: int, ow: int, include_filter_tf: bool = False
) -> dict[Stage, dict[OpType, int]]:
    ty, tx = WinogradConfig.tile_grid(oh, ow)
    tiles = n * ty * tx
    counts = {
        Stage.WG_INPUT_TF: {OpType.MUL: 0, OpType.ADD: 32 * c * tiles},
        Stage.WG_EWMUL: {OpType.MUL: 16 * k * c * tiles, OpType.ADD: 0},
        Stage.WG_CHANNEL_SUM: {OpType.MUL: 0, OpType.ADD: 16 * k * c * tiles},
        Stage.WG_INVERSE_TF: {OpType.MUL: 0, OpType.ADD: 24 * k * tiles},
    }
    if include_filter_tf:
        counts[Stage.WG_FILTER_TF] = {OpType.MUL: 0, OpType.ADD: 42 * k * c}
    return counts
