"""Monte-Carlo campaigns: accuracy-vs-BER sweeps, RMSE output variation,
layer-wise and op-type vulnerability.

Accuracy defaults to functional top-1 agreement with the fault-free model on
the evaluation set (usable with random-weight models); labeled accuracy is
used when the dataset carries labels and ``use_labels`` is set. Campaign
randomness is keyed per (seed, trial, sample), so campaigns that differ only
in scope are exactly paired, and trial workers cannot change any result.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .engine import OpType
from .errors import ConfigError
from .inject import (
    FaultTrace,
    Granularity,
    InjectionConfig,
    Scope,
    neuron_level_inject,
    op_level_hook,
    replay_neuron_masks,
    replay_op_hook,
)
from .modelio import Dataset, ModelDef
from .runtime import enumerate_ops, run_inference, top1


def default_workers() -> int:
    return max(1, int(os.environ.get("WINOFI_WORKERS", "1")))


def mean_ci95(values) -> tuple[float, float]:
    """Mean and 1.96*sigma/sqrt(n) half-width over i.i.d. per-trial values."""
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean()) if arr.size else 0.0
    if arr.size < 2:
        return mean, 0.0
    return mean, float(1.96 * arr.std(ddof=1) / math.sqrt(arr.size))


@dataclass
class CampaignResult:
    ber: float
    trials: int
    sample_count: int
    per_trial_correct: list
    mean_accuracy: float
    ci95_halfwidth: float
    clean_accuracy: float
    layer_rmse: Optional[dict] = None  # conv layer_id -> mean RMSE over trials
    meta: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "ber": self.ber,
            "trials": self.trials,
            "samples": self.sample_count,
            "mean_accuracy": self.mean_accuracy,
            "ci95_halfwidth": self.ci95_halfwidth,
            "clean_accuracy": self.clean_accuracy,
        }


@dataclass
class VulnReport:
    subject_kind: str  # "layer" | "optype" | "segment"
    subject_id: object
    acc_prot: float
    acc_raw: float
    delta: float
    ci95_halfwidth: float = 0.0

    def row(self) -> dict:
        return {
            "subject_kind": self.subject_kind,
            "subject_id": self.subject_id,
            "acc_prot": self.acc_prot,
            "acc_raw": self.acc_raw,
            "delta": self.delta,
            "ci95_halfwidth": self.ci95_halfwidth,
        }


class Campaign:
    """Shared fixture for Monte-Carlo accuracy campaigns on one model/engine."""

    def __init__(
        self,
        model: ModelDef,
        dataset: Dataset,
        engine: Optional[str] = None,
        *,
        granularity: Granularity = Granularity.OP_LEVEL,
        seed: int = 0,
        scope: Scope = Scope(),
        fault_bits=None,
        use_labels: bool = False,
        ranges=None,
        range_mode: str = "clamp",
        workers: Optional[int] = None,
    ):
        if len(dataset) == 0:
            raise ConfigError("dataset is empty")
        self.model = model
        self.dataset = dataset
        self.engine = engine or model.engine
        self.granularity = Granularity(granularity)
        self.seed = seed
        self.base_scope = scope
        self.fault_bits = fault_bits
        self.ranges = ranges
        self.range_mode = range_mode
        self.workers = workers if workers is not None else default_workers()
        self.opspace = enumerate_ops(model, self.engine, fault_bits=fault_bits)
        clean = [
            run_inference(model, s, self.engine, ranges=ranges, range_mode=range_mode).output
            for s in dataset.samples
        ]
        self.clean_top1 = [top1(o) for o in clean]
        if use_labels:
            if dataset.labels is None:
                raise ConfigError("use_labels requires a labeled dataset")
            self.refs = list(dataset.labels)
        else:
            self.refs = self.clean_top1
        self.clean_correct = sum(int(a == b) for a, b in zip(self.clean_top1, self.refs))

    @property
    def sample_count(self) -> int:
        return len(self.dataset)

    @property
    def clean_accuracy(self) -> float:
        return self.clean_correct / self.sample_count

    # -- single faulty inference ---------------------------------------------

    def corrupted_output(self, trial: int, sample_idx: int, ber: float, scope: Scope,
                         trace: Optional[FaultTrace] = None, replay: Optional[FaultTrace] = None,
                         capture: tuple = ()):
        x = self.dataset.samples[sample_idx]
        cfg = InjectionConfig(self.granularity, ber, self.seed, scope, fault_bits=self.fault_bits)
        if self.granularity is Granularity.OP_LEVEL:
            if replay is not None:
                hook = replay_op_hook(replay.masks_for(trial, sample_idx, "op"))
            else:
                hook, _ = op_level_hook(cfg, self.opspace, trial=trial, sample=sample_idx, trace=trace)
            return run_inference(
                self.model, x, self.engine, hook,
                ranges=self.ranges, range_mode=self.range_mode, capture=capture,
            )
        offsets = self.opspace.neuron_offsets

        if replay is not None:
            masks = replay.masks_for(trial, sample_idx, "neuron")

            def neuron_fn(layer_id, out):
                return replay_neuron_masks(out, masks, offsets[layer_id])

        else:

            def neuron_fn(layer_id, out):
                return neuron_level_inject(
                    out, cfg, layer_id, trial=trial, sample=sample_idx,
                    neuron_offset=offsets[layer_id], trace=trace,
                )

        return run_inference(
            self.model, x, self.engine, neuron_fn=neuron_fn,
            ranges=self.ranges, range_mode=self.range_mode, capture=capture,
        )

    def trial_correct(self, trial: int, ber: float, scope: Scope,
                      trace: Optional[FaultTrace] = None, replay: Optional[FaultTrace] = None,
                      rmse_layers: tuple = (), rmse_acc: Optional[dict] = None) -> int:
        correct = 0
        for i, ref in enumerate(self.refs):
            res = self.corrupted_output(trial, i, ber, scope, trace=trace, replay=replay,
                                        capture=rmse_layers)
            correct += int(top1(res.output) == ref)
            if rmse_layers:
                for lid in rmse_layers:
                    clean = self._clean_capture(lid)[i]
                    faulty = res.conv_outputs[lid].dequantize()
                    rmse_acc[lid].append(float(np.sqrt(np.mean((faulty - clean) ** 2))))
        return correct

    def _clean_capture(self, layer_id: int) -> list:
        cache = getattr(self, "_clean_captures", None)
        if cache is None:
            cache = {}
            self._clean_captures = cache
        if layer_id not in cache:
            cache[layer_id] = [
                run_inference(self.model, s, self.engine, ranges=self.ranges,
                              range_mode=self.range_mode, capture=(layer_id,))
                .conv_outputs[layer_id].dequantize()
                for s in self.dataset.samples
            ]
        return cache[layer_id]

    # -- campaign points -------------------------------------------------------

    def run_point(
        self,
        ber: float,
        trials: int,
        scope: Optional[Scope] = None,
        *,
        trace: Optional[FaultTrace] = None,
        replay: Optional[FaultTrace] = None,
        rmse_layers: tuple = (),
        meta: Optional[dict] = None,
    ) -> CampaignResult:
        if trials < 1:
            raise ConfigError("trials must be >= 1")
        scope = scope if scope is not None else self.base_scope
        rmse_acc = {lid: [] for lid in rmse_layers}
        if ber == 0.0 and replay is None:
            # zero flips: every trial is the same deterministic inference
            correct = self.trial_correct(0, 0.0, scope, trace=trace,
                                         rmse_layers=rmse_layers, rmse_acc=rmse_acc)
            per_trial = [correct] * trials
        elif self.workers > 1 and trials > 1 and replay is None and trace is None and not rmse_layers:
            per_trial = self._parallel_trials(ber, trials, scope)
        else:
            per_trial = [
                self.trial_correct(t, ber, scope, trace=trace, replay=replay,
                                   rmse_layers=rmse_layers, rmse_acc=rmse_acc)
                for t in range(trials)
            ]
        accs = [c / self.sample_count for c in per_trial]
        mean, ci = mean_ci95(accs)
        info = {
            "engine": self.engine,
            "granularity": self.granularity.value,
            "seed": self.seed,
            "scope": scope.to_text(),
        }
        if meta:
            info.update(meta)
        return CampaignResult(
            ber=ber,
            trials=trials,
            sample_count=self.sample_count,
            per_trial_correct=per_trial,
            mean_accuracy=mean,
            ci95_halfwidth=ci,
            clean_accuracy=self.clean_accuracy,
            layer_rmse={lid: float(np.mean(v)) for lid, v in rmse_acc.items()} if rmse_layers else None,
            meta=info,
        )

    def _parallel_trials(self, ber: float, trials: int, scope: Scope) -> list:
        workers = min(self.workers, trials)
        blocks = [list(range(w, trials, workers)) for w in range(workers)]
        payload = (
            self.model, self.dataset, self.engine, self.granularity.value, self.seed,
            scope, self.fault_bits, self.refs, self.ranges, self.range_mode, ber,
        )
        out: dict[int, int] = {}
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(_trial_block_worker, [(payload, b) for b in blocks]):
                out.update(res)
        return [out[t] for t in range(trials)]


def _trial_block_worker(args):
    (model, dataset, engine, granularity, seed, scope, fault_bits, refs,
     ranges, range_mode, ber), block = args
    camp = Campaign(
        model, dataset, engine,
        granularity=Granularity(granularity), seed=seed, scope=scope,
        fault_bits=fault_bits, ranges=ranges, range_mode=range_mode, workers=1,
    )
    camp.refs = refs
    return {t: camp.trial_correct(t, ber, scope) for t in block}


# ---------------------------------------------------------------------------
# Analyses


def sweep_ber(
    model: ModelDef,
    dataset: Dataset,
    engine: Optional[str],
    ber_list,
    trials: int,
    seed: int,
    *,
    granularity: Granularity = Granularity.OP_LEVEL,
    scope: Scope = Scope(),
    fault_bits=None,
    use_labels: bool = False,
    ranges=None,
    range_mode: str = "clamp",
    workers: Optional[int] = None,
    trace: Optional[FaultTrace] = None,
    replay: Optional[FaultTrace] = None,
    rmse_layers: tuple = (),
) -> list[CampaignResult]:
    """One CampaignResult per BER; the BER=0 point equals clean accuracy exactly."""
    camp = Campaign(
        model, dataset, engine,
        granularity=granularity, seed=seed, scope=scope, fault_bits=fault_bits,
        use_labels=use_labels, ranges=ranges, range_mode=range_mode, workers=workers,
    )
    return [
        camp.run_point(ber, trials, trace=trace, replay=replay, rmse_layers=rmse_layers)
        for ber in ber_list
    ]


def rmse_layer(
    model: ModelDef,
    x,
    layer_id: int,
    cfg: InjectionConfig,
    engine: Optional[str] = None,
    trials: Optional[int] = None,
) -> float:
    """RMSE between fault-free and faulty dequantized outputs of one conv
    layer, averaged over trials."""
    engine = engine or model.engine
    space = enumerate_ops(model, engine, fault_bits=cfg.fault_bits)
    if layer_id not in space.neuron_sizes:
        raise ConfigError(f"layer {layer_id} is not a conv layer of this model")
    trials = trials if trials is not None else cfg.trials
    clean = run_inference(model, x, engine, capture=(layer_id,)).conv_outputs[layer_id].dequantize()
    offsets = space.neuron_offsets
    total = 0.0
    for t in range(trials):
        if cfg.granularity is Granularity.OP_LEVEL:
            hook, _ = op_level_hook(cfg, space, trial=t)
            res = run_inference(model, x, engine, hook, capture=(layer_id,))
        else:

            def neuron_fn(lid, out, _t=t):
                return neuron_level_inject(out, cfg, lid, trial=_t, neuron_offset=offsets[lid])

            res = run_inference(model, x, engine, neuron_fn=neuron_fn, capture=(layer_id,))
        faulty = res.conv_outputs[layer_id].dequantize()
        total += float(np.sqrt(np.mean((faulty - clean) ** 2)))
    return total / trials


def layer_vulnerability(
    model: ModelDef,
    dataset: Dataset,
    engine: Optional[str],
    ber: float,
    trials: int,
    seed: int,
    *,
    scope: Scope = Scope(),
    fault_bits=None,
    use_labels: bool = False,
    workers: Optional[int] = None,
) -> list[VulnReport]:
    """Per-layer accuracy gain from keeping that layer fault-free, paired
    against one shared unprotected baseline."""
    camp = Campaign(
        model, dataset, engine, seed=seed, scope=scope, fault_bits=fault_bits,
        use_labels=use_labels, workers=workers,
    )
    layers = camp.opspace.conv_layer_ids()
    if len(layers) < 2:
        raise ConfigError("layer vulnerability needs at least 2 conv layers")
    raw = camp.run_point(ber, trials)
    reports = []
    for lid in layers:
        prot = camp.run_point(ber, trials, scope.excluding_layer(lid))
        deltas = [
            (p - r) / camp.sample_count
            for p, r in zip(prot.per_trial_correct, raw.per_trial_correct)
        ]
        dmean, dci = mean_ci95(deltas)
        reports.append(
            VulnReport("layer", lid, prot.mean_accuracy, raw.mean_accuracy, dmean, dci)
        )
    return reports


def optype_vulnerability(
    model: ModelDef,
    dataset: Dataset,
    engine: Optional[str],
    ber: float,
    trials: int,
    seed: int,
    *,
    scope: Scope = Scope(),
    fault_bits=None,
    use_labels: bool = False,
    workers: Optional[int] = None,
) -> tuple[VulnReport, VulnReport]:
    """(MUL report, ADD report): accuracy with that op type kept fault-free."""
    camp = Campaign(
        model, dataset, engine, seed=seed, scope=scope, fault_bits=fault_bits,
        use_labels=use_labels, workers=workers,
    )
    raw = camp.run_point(ber, trials)
    out = []
    for typ in (OpType.MUL, OpType.ADD):
        prot = camp.run_point(ber, trials, scope.excluding_optype(typ))
        deltas = [
            (p - r) / camp.sample_count
            for p, r in zip(prot.per_trial_correct, raw.per_trial_correct)
        ]
        dmean, dci = mean_ci95(deltas)
        out.append(VulnReport("optype", typ.name, prot.mean_accuracy, raw.mean_accuracy, dmean, dci))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# Result serialization (column names are a stable, golden-tested surface)

CAMPAIGN_COLUMNS = ["ber", "trials", "samples", "mean_accuracy", "ci95_halfwidth", "clean_accuracy"]
VULN_COLUMNS = ["subject_kind", "subject_id", "acc_prot", "acc_raw", "delta", "ci95_halfwidth"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_csv(columns, rows, meta: Optional[dict] = None) -> str:
    lines = []
    for key in sorted(meta or {}):
        lines.append(f"# {key}={meta[key]}")
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    return "\n".join(lines) + "\n"


def campaign_csv(results, meta: Optional[dict] = None) -> str:
    return render_csv(CAMPAIGN_COLUMNS, [r.row() for r in results], meta)


def vuln_csv(reports, meta: Optional[dict] = None) -> str:
    return render_csv(VULN_COLUMNS, [r.row() for r in reports], meta)


def campaign_json(results, meta: Optional[dict] = None) -> dict:
    return {
        "meta": dict(meta or {}),
        "results": [
            dict(r.row(), per_trial_correct=list(r.per_trial_correct)) for r in results
        ],
    }


def vuln_json(reports, meta: Optional[dict] = None) -> dict:
    return {"meta": dict(meta or {}), "results": [r.row() for r in reports]}
