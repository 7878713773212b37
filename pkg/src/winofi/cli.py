"""Command-line harness for fault-injection campaigns.

Subcommands: sweep, layer-vuln, optype-vuln, plan-tmr, eval-tmr,
profile-ranges, replay, gen-model, gen-dataset. Config files (--config) hold
the same keys as the flags; flags override file values. Result files embed
tool version, seed, config hash, and the effective config, so any campaign
can be re-run or replayed exactly. Logs go to stderr; results go to files or
stdout. Exit codes: 0 ok, 2 config error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

from . import __version__
from .analyze import (
    Campaign,
    CampaignResult,
    campaign_csv,
    campaign_json,
    layer_vulnerability,
    mean_ci95,
    optype_vulnerability,
    sweep_ber,
    vuln_csv,
    vuln_json,
)
from .errors import BitPositionError, ConfigError, ShapeError
from .inject import FaultTrace, Granularity, InjectionConfig, Scope
from .mitigate import RangeProfile, profile_ranges
from .modelio import (
    builtin_model,
    generate_dataset,
    generate_toy_model,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
)
from .runtime import enumerate_ops, top1
from .tmr import (
    CostModel,
    TmrPlan,
    full_protection_overhead,
    make_segment_eval,
    measure_segment_vulnerability,
    plan_tmr,
    run_with_tmr,
    segment_ops,
    tmr_overhead,
)

log = logging.getLogger("winofi")

# Keys that determine campaign results (hashed into config_hash and embedded
# in result metadata; output/format/workers are presentation only).
_REPRO_KEYS = (
    "command", "model", "dataset", "engine", "granularity", "ber", "trials",
    "seed", "scope", "fault_bits", "use_labels", "ranges", "range_mode",
    "segment_size", "target_acc", "literal_do_while", "plan", "cost_mul", "cost_add",
)


def _canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(_canonical(cfg).encode()).hexdigest()[:16]


def _effective_config(args: argparse.Namespace, command: str) -> dict:
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                file_cfg = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
    cfg = dict(file_cfg)
    for key, val in vars(args).items():
        if key in ("config", "func") or val is None:
            continue
        cfg[key] = val
    cfg["command"] = command
    return cfg


def _repro_subset(cfg: dict) -> dict:
    return {k: cfg[k] for k in _REPRO_KEYS if k in cfg and cfg[k] is not None}


def _meta(cfg: dict) -> dict:
    repro = _repro_subset(cfg)
    return {
        "tool": "winofi",
        "version": __version__,
        "seed": cfg.get("seed", 0),
        "config_hash": _config_hash(repro),
        "config": _canonical(repro),
    }


def _parse_ber_list(text) -> list:
    if isinstance(text, (list, tuple)):
        return [float(b) for b in text]
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if part:
            out.append(float(part))
    if not out:
        raise ConfigError("empty --ber list")
    return out


def _parse_fault_bits(text):
    if text is None or isinstance(text, int):
        return text
    if isinstance(text, dict):
        return text
    text = str(text)
    if ":" in text:
        out = {}
        for item in text.split(","):
            key, val = item.split(":")
            out[key.strip().upper()] = int(val)
        return out
    return int(text)


def _write_output(cfg: dict, text: str) -> None:
    out = cfg.get("out")
    if out:
        with open(out, "w") as f:
            f.write(text)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _campaign_kwargs(cfg: dict):
    scope = Scope.parse(cfg.get("scope", "")) if isinstance(cfg.get("scope", ""), str) else cfg["scope"]
    ranges = RangeProfile.load_json(cfg["ranges"]) if cfg.get("ranges") else None
    return dict(
        granularity=Granularity(cfg.get("granularity", "op")),
        scope=scope,
        fault_bits=_parse_fault_bits(cfg.get("fault_bits")),
        use_labels=bool(cfg.get("use_labels", False)),
        ranges=ranges,
        range_mode=cfg.get("range_mode", "clamp"),
        workers=cfg.get("workers"),
    )


def _load_pair(cfg: dict):
    if "model" not in cfg:
        raise ConfigError("a --model directory is required")
    if "dataset" not in cfg:
        raise ConfigError("a --dataset directory is required")
    model = load_model(cfg["model"], strict=not cfg.get("lenient", False))
    dataset = load_dataset(cfg["dataset"], strict=not cfg.get("lenient", False))
    return model, dataset


def _render_campaign(cfg: dict, results, meta: dict) -> str:
    if cfg.get("format", "csv") == "json":
        return json.dumps(campaign_json(results, meta), indent=2, sort_keys=True) + "\n"
    return campaign_csv(results, meta)


def _render_vuln(cfg: dict, reports, meta: dict) -> str:
    if cfg.get("format", "csv") == "json":
        return json.dumps(vuln_json(reports, meta), indent=2, sort_keys=True) + "\n"
    return vuln_csv(reports, meta)


# ---------------------------------------------------------------------------
# Commands


def cmd_sweep(cfg: dict, replay=None) -> None:
    model, dataset = _load_pair(cfg)
    bers = _parse_ber_list(cfg.get("ber", "0"))
    trace = FaultTrace() if cfg.get("save_trace") else None
    if trace is not None and len(bers) != 1:
        raise ConfigError(
            "--save-trace needs a single-BER campaign (a trace cannot tell "
            "flips of different BER points apart); run one sweep per point"
        )
    results = sweep_ber(
        model, dataset, cfg.get("engine"),
        bers,
        trials=int(cfg.get("trials", 100)),
        seed=int(cfg.get("seed", 0)),
        trace=trace,
        replay=replay,
        **_campaign_kwargs(cfg),
    )
    _write_output(cfg, _render_campaign(cfg, results, _meta(cfg)))
    if trace is not None:
        trace.save_jsonl(cfg["save_trace"])
        log.info("saved fault trace to %s", cfg["save_trace"])


def cmd_layer_vuln(cfg: dict, replay=None) -> None:
    model, dataset = _load_pair(cfg)
    kw = _campaign_kwargs(cfg)
    kw.pop("granularity", None)
    kw.pop("ranges", None)
    kw.pop("range_mode", None)
    bers = _parse_ber_list(cfg.get("ber", "0"))
    if len(bers) != 1:
        raise ConfigError("layer-vuln expects a single --ber")
    reports = layer_vulnerability(
        model, dataset, cfg.get("engine"), bers[0],
        trials=int(cfg.get("trials", 100)), seed=int(cfg.get("seed", 0)), **kw,
    )
    meta = _meta(cfg)
    meta["ber"] = bers[0]
    _write_output(cfg, _render_vuln(cfg, reports, meta))


def cmd_optype_vuln(cfg: dict, replay=None) -> None:
    model, dataset = _load_pair(cfg)
    kw = _campaign_kwargs(cfg)
    kw.pop("granularity", None)
    kw.pop("ranges", None)
    kw.pop("range_mode", None)
    bers = _parse_ber_list(cfg.get("ber", "0"))
    if len(bers) != 1:
        raise ConfigError("optype-vuln expects a single --ber")
    mul, add = optype_vulnerability(
        model, dataset, cfg.get("engine"), bers[0],
        trials=int(cfg.get("trials", 100)), seed=int(cfg.get("seed", 0)), **kw,
    )
    meta = _meta(cfg)
    meta["ber"] = bers[0]
    _write_output(cfg, _render_vuln(cfg, [mul, add], meta))


def cmd_plan_tmr(cfg: dict, replay=None) -> None:
    model, dataset = _load_pair(cfg)
    if "segment_size" not in cfg:
        raise ConfigError("--segment-size is required")
    if "target_acc" not in cfg:
        raise ConfigError("--target-acc is required")
    bers = _parse_ber_list(cfg.get("ber", "0"))
    if len(bers) != 1:
        raise ConfigError("plan-tmr expects a single --ber")
    ber = bers[0]
    trials = int(cfg.get("trials", 100))
    seed = int(cfg.get("seed", 0))
    kw = _campaign_kwargs(cfg)
    engine = cfg.get("engine") or model.engine
    camp = Campaign(
        model, dataset, engine, seed=seed, scope=kw["scope"],
        fault_bits=kw["fault_bits"], use_labels=kw["use_labels"], workers=kw["workers"],
    )
    segments = segment_ops(camp.opspace.total_ops, int(cfg["segment_size"]))
    log.info("measuring vulnerability of %d segments", len(segments))
    reports = measure_segment_vulnerability(
        model, dataset, engine, ber, segments, trials, seed, campaign=camp
    )
    cost = CostModel(
        add_weight=float(cfg.get("cost_add", 1.0)), mul_weight=float(cfg.get("cost_mul", 6.67))
    )
    plan = plan_tmr(
        [r.delta for r in reports],
        segments,
        float(cfg["target_acc"]),
        make_segment_eval(camp, ber, trials),
        opspace=camp.opspace,
        cost=cost,
        direct_opspace=enumerate_ops(model, "direct", fault_bits=kw["fault_bits"]),
        v_ci=[r.ci95_halfwidth for r in reports],
        literal_do_while=bool(cfg.get("literal_do_while", False)),
    )
    doc = plan.to_dict()
    doc["meta"] = _meta(cfg)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    _write_output(cfg, text)


def cmd_eval_tmr(cfg: dict, replay=None) -> None:
    model, dataset = _load_pair(cfg)
    if "plan" not in cfg:
        raise ConfigError("--plan file is required")
    plan = TmrPlan.load_json(cfg["plan"])
    bers = _parse_ber_list(cfg.get("ber", "0"))
    if cfg.get("save_trace") and len(bers) != 1:
        raise ConfigError("--save-trace needs a single-BER campaign")
    trials = int(cfg.get("trials", 100))
    seed = int(cfg.get("seed", 0))
    kw = _campaign_kwargs(cfg)
    engine = cfg.get("engine") or model.engine
    camp = Campaign(
        model, dataset, engine, seed=seed, scope=kw["scope"],
        fault_bits=kw["fault_bits"], use_labels=kw["use_labels"], workers=1,
    )
    trace = FaultTrace() if cfg.get("save_trace") else None
    results = []
    for ber in bers:
        per_trial = []
        for t in range(trials):
            correct = 0
            for i, s in enumerate(dataset.samples):
                icfg = InjectionConfig(Granularity.OP_LEVEL, ber, seed, kw["scope"], fault_bits=kw["fault_bits"])
                out = run_with_tmr(model, s, engine, plan, icfg, trial=t, sample=i,
                                   trace=trace, replay=replay)
                correct += int(top1(out) == camp.refs[i])
            per_trial.append(correct)
        accs = [c / camp.sample_count for c in per_trial]
        mean, ci = mean_ci95(accs)
        results.append(CampaignResult(
            ber=ber, trials=trials, sample_count=camp.sample_count,
            per_trial_correct=per_trial, mean_accuracy=mean, ci95_halfwidth=ci,
            clean_accuracy=camp.clean_accuracy,
        ))
    _write_output(cfg, _render_campaign(cfg, results, _meta(cfg)))
    if trace is not None:
        trace.save_jsonl(cfg["save_trace"])


def cmd_profile_ranges(cfg: dict, replay=None) -> None:
    model, dataset = _load_pair(cfg)
    prof = profile_ranges(model, dataset, cfg.get("engine"))
    doc = prof.to_dict()
    doc["_meta"].update(_meta(cfg))
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    _write_output(cfg, text)


_REPLAYABLE = {
    "sweep": cmd_sweep,
    "eval-tmr": cmd_eval_tmr,
}


def _extract_embedded_config(path: str) -> tuple[dict, str]:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read result file: {e}") from e
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        meta = doc.get("meta", {})
        if "config" not in meta:
            raise ConfigError("result file carries no embedded config")
        return json.loads(meta["config"]), "json"
    for line in text.splitlines():
        if line.startswith("# config="):
            return json.loads(line[len("# config=") :]), "csv"
    raise ConfigError("result file carries no embedded config")


def cmd_replay(cfg: dict, replay=None) -> None:
    if "results" not in cfg or "trace" not in cfg:
        raise ConfigError("replay needs --results and --trace")
    embedded, fmt = _extract_embedded_config(cfg["results"])
    command = embedded.get("command", "sweep")
    if command not in _REPLAYABLE:
        raise ConfigError(f"cannot replay a {command!r} result")
    trace = FaultTrace.load_jsonl(cfg["trace"])
    run_cfg = dict(embedded)
    run_cfg["format"] = cfg.get("format") or fmt
    run_cfg["out"] = cfg.get("out")
    run_cfg.pop("save_trace", None)
    _REPLAYABLE[command](run_cfg, replay=trace)


def cmd_gen_model(cfg: dict, replay=None) -> None:
    if "out" not in cfg:
        raise ConfigError("--out directory is required")
    if cfg.get("name") and cfg["name"] != "custom":
        model = builtin_model(cfg["name"])
    else:
        model = generate_toy_model(
            depth=int(cfg.get("depth", 3)),
            channels=int(cfg.get("channels", 4)),
            bit_width=int(cfg.get("bit_width", 8)),
            seed=int(cfg.get("seed", 0)),
            hw=int(cfg.get("hw", 8)),
            in_channels=int(cfg.get("in_channels", 1)),
            classes=int(cfg.get("classes", 4)),
            engine=cfg.get("engine", "direct"),
        )
    save_model(model, cfg["out"])
    log.info("wrote model %s to %s", model.name, cfg["out"])


def cmd_gen_dataset(cfg: dict, replay=None) -> None:
    if "model" not in cfg or "out" not in cfg:
        raise ConfigError("gen-dataset needs --model and --out")
    model = load_model(cfg["model"])
    from .modelio import Dataset

    ds = generate_dataset(model, int(cfg.get("count", 8)), int(cfg.get("seed", 0)))
    if cfg.get("with_labels"):
        import numpy as np

        classes = model.layers[-1].out_features
        rng = np.random.default_rng(int(cfg.get("seed", 0)) + 1)
        ds = Dataset(ds.samples, labels=rng.integers(0, classes, size=len(ds)).tolist())
    save_dataset(ds, cfg["out"])
    log.info("wrote %d samples to %s", len(ds), cfg["out"])


# ---------------------------------------------------------------------------
# Argument parsing


def _add_common(p: argparse.ArgumentParser, *, dataset=True, campaign=True):
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--model", help="model directory")
    if dataset:
        p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--engine", choices=["direct", "winograd"], help="conv engine (default: model's)")
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--lenient", action="store_true", default=None, help="warn instead of failing on unknown manifest fields")
    if campaign:
        p.add_argument("--ber", help="comma-separated bit error rates")
        p.add_argument("--trials", type=int, help="Monte-Carlo trials per point (default 100)")
        p.add_argument("--seed", type=int, help="campaign seed (default 0)")
        p.add_argument("--scope", help="injection scope, e.g. 'exclude_layers=0;exclude_optypes=MUL;exclude_ops=0-36'")
        p.add_argument("--format", choices=["csv", "json"], help="result format (default csv)")
        p.add_argument("--fault-bits", dest="fault_bits", help="exposed result window, e.g. '16' or 'MUL:32,ADD:16'")
        p.add_argument("--use-labels", dest="use_labels", action="store_true", default=None, help="score against dataset labels instead of functional agreement")
        p.add_argument("--workers", type=int, help="trial parallelism (default $WINOFI_WORKERS or 1)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="winofi", description=__doc__)
    ap.add_argument("--version", action="version", version=f"winofi {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="chatty logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", help="accuracy-vs-BER campaign")
    _add_common(p)
    p.add_argument("--granularity", choices=["op", "neuron"], help="injection granularity (default op)")
    p.add_argument("--save-trace", dest="save_trace", help="write applied flips to a JSONL file")
    p.add_argument("--ranges", help="range profile JSON for constrained activation")
    p.add_argument("--range-mode", dest="range_mode", choices=["clamp", "zero"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("layer-vuln", help="per-layer vulnerability report")
    _add_common(p)
    p.set_defaults(func=cmd_layer_vuln)

    p = sub.add_parser("optype-vuln", help="MUL vs ADD vulnerability report")
    _add_common(p)
    p.set_defaults(func=cmd_optype_vuln)

    p = sub.add_parser("plan-tmr", help="segment the op stream and plan selective TMR")
    _add_common(p)
    p.add_argument("--segment-size", dest="segment_size", type=int, help="ops per protection segment")
    p.add_argument("--target-acc", dest="target_acc", type=float, help="accuracy the protected model must reach")
    p.add_argument("--literal-do-while", dest="literal_do_while", action="store_true", default=None, help="always protect at least one segment")
    p.add_argument("--cost-mul", dest="cost_mul", type=float, help="multiply weight at 8 bit (default 6.67)")
    p.add_argument("--cost-add", dest="cost_add", type=float, help="add weight at 8 bit (default 1.0)")
    p.set_defaults(func=cmd_plan_tmr)

    p = sub.add_parser("eval-tmr", help="Monte-Carlo accuracy of a TMR plan")
    _add_common(p)
    p.add_argument("--plan", help="plan JSON from plan-tmr")
    p.add_argument("--save-trace", dest="save_trace", help="write applied flips to a JSONL file")
    p.set_defaults(func=cmd_eval_tmr)

    p = sub.add_parser("profile-ranges", help="profile fault-free activation ranges")
    _add_common(p, campaign=False)
    p.add_argument("--seed", type=int, help="recorded in metadata")
    p.set_defaults(func=cmd_profile_ranges)

    p = sub.add_parser("replay", help="re-run a campaign from its saved fault trace")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.add_argument("--results", help="original result file (embeds the campaign config)")
    p.add_argument("--trace", help="fault trace JSONL")
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--format", choices=["csv", "json"])
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("gen-model", help="write a builtin or parametric toy model")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.add_argument("--name", help="builtin name (toycnn-int8, toycnn-int16, microcnn-int16) or 'custom'")
    p.add_argument("--depth", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--bit-width", dest="bit_width", type=int, choices=[8, 16])
    p.add_argument("--hw", type=int)
    p.add_argument("--in-channels", dest="in_channels", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--engine", choices=["direct", "winograd"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("gen-dataset", help="write a random dataset matching a model's input")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.add_argument("--model", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--with-labels", dest="with_labels", action="store_true", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _effective_config(args, args.command)
        args.func(cfg)
        return 0
    except (ConfigError, ShapeError, BitPositionError, ValueError) as e:
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return 2
    except Exception as e:  # noqa: BLE001 - surface runtime failures as exit 1
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
