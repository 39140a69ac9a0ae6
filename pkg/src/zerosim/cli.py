"""Command line front end.

Five subcommands, one JSON config schema:

    volume       per-collective traffic table for one training step
    latency      alpha-beta time estimate for the same step
    train        run the toy training loop and dump per-step CSV
    memory       per-device memory table across sharding modes
    quant-bench  round-trip quantization error on synthetic tensors

Config values come from defaults, then the --config JSON file, then --seed,
then repeated --override key=value flags (dotted keys reach nested sections).
Unknown keys are rejected rather than ignored.  All output is deterministic:
the same invocation produces byte-identical bytes on stdout or in --out.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import sys
import csv

import numpy as np

from .errors import ConfigError, SimError
from .quantizer import FlatTensor, QuantConfig, quant_error_stats, quantize
from .topology import LinkParams, estimate_latency
from .partitioner import memory_report
from .engine import ToyTaskConfig, ZeroConfig, step_volumes, train_toy

DEFAULT_MODEL_PARAMS = 1 << 20

_QUANT_KEYS = frozenset(f.name for f in dataclasses.fields(QuantConfig))
_TASK_KEYS = frozenset(f.name for f in dataclasses.fields(ToyTaskConfig))
_LINK_KEYS = frozenset(f.name for f in dataclasses.fields(LinkParams))
_NESTED = {
    "weight_quant": _QUANT_KEYS,
    "grad_quant": _QUANT_KEYS,
    "grad_intra_quant": _QUANT_KEYS,
    "task": _TASK_KEYS,
    "links": _LINK_KEYS,
}
_ZERO_SCALARS = frozenset(f.name for f in dataclasses.fields(ZeroConfig)) - set(_NESTED)
_TOP_KEYS = _ZERO_SCALARS | set(_NESTED) | {"model_params", "group_size", "k_optim"}

_INT_KEYS = frozenset({
    "nodes", "gpus_per_node", "steps", "batch_per_rank", "seed", "grad_stages",
    "model_params", "group_size", "k_optim", "in_dim", "out_dim",
    "eval_samples", "bit_width", "block_size",
})
_BOOL_KEYS = frozenset({
    "quantized_weight_gather", "hierarchical_secondary_gather",
    "quantized_grad_reduce",
})
_FLOAT_KEYS = frozenset({
    "lr", "adam_beta1", "adam_beta2", "adam_eps", "grad_quant_fraction",
    "divergence_factor", "noise_sigma", "output_offset", "input_scale_range",
    "intra_alpha", "intra_beta", "inter_alpha", "inter_beta",
})
_STR_KEYS = frozenset({"mode", "rounding"})


def _coerce(key: str, value):
    """Check a leaf value against the type its key implies."""
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be an integer")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key} must be an integer")
        return int(value)
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if key in _STR_KEYS:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    if key == "hidden":
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError("hidden must be a non-empty list of layer widths")
        return tuple(int(v) for v in value)
    return value


def _check_config(cfg: dict) -> dict:
    """Reject unknown keys and normalize leaf types, returning a clean copy."""
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    out = {}
    for key, val in cfg.items():
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown config key: {key}")
        sub = _NESTED.get(key)
        if sub is None:
            out[key] = _coerce(key, val)
            continue
        if val is None:
            out[key] = None
            continue
        if not isinstance(val, dict):
            raise ConfigError(f"{key} must be a JSON object")
        section = {}
        for k2, v2 in val.items():
            if k2 not in sub:
                raise ConfigError(f"unknown config key: {key}.{k2}")
            section[k2] = _coerce(k2, v2)
        out[key] = section
    return out


def _set_dotted(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        child = node.get(p)
        if child is None:
            child = {}
            node[p] = child
        if not isinstance(child, dict):
            raise ConfigError(f"cannot override through non-object key: {p}")
        node = child
    node[parts[-1]] = value


def load_config(path=None, seed=None, overrides=()) -> dict:
    cfg = {}
    if path is not None:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    for key, value in overrides:
        _set_dotted(cfg, key, value)
    if seed is not None:
        cfg["seed"] = seed
    return _check_config(cfg)


def _quant_from(section, base: QuantConfig) -> QuantConfig:
    if section is None:
        return base
    merged = dict(bit_width=base.bit_width, block_size=base.block_size,
                  mode=base.mode, rounding=base.rounding)
    merged.update(section)
    return QuantConfig(**merged)


def build_zero_config(cfg: dict) -> ZeroConfig:
    defaults = ZeroConfig()
    kwargs = {k: cfg[k] for k in _ZERO_SCALARS if k in cfg}
    kwargs["weight_quant"] = _quant_from(cfg.get("weight_quant"), defaults.weight_quant)
    grad = _quant_from(cfg.get("grad_quant"), defaults.grad_quant)
    kwargs["grad_quant"] = grad
    if cfg.get("grad_intra_quant") is not None:
        # intra codec inherits the inter grad codec's settings
        kwargs["grad_intra_quant"] = _quant_from(cfg["grad_intra_quant"], grad)
    return ZeroConfig(**kwargs)


def build_task_config(cfg: dict) -> ToyTaskConfig:
    return ToyTaskConfig(**cfg.get("task") or {})


def build_links(cfg: dict) -> LinkParams:
    return LinkParams(**cfg.get("links") or {})


def cmd_volume(cfg: dict) -> str:
    zc = build_zero_config(cfg)
    m = cfg.get("model_params", DEFAULT_MODEL_PARAMS)
    ledger, _, _ = step_volumes(zc, m)
    return ledger.to_csv(m)


def cmd_latency(cfg: dict) -> str:
    zc = build_zero_config(cfg)
    m = cfg.get("model_params", DEFAULT_MODEL_PARAMS)
    links = build_links(cfg)
    _, _, traces = step_volumes(zc, m)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["collective", "stages", "intra_seconds", "inter_seconds",
                "compute_seconds", "total_seconds"])
    total = 0.0
    for trace, stages in traces:
        est = estimate_latency(trace, links, stages=stages)
        total += est.total_seconds
        w.writerow([est.label, est.stages, f"{est.intra_seconds:.9e}",
                    f"{est.inter_seconds:.9e}", f"{est.compute_seconds:.9e}",
                    f"{est.total_seconds:.9e}"])
    w.writerow(["total", "", "", "", "", f"{total:.9e}"])
    return buf.getvalue()


def cmd_train(cfg: dict) -> str:
    zc = build_zero_config(cfg)
    task = build_task_config(cfg)
    rec = train_toy(task, zc)
    print(f"steps={len(rec.steps)} initial_loss={rec.initial_loss:.6g} "
          f"final_loss={rec.final_loss:.6g} diverged={rec.diverged} "
          f"params={rec.m_params}", file=sys.stderr)
    return rec.to_csv()


def cmd_memory(cfg: dict) -> str:
    zc = build_zero_config(cfg)
    m = cfg.get("model_params", DEFAULT_MODEL_PARAMS)
    world = zc.nodes * zc.gpus_per_node
    group = cfg.get("group_size", zc.gpus_per_node)
    return memory_report(m, world, group, cfg.get("k_optim", 12))


def cmd_quant_bench(cfg: dict, elements: int, bits, blocks) -> str:
    """Round-trip error grid over bit widths and block sizes.

    The synthetic tensor has lognormal magnitudes, so its dynamic range is
    wide enough that one global scale visibly underperforms per-block scales.
    """
    if elements < 1:
        raise ConfigError("elements must be >= 1")
    rng = np.random.default_rng(cfg.get("seed", 0))
    values = rng.normal(size=elements) * rng.lognormal(0.0, 2.0, size=elements)
    t = FlatTensor(values)
    fp16_bytes = elements * 2
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bit_width", "block_size", "mode", "elements", "rmse",
                "max_abs_error", "bound_violations", "wire_bytes",
                "compression_vs_fp16"])
    grid = [(bw, bs, "blocked") for bw in bits for bs in blocks]
    grid += [(bw, None, "full_tensor") for bw in bits]
    for bw, bs, mode in grid:
        qc = QuantConfig(bit_width=bw, block_size=bs or 2048, mode=mode)
        stats = quant_error_stats(t, qc)
        q = quantize(t, qc)
        w.writerow([bw, q.config.block_size, mode, elements,
                    f"{stats.rmse:.9e}", f"{stats.max_abs_error:.9e}",
                    stats.per_block_bound_violations, q.wire_bytes,
                    f"{fp16_bytes / q.wire_bytes:.6f}"])
    return buf.getvalue()


def _override_pair(text: str):
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"override must look like key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _int_list(text: str):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", metavar="PATH", help="write output here instead of stdout")
    common.add_argument("--override", metavar="KEY=VALUE", type=_override_pair,
                        action="append", default=[],
                        help="set one config key (dotted paths reach nested sections)")

    p = argparse.ArgumentParser(prog="zerosim",
                                description="deterministic ZeRO-3 communication simulator")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("volume", parents=[common],
                   help="traffic table for one training step")
    sub.add_parser("latency", parents=[common],
                   help="alpha-beta latency estimate for one training step")
    sub.add_parser("train", parents=[common],
                   help="run the toy training loop, CSV of per-step records")
    sub.add_parser("memory", parents=[common],
                   help="per-device memory across sharding modes")
    qb = sub.add_parser("quant-bench", parents=[common],
                        help="quantization round-trip error grid")
    qb.add_argument("--elements", type=int, default=1 << 16)
    qb.add_argument("--bits", type=_int_list, default=[8, 4])
    qb.add_argument("--blocks", type=_int_list, default=[512, 2048])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.override)
        if args.command == "volume":
            text = cmd_volume(cfg)
        elif args.command == "latency":
            text = cmd_latency(cfg)
        elif args.command == "train":
            text = cmd_train(cfg)
        elif args.command == "memory":
            text = cmd_memory(cfg)
        else:
            text = cmd_quant_bench(cfg, args.elements, args.bits, args.blocks)
    except SimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.out:
        try:
            with open(args.out, "w", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            print(f"error: cannot write output: {exc}", file=sys.stderr)
            return 1
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
