"""Command-line interface: ``thinkey <command> ...``.

Exit codes: 0 success, 1 usage error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import analytics as A
from . import report, weightfile
from .factored import CompressionMode, compress_model, factor_layer, truncate
from .model import ModelConfig, init_model
from .tasks import make_task
from .train import TrainConfig, TrainingDiverged, config_dict, eval_seed, evaluate_accuracy, finetune_qk, train

log = logging.getLogger("thinkey")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

# model shapes and training budgets per task; see README for the rationale
# Per-task training budget; any of these can be overridden by its flag.
TASK_DEFAULTS = {
    "copyback": {"n_layers": 2, "epochs": 80, "lr": 3e-3, "eval_samples": 512},
    "kvretrieval": {"n_layers": 4, "epochs": 400, "lr": 1e-3, "eval_samples": 2048},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated integer list, got {text!r}") from None


def _threads() -> int:
    raw = os.environ.get("THINKEY_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"THINKEY_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("THINKEY_THREADS must be >= 1")
    return n


# ------------------------------------------------------------ shared flags


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--d-model", type=int, default=64)
    g.add_argument("--n-heads", type=int, default=4)
    g.add_argument("--n-layers", type=int, default=None, help="default: 2 for copyback, 4 for kvretrieval")
    g.add_argument("--d-ff", type=int, default=128)


def _add_train_flags(p, epochs_default=None):
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=None, help="default: per task")
    g.add_argument("--epochs", type=int, default=epochs_default, help="default: per task")
    g.add_argument("--batches-per-epoch", type=int, default=d.batches_per_epoch)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--warmup-steps", type=int, default=d.warmup_steps)
    g.add_argument("--schedule", choices=["cosine", "constant"], default=d.schedule)
    g.add_argument("--weight-decay", type=float, default=d.weight_decay)
    g.add_argument("--grad-clip", type=float, default=d.grad_clip)
    g.add_argument("--eval-samples", type=int, default=None, help="default: per task")
    g.add_argument("--no-early-stop", action="store_true")


def _train_config(args, task_name, seed, mask="all") -> TrainConfig:
    def pick(name):
        value = getattr(args, name)
        return TASK_DEFAULTS[task_name][name] if value is None else value

    try:
        return TrainConfig(
            lr=pick("lr"),
            epochs=pick("epochs"),
            batches_per_epoch=args.batches_per_epoch,
            batch_size=args.batch_size,
            warmup_steps=args.warmup_steps,
            schedule=args.schedule,
            weight_decay=args.weight_decay,
            grad_clip=args.grad_clip,
            seed=seed,
            trainable_mask=mask,
            eval_samples=pick("eval_samples"),
            early_stop=not args.no_early_stop,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None


def _model_config(args, task, d_select, seed) -> ModelConfig:
    n_layers = args.n_layers or TASK_DEFAULTS[task.name]["n_layers"]
    try:
        return ModelConfig(
            n_layers=n_layers,
            d_model=args.d_model,
            n_heads=args.n_heads,
            d_select=d_select,
            d_ff=args.d_ff,
            vocab_size=task.model_vocab,
            max_seq_len=task.model_seq_len,
            seed=seed,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None


def _task(name):
    try:
        return make_task(name)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _load(path):
    try:
        return weightfile.load(path)
    except (OSError, weightfile.WeightFileError) as e:
        raise UsageError(f"cannot read checkpoint {path}: {e}") from None


def _report_path(args, default_from=None):
    if getattr(args, "report", None):
        return Path(args.report)
    if default_from:
        return Path(str(default_from) + ".json")
    return None


def _emit(doc, path):
    text = report.dumps(doc)
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _progress(args):
    if not getattr(args, "verbose", False):
        return None

    def cb(rec):
        print(f"epoch {rec['epoch']:5d}  loss {rec['loss']:.4f}  acc {rec['accuracy']:.4f}", file=sys.stderr)

    return cb


def _train_one(args, task, d_select, seed):
    mcfg = _model_config(args, task, d_select, seed)
    tcfg = _train_config(args, task.name, seed)
    model, hist = train(init_model(mcfg), task, tcfg, _progress(args))
    return mcfg, tcfg, model, hist


# ------------------------------------------------------------ commands


def cmd_train_task(args):
    task = _task(args.task)
    mcfg, tcfg, model, hist = _train_one(args, task, args.d_select, args.seed)
    weightfile.save(args.out, model)
    results = {
        "final_accuracy": hist.final_accuracy,
        "best_accuracy": hist.best_accuracy,
        "converge_epoch": hist.converge_epoch,
        "epochs_run": len(hist.epochs),
        "d_select_per_head": args.d_select // mcfg.n_heads,
        "checkpoint": Path(args.out).name,
        "history": hist.epochs,
    }
    inputs = {"task": task.name, "model": config_dict(mcfg), "train": config_dict(tcfg)}
    _emit(report.make_report("train-task", inputs, results, seed=args.seed), _report_path(args, args.out))
    return EXIT_OK


def cmd_factorize(args):
    model = _load(args.inp)
    mode = args.mode
    layers = []
    for i in range(model.cfg.n_layers):
        width = model.params[model.qk_names(i)[1]].shape[1]
        if model.is_factored(i):
            raise UsageError(f"layer {i} is already factored")
        if args.rank > width:
            raise UsageError(f"rank {args.rank} exceeds key width {width} of layer {i}")
        layers.append(width)
    if args.rank < 1:
        raise UsageError("rank must be >= 1")
    per_layer = []
    out = model
    if mode == "factored":
        for i in range(model.cfg.n_layers):
            out, fp = factor_layer(out, i, args.rank)
            per_layer.append(_layer_row(i, layers[i], args.rank, fp.sigma, fp.sigma_discarded))
            per_layer[-1].update(_qk_asymmetry(model, i, args.rank))
    else:
        from .linalg import full_svd

        for i in range(model.cfg.n_layers):
            s = full_svd(model.params[f"layers.{i}.attn.w_k"]).s
            per_layer.append(_layer_row(i, layers[i], layers[i], s[: args.rank], s[args.rank :]))
            per_layer[-1].update(_qk_asymmetry(model, i, args.rank))
        out = compress_model(model, args.rank, CompressionMode(mode))
    weightfile.save(args.out, out)
    before = sum(layers)
    after = sum(r["key_width_after"] for r in per_layer)
    results = {
        "layers": per_layer,
        "key_cache_width_before": before,
        "key_cache_width_after": after,
        "key_cache_saved_fraction": (before - after) / before,
        "rank_saved_fraction": (before - args.rank * len(layers)) / before,
    }
    inputs = {"in": Path(args.inp).name, "rank": args.rank, "mode": mode, "out": Path(args.out).name}
    _emit(report.make_report("factorize", inputs, results), _report_path(args, args.out))
    return EXIT_OK


def _layer_row(i, width, width_after, kept, dropped):
    kept_e = float((kept**2).sum())
    drop_e = float((dropped**2).sum())
    return {
        "layer": i,
        "key_width_before": width,
        "key_width_after": width_after,
        "retained_energy": kept_e,
        "discarded_energy": drop_e,
        "retained_energy_fraction": kept_e / (kept_e + drop_e) if kept_e + drop_e > 0 else 1.0,
        "discarded_frobenius": math.sqrt(drop_e),
    }


def _qk_asymmetry(model, i, rank):
    """Relative error of the bilinear form W_Q W_K^T when only K, or only Q, is cut to ``rank``."""
    w_q, w_k = model.params[f"layers.{i}.attn.w_q"], model.params[f"layers.{i}.attn.w_k"]
    full = w_q @ w_k.T
    norm = float(np.linalg.norm(full)) or 1.0
    return {
        "k_only_rel_error": float(np.linalg.norm(full - w_q @ truncate(w_k, rank).T)) / norm,
        "q_only_rel_error": float(np.linalg.norm(full - truncate(w_q, rank) @ w_k.T)) / norm,
    }


def cmd_finetune_qk(args):
    task = _task(args.task)
    model = _load(args.inp)
    tcfg = _train_config(args, task.name, args.seed, mask="qk_only")
    before = evaluate_accuracy(model, task, tcfg.eval_samples, eval_seed(args.seed))
    tuned, hist = finetune_qk(model, task, tcfg, _progress(args))
    weightfile.save(args.out, tuned)
    results = {
        "accuracy_before": before,
        "final_accuracy": hist.final_accuracy,
        "best_accuracy": hist.best_accuracy,
        "converge_epoch": hist.converge_epoch,
        "epochs_run": len(hist.epochs),
        "history": hist.epochs,
    }
    inputs = {"in": Path(args.inp).name, "task": task.name, "train": config_dict(tcfg), "out": Path(args.out).name}
    _emit(report.make_report("finetune-qk", inputs, results, seed=args.seed), _report_path(args, args.out))
    return EXIT_OK


def cmd_eval(args):
    task = _task(args.task)
    model = _load(args.model)
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    if model.cfg.vocab_size != task.model_vocab or model.cfg.max_seq_len < task.model_seq_len:
        raise UsageError(f"checkpoint shape does not fit task {task.name}")
    acc = evaluate_accuracy(model, task, args.samples, args.seed)
    results = {"accuracy": acc, "key_cache_widths": model.key_cache_widths()}
    inputs = {"model": Path(args.model).name, "task": task.name, "samples": args.samples}
    _emit(report.make_report("eval", inputs, results, seed=args.seed), _report_path(args))
    return EXIT_OK


def parse_method(text: str) -> A.MethodSpec:
    """``mha``, ``thin:DS``, ``gqa:G``, ``mla:DC[:DROPE]``, ``gqa+thin:G:DS``,
    ``quant:KBITS:VBITS:<inner>``."""
    t = text.strip().lower()
    parts = t.split(":")
    try:
        if t == "mha":
            return A.MHA()
        if parts[0] == "thin" and len(parts) == 2:
            return A.ThinKeys(int(parts[1]))
        if parts[0] == "gqa" and len(parts) == 2:
            return A.GQA(int(parts[1]))
        if parts[0] == "mla" and len(parts) in (2, 3):
            return A.MLA(int(parts[1]), int(parts[2]) if len(parts) == 3 else 0)
        if parts[0] == "gqa+thin" and len(parts) == 3:
            return A.GQAPlusThin(int(parts[1]), int(parts[2]))
        if parts[0] == "quant" and len(parts) >= 4:
            return A.Quantized(parse_method(":".join(parts[3:])), int(parts[1]), int(parts[2]))
    except ValueError as e:
        raise UsageError(f"bad method {text!r}: {e}") from None
    raise UsageError(f"bad method {text!r}")


def _cache_spec(text: str) -> A.CacheSpec:
    p = Path(text)
    try:
        raw = json.loads(p.read_text()) if p.exists() else json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"--config is neither a JSON file nor inline JSON: {e}") from None
    try:
        return A.CacheSpec(**raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid cache spec: {e}") from None


def cmd_cache_report(args):
    spec = _cache_spec(args.config)
    methods = [parse_method(m) for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise UsageError("--methods is empty")
    try:
        rows = A.composition_report(spec, methods)
    except ValueError as e:
        raise UsageError(str(e)) from None
    inputs = {
        "config": {k: getattr(spec, k) for k in spec.__dataclass_fields__},
        "n_tokens": spec.n_tokens,
        "methods": [m.label for m in methods],
    }
    _emit(report.make_report("cache-report", inputs, rows), _report_path(args))
    return EXIT_OK


def cmd_roofline(args):
    try:
        preset = A.PRESETS[args.preset]
        base, comp = A.preset_roofline_inputs(preset, args.rank)
    except KeyError:
        raise UsageError(f"unknown preset {args.preset!r}") from None
    except ValueError as e:
        raise UsageError(str(e)) from None
    rows = A.speedup_table(preset, args.rank, args.batches)
    results = {
        "weight_bytes": base.weight_bytes,
        "weight_bytes_factored": comp.weight_bytes,
        "weight_params_saved": preset.weight_savings_params(args.rank),
        "kv_bytes_per_seq": base.kv_bytes_per_seq,
        "kv_bytes_per_seq_factored": comp.kv_bytes_per_seq,
        "speedup_b0": base.weight_bytes / comp.weight_bytes,
        "speedup_limit": base.kv_bytes_per_seq / comp.kv_bytes_per_seq,
        "rows": rows,
    }
    inputs = {"preset": preset.name, "rank": args.rank, "batches": args.batches}
    doc = report.make_report("roofline", inputs, results, extra_provenance={"citation": preset.citation})
    _emit(doc, _report_path(args))
    return EXIT_OK


def cmd_sweep(args):
    task = _task(args.task)
    threshold = args.pass_threshold
    rows = []
    if args.save_dir:
        Path(args.save_dir).mkdir(parents=True, exist_ok=True)
    for ds in args.d_select_list:
        for seed in args.seeds:
            mcfg, tcfg, model, hist = _train_one(args, task, ds, seed)
            if args.save_dir:
                weightfile.save(Path(args.save_dir) / f"{task.name}_ds{ds}_seed{seed}.akv", model)
            rows.append(
                {
                    "d_select": ds,
                    "d_select_per_head": ds // mcfg.n_heads,
                    "seed": seed,
                    "best_accuracy": hist.best_accuracy,
                    "final_accuracy": hist.final_accuracy,
                    "converge_epoch": hist.converge_epoch,
                    "passed": hist.best_accuracy >= threshold,
                }
            )
    passing = sorted({r["d_select_per_head"] for r in rows if all(
        q["passed"] for q in rows if q["d_select"] == r["d_select"])})
    results = {
        "rows": rows,
        "pass_threshold": threshold,
        "min_passing_d_select_per_head": passing[0] if passing else None,
        "effective_patterns": task.effective_patterns,
        "log2_patterns": math.log2(task.effective_patterns),
    }
    inputs = {"task": task.name, "d_select_list": args.d_select_list, "seeds": args.seeds,
              "model": config_dict(_model_config(args, task, args.d_select_list[0], args.seeds[0])),
              "train": config_dict(_train_config(args, task.name, args.seeds[0]))}
    _emit(report.make_report("sweep", inputs, results, seed=args.seeds[0]), _report_path(args))
    return EXIT_OK


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="thinkey", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train-task", help="train a toy model on an algorithmic task")
    s.add_argument("--task", required=True, choices=["copyback", "kvretrieval"])
    s.add_argument("--d-select", type=int, required=True)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--report", help="report path (default: <out>.json)")
    _add_model_flags(s)
    _add_train_flags(s)
    s.set_defaults(func=cmd_train_task)

    s = sub.add_parser("factorize", help="factor or truncate key projections of a checkpoint")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--rank", type=int, required=True)
    s.add_argument("--mode", choices=["factored", "konly", "qonly", "both"], default="factored")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_factorize)

    s = sub.add_parser("finetune-qk", help="fine-tune only query/key projections")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--task", required=True, choices=["copyback", "kvretrieval"])
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    _add_train_flags(s)
    s.set_defaults(func=cmd_finetune_qk)

    s = sub.add_parser("eval", help="held-out exact-match accuracy of a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--task", required=True, choices=["copyback", "kvretrieval"])
    s.add_argument("--samples", type=int, default=4096)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("cache-report", help="analytical KV-cache sizes")
    s.add_argument("--config", required=True, help="CacheSpec as a JSON file path or inline JSON")
    s.add_argument("--methods", required=True, help="e.g. mha,thin:1024,gqa:8,mla:512:64,gqa+thin:8:1024,quant:4:16:thin:1024")
    s.add_argument("--report")
    s.set_defaults(func=cmd_cache_report)

    s = sub.add_parser("roofline", help="bandwidth-bound decode speedup of factored keys")
    s.add_argument("--preset", required=True, choices=sorted(A.PRESETS))
    s.add_argument("--rank", type=int, required=True, help="total key width per layer after factoring")
    s.add_argument("--batches", type=_int_list, default=[1, 4, 8, 16, 32])
    s.add_argument("--report")
    s.set_defaults(func=cmd_roofline)

    s = sub.add_parser("sweep", help="train over a d_select grid and summarize")
    s.add_argument("--task", required=True, choices=["copyback", "kvretrieval"])
    s.add_argument("--d-select-list", type=_int_list, required=True)
    s.add_argument("--seeds", type=_int_list, default=[1])
    s.add_argument("--pass-threshold", type=float, default=0.99)
    s.add_argument("--save-dir", help="also write each trained checkpoint here as <task>_ds<N>_seed<S>.akv")
    s.add_argument("--report")
    _add_model_flags(s)
    _add_train_flags(s)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _threads()
        return args.func(args)
    except UsageError as e:
        print(f"thinkey: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"thinkey: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
