"""``tegu`` command line: train, decode, evaluate, compare, sweep.

Artifacts go under ``--outdir``::

    outdir/checkpoints/{backbone,amateur,projector}.tegu
    outdir/traces/*.jsonl
    outdir/reports/*.{json,csv}
    outdir/config.snapshot.json

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid configuration.
Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .checkpoint import CheckpointError
from .cmtpp import Projector
from .decoding import DecodeError, DecodeTrace, GuidanceConfig, cd_decode, greedy_decode, tegu_decode
from .metrics import (
    diversity_report,
    efficiency_report,
    entropy_sweep,
    tegu_overhead_bytes,
    write_csv,
    write_entropy_report,
    write_json,
)
from .model import Backbone, ModelError
from .training import (
    ConfigError,
    TrainingError,
    detokenize_text,
    ingest_corpus,
    split_corpus,
    tokenize,
    train_backbone,
    train_projector,
)

log = logging.getLogger("tegu")

MODES = ("greedy", "cd", "tegu")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _csv_list(text: str, cast):
    try:
        return [cast(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _ints(text):
    return _csv_list(text, int)


def _floats(text):
    return _csv_list(text, float)


def _modes(text):
    modes = _csv_list(text, str)
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown mode(s) {bad}; choose from {MODES}")
    return modes


def _resolve(args) -> dict:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError([f"--config: {e}"]) from e
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides += [f"{s}.seed={args.seed}" for s in
                      ("model", "backbone_training", "projector", "projector_training", "guidance")]
    g = {
        "alpha": getattr(args, "alpha", None),
        "tau": getattr(args, "tau", None),
        "offsets": getattr(args, "offsets", None),
        "weights": getattr(args, "weights", None),
        "max_new_tokens": getattr(args, "max_new", None),
        "sampling": getattr(args, "sampling", None),
    }
    for key, value in g.items():
        if value is not None:
            overrides.append(f"guidance.{key}={json.dumps(value)}")
    if g["offsets"] is not None and g["weights"] is None:
        overrides.append(f"guidance.weights={json.dumps([1.0 / len(g['offsets'])] * len(g['offsets']))}")
    return C.validate_config(C.apply_overrides(doc, overrides))


def _ckpt(args, name: str) -> Path:
    explicit = getattr(args, name, None)
    return Path(explicit) if explicit else Path(args.outdir) / "checkpoints" / f"{name}.tegu"


def _load_backbone(args, name: str = "backbone") -> Backbone:
    return Backbone.load(_ckpt(args, name))


def _load_projector(args) -> Projector:
    return Projector.load(_ckpt(args, "projector"))


def _heldout(args, resolved) -> np.ndarray:
    _, held = split_corpus(ingest_corpus(args.corpus), resolved["eval"]["holdout_fraction"])
    return held


def heldout_prompts(held: np.ndarray, n_prompts: int, prompt_len: int) -> list[list[int]]:
    """``n_prompts`` evenly spaced windows of ``prompt_len`` tokens from ``held``."""
    span = len(held) - prompt_len
    if span < 0:
        raise TrainingError(f"held-out slice ({len(held)} tokens) shorter than one prompt ({prompt_len})")
    starts = np.linspace(0, span, n_prompts).astype(int)
    return [held[s : s + prompt_len].tolist() for s in starts]


def _emit(args, human: str, summary: dict) -> None:
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        print(human)


def run_mode(mode: str, prompt, bb: Backbone, gcfg: GuidanceConfig, projector=None, amateur=None):
    """Decode one prompt with ``mode``; returns ``(continuation, trace)``."""
    n = gcfg.max_new_tokens
    if mode == "greedy":
        tr = DecodeTrace("greedy")
        out = greedy_decode(prompt, bb, n, trace=tr)
    elif mode == "tegu":
        out, tr = tegu_decode(prompt, bb, projector, gcfg)
    elif mode == "cd":
        tr = DecodeTrace("cd")
        out = cd_decode(prompt, bb, amateur, gcfg.alpha, gcfg.tau, n, trace=tr)
    else:
        raise UsageError(f"unknown mode {mode}")
    return out[len(prompt):], tr


def _models_for(args, modes):
    bb = _load_backbone(args)
    proj = _load_projector(args) if "tegu" in modes else None
    am = _load_backbone(args, "amateur") if "cd" in modes else None
    return bb, proj, am


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train_backbone(args, resolved, out: Path) -> dict:
    which = "amateur" if args.amateur else "backbone"
    msec, tsec = ("amateur_model", "amateur_training") if args.amateur else ("model", "backbone_training")
    train, _ = split_corpus(ingest_corpus(args.corpus), resolved["eval"]["holdout_fraction"])
    model, losslog = train_backbone(
        train, C.model_config(resolved, msec), C.training_config(resolved, tsec),
        log_path=out / "reports" / f"{which}_loss.csv",
    )
    path = out / "checkpoints" / f"{which}.tegu"
    model.save(path)
    final = losslog.rows[-1]["total"]
    _emit(args, f"saved {path} (final loss {final:.4f})",
          dict(checkpoint=str(path), final_loss=final, digest=model.digest()))
    return {}


def cmd_train_projector(args, resolved, out: Path) -> dict:
    bb = _load_backbone(args)
    train, _ = split_corpus(ingest_corpus(args.corpus), resolved["eval"]["holdout_fraction"])
    before = bb.digest()
    proj, losslog = train_projector(
        train, bb, C.projector_config(resolved), C.training_config(resolved, "projector_training"),
        log_path=out / "reports" / "projector_loss.csv",
    )
    if bb.digest() != before:
        raise TrainingError("backbone parameters changed during projector training")
    path = out / "checkpoints" / "projector.tegu"
    proj.save(path)
    final = losslog.rows[-1]["total"]
    _emit(args, f"saved {path} (final loss {final:.4f}; backbone digest unchanged)",
          dict(checkpoint=str(path), final_loss=final, backbone_digest=before))
    return {}


def cmd_generate(args, resolved, out: Path) -> dict:
    if args.prompt_file:
        prompt = tokenize(Path(args.prompt_file).read_bytes()).tolist()
    elif args.prompt is not None:
        prompt = tokenize(args.prompt).tolist()
    else:
        raise UsageError("generate needs --prompt or --prompt-file")
    gcfg = C.guidance_config(resolved)
    bb, proj, am = _models_for(args, [args.mode])
    cont, tr = run_mode(args.mode, prompt, bb, gcfg, proj, am)
    trace_path = out / "traces" / f"generate_{args.mode}.jsonl"
    tr.write_jsonl(trace_path)
    text = detokenize_text(cont)
    _emit(args, text, dict(mode=args.mode, tokens=cont, text=text, trace=str(trace_path)))
    return {}


def cmd_eval_entropy(args, resolved, out: Path) -> dict:
    bb = _load_backbone(args)
    offsets = args.offsets or resolved["projector_training"]["offsets"]
    proj = _load_projector(args)
    held = _heldout(args, resolved)
    report = entropy_sweep(held, bb, proj, offsets)
    write_entropy_report(report, out / "reports")
    means = report.means()
    _emit(args, "\n".join(f"offset {k}: mean entropy {m:.4f} nats (n={report.offsets[k].count})"
                          for k, m in means.items()),
          dict(means={str(k): m for k, m in means.items()}))
    return {}


def _decode_prompts(args, resolved, modes, gcfg, prompts, bb, proj, am):
    conts, traces = {}, {}
    for mode in modes:
        conts[mode], traces[mode] = [], []
        for p in prompts:
            c, tr = run_mode(mode, p, bb, gcfg, proj, am)
            conts[mode].append(c)
            traces[mode].append(tr)
    return conts, traces


def cmd_eval_repetition(args, resolved, out: Path) -> dict:
    modes = args.modes
    ev = resolved["eval"]
    gcfg = C.guidance_config(resolved)
    gcfg.max_new_tokens = ev["max_new_tokens"] if args.max_new is None else gcfg.max_new_tokens
    bb, proj, am = _models_for(args, modes)
    prompts = heldout_prompts(_heldout(args, resolved), ev["n_prompts"], ev["prompt_len"])
    conts, _ = _decode_prompts(args, resolved, modes, gcfg, prompts, bb, proj, am)
    rows = [dict(mode=m, alpha=gcfg.alpha if m != "greedy" else 0.0, **diversity_report(conts[m]).to_dict())
            for m in modes]
    write_json(out / "reports" / "repetition.json", rows)
    write_csv(out / "reports" / "repetition.csv", rows)
    _emit(args, _table(rows, ["mode", "alpha", "distinct_1", "distinct_2", "rep_4", "n_tokens"]), dict(rows=rows))
    return {}


def cmd_compare(args, resolved, out: Path) -> dict:
    modes = args.modes
    ev = resolved["eval"]
    gcfg = C.guidance_config(resolved)
    gcfg.max_new_tokens = ev["max_new_tokens"] if args.max_new is None else gcfg.max_new_tokens
    bb, proj, am = _models_for(args, modes)
    prompts = heldout_prompts(_heldout(args, resolved), ev["n_prompts"], ev["prompt_len"])
    conts, traces = _decode_prompts(args, resolved, modes, gcfg, prompts, bb, proj, am)
    eff = {r.method: r for r in efficiency_report(traces)}
    rows = []
    for m in modes:
        row = dict(mode=m, **diversity_report(conts[m]).to_dict())
        row.update({k: v for k, v in eff[m].to_dict().items() if k != "method"})
        rows.append(row)
    if proj is not None:
        for row in rows:
            if row["mode"] == "tegu":
                row["analytic_overhead_bytes"] = tegu_overhead_bytes(proj, gcfg.max_offset, bb.config.d_model)
    for m in modes:
        for i, tr in enumerate(traces[m][:3]):
            tr.write_jsonl(out / "traces" / f"compare_{m}_{i}.jsonl")
    write_json(out / "reports" / "compare.json", rows)
    write_csv(out / "reports" / "compare.csv", rows)
    _emit(args, _table(rows, ["mode", "distinct_1", "distinct_2", "rep_4", "backbone_per_token",
                              "projector_per_token", "state_bytes", "ms_per_token"]), dict(rows=rows))
    return {}


def cmd_sweep_alpha(args, resolved, out: Path) -> dict:
    ev = resolved["eval"]
    base = C.guidance_config(resolved)
    base.max_new_tokens = ev["max_new_tokens"] if args.max_new is None else base.max_new_tokens
    bb, proj, _ = _models_for(args, ["tegu"])
    prompts = heldout_prompts(_heldout(args, resolved), ev["n_prompts"], ev["prompt_len"])
    rows = []
    greedy = [run_mode("greedy", p, bb, base)[0] for p in prompts]
    rows.append(dict(mode="greedy", alpha=0.0, **diversity_report(greedy).to_dict()))
    for a in args.values:
        g = GuidanceConfig(**{**base.to_dict(), "alpha": a})
        conts = [run_mode("tegu", p, bb, g, proj)[0] for p in prompts]
        rows.append(dict(mode="tegu", alpha=a, **diversity_report(conts).to_dict()))
    write_json(out / "reports" / "sweep_alpha.json", rows)
    write_csv(out / "reports" / "sweep_alpha.csv", rows)
    _emit(args, _table(rows, ["mode", "alpha", "distinct_1", "distinct_2", "rep_4"]), dict(rows=rows))
    return {}


def _table(rows, cols) -> str:
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [[fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


COMMANDS = {
    "train-backbone": cmd_train_backbone,
    "train-projector": cmd_train_projector,
    "generate": cmd_generate,
    "eval-entropy": cmd_eval_entropy,
    "eval-repetition": cmd_eval_repetition,
    "compare": cmd_compare,
    "sweep-alpha": cmd_sweep_alpha,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
    common.add_argument("--outdir", default="runs/default")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--json", action="store_true", help="machine-readable stdout")

    ckpts = argparse.ArgumentParser(add_help=False)
    ckpts.add_argument("--backbone", help="backbone checkpoint (default: outdir/checkpoints/backbone.tegu)")
    ckpts.add_argument("--projector", help="projector checkpoint")
    ckpts.add_argument("--amateur", help="amateur backbone checkpoint for cd mode")

    guide = argparse.ArgumentParser(add_help=False)
    guide.add_argument("--alpha", type=float)
    guide.add_argument("--tau", type=float)
    guide.add_argument("--offsets", type=_ints)
    guide.add_argument("--weights", type=_floats)
    guide.add_argument("--max-new", type=int, dest="max_new")
    guide.add_argument("--sampling", choices=["argmax", "categorical"])

    ap = argparse.ArgumentParser(prog="tegu", description="Temporal-guidance decoding lab")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-backbone", parents=[common])
    p.add_argument("--corpus", required=True)
    p.add_argument("--amateur", action="store_true", help="train the small CD amateur instead")

    p = sub.add_parser("train-projector", parents=[common])
    p.add_argument("--corpus", required=True)
    p.add_argument("--backbone")

    p = sub.add_parser("generate", parents=[common, ckpts, guide])
    p.add_argument("--mode", choices=MODES, default="tegu")
    p.add_argument("--prompt-file")
    p.add_argument("--prompt")

    p = sub.add_parser("eval-entropy", parents=[common])
    p.add_argument("--corpus", required=True)
    p.add_argument("--backbone")
    p.add_argument("--projector")
    p.add_argument("--offsets", type=_ints)

    p = sub.add_parser("eval-repetition", parents=[common, ckpts, guide])
    p.add_argument("--corpus", required=True)
    p.add_argument("--modes", type=_modes, default=["greedy", "tegu"])

    p = sub.add_parser("compare", parents=[common, ckpts, guide])
    p.add_argument("--corpus", required=True)
    p.add_argument("--modes", type=_modes, default=list(MODES))

    p = sub.add_parser("sweep-alpha", parents=[common, ckpts, guide])
    p.add_argument("--corpus", required=True)
    p.add_argument("--values", type=_floats, default=[0.1, 0.2, 0.3, 0.4, 0.5])
    return ap


def _fail(code: int, kind: str, message) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    out = Path(args.outdir)
    try:
        resolved = _resolve(args)
    except ConfigError as e:
        return _fail(3, "validation", e.problems)
    try:
        for sub in ("checkpoints", "traces", "reports"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        snapshot = dict(resolved, _command=args.command,
                        _argv=list(argv) if argv is not None else sys.argv[1:])
        write_json(out / "config.snapshot.json", snapshot)
        COMMANDS[args.command](args, resolved, out)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        return _fail(2, "usage", str(e))
    except (ConfigError, DecodeError) as e:
        return _fail(3, "validation", getattr(e, "problems", str(e)))
    except (TrainingError, CheckpointError, ModelError, OSError) as e:
        return _fail(1, type(e).__name__, str(e))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
