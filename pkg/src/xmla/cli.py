"""Command-line pipeline: corpora, teacher training, upcycling, distillation, DPO, reports.

Exit codes: 0 success, 2 usage/config errors, 1 runtime errors.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from .attention import MLA, ATTENTION, AttentionGeometry, cache_footprint, format_percent
from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .data import (VOCAB_SIZE, decode, load_corpus, load_pref_pairs, make_corpus, rng_stream, save_pref_pairs,
                   split_corpus, synth_pref_pairs)
from .errors import ConfigError, XmlaError
from .model import ModelConfig, generate, init_model, perplexity, upcycle_model
from .training import TrainPlan, distill_train, dpo_train, kl_distill_loss, preference_margin, train_lm, write_trace_csv
from .upcycle import FixedRanks, parse_rank_spec

log = logging.getLogger("xmla")

DTYPES = {"float32": np.float32, "float64": np.float64}

DEFAULT_MODEL = {
    "vocab_size": VOCAB_SIZE,
    "n_layers": 2,
    "geometry": {"d": 64, "n_h": 4, "n_kv": 2, "d_h": 16, "d_qk": 8, "d_r": 8, "r_q": 48, "r_kv": 24},
    "mlp_hidden": 128,
}

# published KV sizes the (r_kv + d_r) formula does not reproduce, keyed by
# (n_kv, d_h, d_r, r_kv, fraction of MLA layers)
UNRECONCILED_KV = {(8, 64, 32, 512, Fraction(1, 2)): "78.1"}


class UsageError(ConfigError):
    pass


# -- config handling ------------------------------------------------------------
def _load_json_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    return cfg


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args, allowed: dict, flag_keys) -> dict:
    """Defaults < JSON file < explicit flags; unknown keys are errors."""
    cfg = _load_json_config(getattr(args, "config", None))
    unknown = set(cfg) - set(allowed)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    out = _merge(allowed, cfg)
    plan_over = {}
    for key in flag_keys:
        val = getattr(args, key, None)
        if val is None:
            continue
        if key in ("steps", "lr", "batch_size", "seq_len", "ce_weight", "kl_weight", "dpo_beta"):
            plan_over[key] = val
        else:
            out[key] = val
    if plan_over:
        out["plan"] = _merge(out.get("plan") or {}, plan_over)
    return out


def _plan(cfg: dict) -> TrainPlan:
    plan = dict(cfg.get("plan") or {})
    plan.setdefault("seed", cfg.get("seed", 0))
    return TrainPlan.from_dict(plan)


def _require_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what} path")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _require_out(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what} path")
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory {parent} for {what} does not exist")
    return p


def _dtype(cfg: dict):
    try:
        return DTYPES[cfg.get("dtype", "float32")]
    except KeyError:
        raise UsageError(f"dtype must be one of {sorted(DTYPES)}") from None


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=False))


# -- commands -------------------------------------------------------------------
def cmd_gen_corpus(args) -> int:
    if args.tokens <= 0:
        raise UsageError("--tokens must be positive")
    out = _require_out(args.out, "corpus")
    data = make_corpus(args.kind, args.tokens, args.seed).astype(np.uint8).tobytes()
    atomic_write(out, lambda fh: fh.write(data))
    print(f"wrote {len(data)} tokens to {out}")
    return 0


TEACHER_KEYS = {"corpus": None, "out": None, "model": {}, "plan": {}, "seed": 0, "held_out": 0.1,
                "dtype": "float32", "context_len": 64}


def cmd_train_teacher(args) -> int:
    cfg = resolve_config(args, TEACHER_KEYS, ("corpus", "out", "seed", "steps", "lr", "batch_size", "seq_len"))
    corpus_path = _require_file(cfg["corpus"], "corpus")
    out = _require_out(cfg["out"], "checkpoint")
    model_cfg = ModelConfig.from_dict(_merge(DEFAULT_MODEL, cfg["model"]))
    if any(k != ATTENTION for k in model_cfg.layer_kinds):
        raise UsageError("a teacher must use attention layers only")
    plan = _plan(cfg)
    tokens = load_corpus(corpus_path)
    if tokens.max() >= model_cfg.vocab_size:
        raise UsageError("corpus contains ids outside the model vocabulary")
    train, held = split_corpus(tokens, cfg["held_out"])
    init_seed = int(rng_stream(cfg["seed"], "init").integers(2 ** 31))
    model = init_model(model_cfg, init_seed, _dtype(cfg))
    ppl0 = perplexity(model, held, cfg["context_len"])
    model, trace = train_lm(model, train, plan)
    save_checkpoint(model, out, extra={"role": "teacher", "plan": plan.to_dict()})
    ppl = perplexity(model, held, cfg["context_len"])
    _emit({"checkpoint": str(out), "initial_ppl": ppl0, "final_ppl": ppl,
           "final_loss": trace[-1]["total"], "params": model.num_params()})
    return 0


def _parse_layers(text: str):
    if text in (None, "all"):
        return "all"
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--layers must be 'all' or comma-separated integers, got {text!r}") from None


def cmd_upcycle(args) -> int:
    spec = parse_rank_spec(args.rank_spec)
    layers = _parse_layers(args.layers)
    ckpt = _require_file(args.ckpt, "checkpoint")
    out = _require_out(args.out, "checkpoint")
    donor = load_checkpoint(ckpt, dtype=np.float64)
    student, report = upcycle_model(donor, spec, layers, enable_ln=args.ln == "on", init=args.init,
                                    seed=args.seed)
    save_checkpoint(student.astype(np.float32), out, extra={"role": "upcycled", "report": report.to_dict()})
    _emit(report.to_dict())
    return 0


DISTILL_KEYS = {"student": None, "teacher": None, "corpus": None, "out": None, "trace": None, "plan": {},
                "seed": 0, "held_out": 0.1, "dtype": "float32", "context_len": 64}


def cmd_distill(args) -> int:
    cfg = resolve_config(args, DISTILL_KEYS, ("student", "teacher", "corpus", "out", "trace", "seed", "steps",
                                              "lr", "batch_size", "seq_len", "ce_weight", "kl_weight"))
    s_path = _require_file(cfg["student"], "student checkpoint")
    t_path = _require_file(cfg["teacher"], "teacher checkpoint")
    c_path = _require_file(cfg["corpus"], "corpus")
    out = _require_out(cfg["out"], "checkpoint")
    trace_path = _require_out(cfg["trace"] or str(out) + ".csv", "trace")
    plan = _plan(cfg)
    plan.check_sft()
    dtype = _dtype(cfg)
    student = load_checkpoint(s_path, dtype=dtype)
    teacher = load_checkpoint(t_path, dtype=dtype)
    if student.config.vocab_size != teacher.config.vocab_size:
        raise UsageError("student and teacher vocabularies differ")
    tokens = load_corpus(c_path)
    train, held = split_corpus(tokens, cfg["held_out"])
    student, trace = distill_train(student, teacher, train, plan)
    buf = io.StringIO()
    write_trace_csv(trace, buf)
    data = buf.getvalue().encode("utf-8")
    atomic_write(trace_path, lambda fh: fh.write(data))
    save_checkpoint(student, out, extra={"role": "distilled", "plan": plan.to_dict()})
    _emit({"checkpoint": str(out), "trace": str(trace_path), "kl_first": trace[0]["kl_loss"],
           "kl_last": trace[-1]["kl_loss"], "student_ppl": perplexity(student, held, cfg["context_len"]),
           "teacher_ppl": perplexity(teacher, held, cfg["context_len"])})
    return 0


def cmd_make_prefs(args) -> int:
    ckpt = _require_file(args.ckpt, "checkpoint")
    corpus = _require_file(args.corpus, "corpus")
    out = _require_out(args.out, "preference file")
    model = load_checkpoint(ckpt)
    pairs = synth_pref_pairs(model, load_corpus(corpus), args.pairs, args.prompt_len, args.cont_len, args.seed)
    save_pref_pairs(pairs, out)
    print(f"wrote {len(pairs)} preference pairs to {out}")
    return 0


DPO_KEYS = {"student": None, "prefs": None, "out": None, "plan": {}, "seed": 0, "dtype": "float32"}


def cmd_dpo(args) -> int:
    cfg = resolve_config(args, DPO_KEYS, ("student", "prefs", "out", "seed", "steps", "lr", "batch_size",
                                          "dpo_beta"))
    s_path = _require_file(cfg["student"], "student checkpoint")
    p_path = _require_file(cfg["prefs"], "preference file")
    out = _require_out(cfg["out"], "checkpoint")
    plan = _plan(cfg)
    student = load_checkpoint(s_path, dtype=_dtype(cfg))
    pairs = load_pref_pairs(p_path)
    before = preference_margin(student, pairs)
    student, reference, trace = dpo_train(student, pairs, plan)
    after = preference_margin(student, pairs)
    save_checkpoint(student, out, extra={"role": "dpo", "plan": plan.to_dict()})
    ref_ok = reference.state_bytes() == load_checkpoint(s_path, dtype=_dtype(cfg)).state_bytes()
    _emit({"checkpoint": str(out), "margin_before": before, "margin_after": after,
           "reference_unchanged": ref_ok, "steps": plan.steps,
           "loss_first": trace[0]["loss"] if trace else None, "loss_last": trace[-1]["loss"] if trace else None})
    return 0


def cmd_eval(args) -> int:
    ckpt = _require_file(args.ckpt, "checkpoint")
    corpus = _require_file(args.corpus, "corpus")
    model = load_checkpoint(ckpt)
    tokens = load_corpus(corpus)
    ppl = perplexity(model, tokens, args.context_len)
    rng = rng_stream(args.seed, "eval")
    start = int(rng.integers(0, max(1, len(tokens) - args.prompt_len)))
    prompt = [int(t) for t in tokens[start:start + args.prompt_len]]
    sample = generate(model, prompt, args.sample_len)
    _emit({"perplexity": ppl, "prompt": decode(prompt), "sample": decode(sample[len(prompt):]),
           "kv_ratio": float(model.cache_ratio())})
    return 0


def _parse_geometry(text: str) -> dict:
    p = Path(text)
    try:
        raw = p.read_text(encoding="utf-8") if p.is_file() else text
        geo = json.loads(raw)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"--geometry is neither a JSON file nor inline JSON: {exc}") from None
    if not isinstance(geo, dict):
        raise UsageError("--geometry must be a JSON object")
    return geo


def kv_report_rows(geo: dict, specs, layers, seq_len: int) -> list:
    geo = dict(geo)
    try:
        n_layers = int(geo.pop("n_layers"))
    except KeyError:
        raise UsageError("geometry needs n_layers") from None
    geo.pop("r_q", None)  # ranks come from each spec
    geo.pop("r_kv", None)
    rows = []
    for spec in specs:
        if not isinstance(spec, FixedRanks):
            raise UsageError("kv-report needs fixed rank specs (dynamic ranks depend on weights)")
        try:
            g = AttentionGeometry.from_dict({**geo, "r_q": spec.r_q, "r_kv": spec.r_kv})
        except XmlaError as exc:
            raise UsageError(f"invalid geometry: {exc}") from None
        if layers == "all":
            sel = list(range(n_layers))
        else:
            sel = sorted(set(layers))
            if any(not 0 <= i < n_layers for i in sel):
                raise UsageError(f"--layers entries must lie in [0, {n_layers})")
        kinds = [MLA if i in sel else ATTENTION for i in range(n_layers)]
        fp = cache_footprint(g, kinds, seq_len)
        frac = Fraction(len(sel), n_layers)
        row = {"rank_spec": str(spec), "mla_layers": len(sel), "n_layers": n_layers, "seq_len": seq_len,
               "mla_per_token": g.r_kv + g.d_r, "gqa_per_token": 2 * g.n_kv * g.d_h,
               "scalars": fp.scalars, "baseline_scalars": fp.baseline,
               "kv_percent": format_percent(fp.percent), "ratio": f"{fp.ratio.numerator}/{fp.ratio.denominator}"}
        reported = UNRECONCILED_KV.get((g.n_kv, g.d_h, g.d_r, g.r_kv, frac))
        if reported is not None:
            row["note"] = f"published figure {reported}% is not reproduced by the (r_kv + d_r) formula; unreconciled"
        rows.append(row)
    return rows


def cmd_kv_report(args) -> int:
    geo = _parse_geometry(args.geometry)
    specs = [parse_rank_spec(s) for s in (args.rank_spec or [])]
    if not specs:
        raise UsageError("at least one --rank-spec is required")
    if args.seq_len < 0:
        raise UsageError("--seq-len must be >= 0")
    rows = kv_report_rows(geo, specs, _parse_layers(args.layers), args.seq_len)
    if args.json:
        _emit(rows)
        return 0
    header = f"{'rank spec':<18}{'MLA layers':>11}{'scalars':>14}{'GQA scalars':>14}{'KV size %':>11}"
    print(header)
    for r in rows:
        print(f"{r['rank_spec']:<18}{r['mla_layers']:>7}/{r['n_layers']:<3}{r['scalars']:>14}"
              f"{r['baseline_scalars']:>14}{r['kv_percent']:>11}")
        if "note" in r:
            print(f"  note: {r['note']}")
    return 0


# -- parser -----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xmla", description="MLA upcycling toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="write a synthetic byte corpus")
    g.add_argument("--kind", choices=["markov", "pattern"], required=True)
    g.add_argument("--tokens", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train-teacher", help="train an attention-only toy LM")
    t.add_argument("--config")
    for name, typ in (("corpus", str), ("out", str), ("seed", int), ("steps", int), ("lr", float),
                      ("batch_size", int), ("seq_len", int)):
        t.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)
    t.set_defaults(func=cmd_train_teacher)

    u = sub.add_parser("upcycle", help="convert attention layers to MLA via SVD")
    u.add_argument("--ckpt", required=True)
    u.add_argument("--out", required=True)
    u.add_argument("--rank-spec", required=True)
    u.add_argument("--layers", default="all")
    u.add_argument("--ln", choices=["on", "off"], default="off")
    u.add_argument("--init", choices=["svd", "random"], default="svd")
    u.add_argument("--seed", type=int, default=0)
    u.set_defaults(func=cmd_upcycle)

    d = sub.add_parser("distill", help="KL distillation from a frozen teacher")
    d.add_argument("--config")
    for name, typ in (("student", str), ("teacher", str), ("corpus", str), ("out", str), ("trace", str),
                      ("seed", int), ("steps", int), ("lr", float), ("batch_size", int), ("seq_len", int),
                      ("ce_weight", float), ("kl_weight", float)):
        d.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)
    d.set_defaults(func=cmd_distill)

    m = sub.add_parser("make-prefs", help="synthesize preference pairs from a model's greedy output")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--corpus", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--pairs", type=int, default=64)
    m.add_argument("--prompt-len", type=int, default=16)
    m.add_argument("--cont-len", type=int, default=8)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_prefs)

    o = sub.add_parser("dpo", help="preference tuning with the student as frozen reference")
    o.add_argument("--config")
    for name, typ in (("student", str), ("prefs", str), ("out", str), ("seed", int), ("steps", int),
                      ("lr", float), ("batch_size", int), ("dpo_beta", float)):
        o.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)
    o.set_defaults(func=cmd_dpo)

    e = sub.add_parser("eval", help="perplexity and a greedy sample")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--context-len", type=int, default=64)
    e.add_argument("--prompt-len", type=int, default=16)
    e.add_argument("--sample-len", type=int, default=48)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("kv-report", help="KV-cache budget table")
    k.add_argument("--geometry", required=True, help="JSON object or path (needs n_layers)")
    k.add_argument("--rank-spec", action="append", help="fixed:rq,rkv (repeatable)")
    k.add_argument("--layers", default="all")
    k.add_argument("--seq-len", type=int, default=1)
    k.add_argument("--json", action="store_true")
    k.set_defaults(func=cmd_kv_report)
    return p


def _limit_threads():
    n = int(os.environ.get("XMLA_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    limiter = _limit_threads()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"xmla {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (XmlaError, OSError, ValueError) as exc:
        print(f"xmla {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
