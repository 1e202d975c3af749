"""Command-line entry point.

Every subcommand resolves its configuration as built-in defaults, then an
optional JSON ``--config`` file, then ``--set key.path=value`` overrides,
then explicit flags; the resolved config and the seed are echoed in the
JSON written to stdout. Exit codes: 0 success, 1 runtime failure, 2 usage.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import model as M
from . import power as PW
from .distill import (DistillHyper, fit_supervised_projector, pca_projector, random_orthogonal_projector,
                      distill_train)
from .errors import ConfigError, NeuroDistillError
from .io import (Checkpoint, default_spec, dump_bdck, dump_bdds, dump_bdte, gen_synthetic, load_bdck,
                 load_bdds, load_bdte, train_synthetic_teacher)
from .metrics import projection_report, task_metrics
from .numeric import make_rng
from .optim import TrainHyper, train
from .quant import (FrontEnd, QATHyper, QuantSpec, calibrate_clips, from_checkpoint, int_infer, qat_train,
                    simulate, preset_clips, to_checkpoint)
from .signal import BANK_PRESETS, build_morlet_bank, extract_batch

log = logging.getLogger("neurodistill")

DEFAULTS = {
    "seed": 42,
    "synth": {"n_windows": 400, "T": 500, "C": 4, "fs": 500.0, "n_classes": 4, "noise_std": 1.0,
              "priors": None, "task": "classification", "teacher_width": 128},
    "features": {"bank": "monkey_r", "n_cycles": 7.0, "n_tokens": 10, "threads": None},
    "model": {"embed_dim": 32, "ffn_dim": 128, "n_layers": 2, "out_dim": None},
    "train": {"epochs": 30, "lr": None, "weight_decay": 1e-4, "batch_size": 64, "val_fraction": 0.2},
    "distill": {"lam": 1.0, "ce_mix": None, "projector": "supervised", "projector_iters": 2000,
                "projector_lr": 1e-2},
    "quant": {"clips": "calibrate", "qat_epochs": 0, "loss": "task", "adc_range": 8.0, "check_windows": 100},
    "power": {"preset": "table6-w8a8", "precision": None, "limit_mw": 15.0},
}


class UsageError(Exception):
    pass


def _set_path(cfg: dict, key: str, value):
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _merge(base: dict, over: dict, prefix=""):
    for k, v in over.items():
        if k not in base:
            raise UsageError(f"unknown config key {prefix + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, prefix + k + ".")
        else:
            base[k] = v


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def resolve_config(args, flag_map: dict) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        _merge(cfg, json.loads(Path(args.config).read_text()))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        _set_path(cfg, key.strip(), _parse_value(val.strip()))
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            _set_path(cfg, key, v)
    log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
    return cfg


def _emit(payload: dict, args):
    text = json.dumps(payload, indent=2, sort_keys=True, default=_jsonable)
    if getattr(args, "report", None):
        Path(args.report).write_text(text + "\n")
    print(text)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, set):
        return sorted(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _frontend_for(cfg: dict, T: int, C: int, fs: float) -> FrontEnd:
    name = cfg["features"]["bank"]
    if name not in BANK_PRESETS:
        raise ConfigError(f"unknown wavelet bank preset {name!r}; choose from {sorted(BANK_PRESETS)}")
    return FrontEnd(tuple(BANK_PRESETS[name]), float(fs), float(cfg["features"]["n_cycles"]), T, C,
                    float(cfg["quant"]["adc_range"]))


def _tokens(windows, fe: FrontEnd, n_tokens: int, threads=None):
    return extract_batch(windows, fe.sample_rate_hz, fe.bank(), n_tokens, threads)


def _train_hyper(cfg: dict) -> TrainHyper:
    t = cfg["train"]
    return TrainHyper(t["lr"], t["weight_decay"], int(t["epochs"]), int(t["batch_size"]), t["val_fraction"])


def _decoder_cfg(cfg: dict, input_dim: int, out_dim: int, task: str) -> M.DecoderConfig:
    m = cfg["model"]
    return M.DecoderConfig(input_dim, int(m["out_dim"] or out_dim), int(m["embed_dim"]), int(m["ffn_dim"]),
                           int(m["n_layers"]), int(cfg["features"]["n_tokens"]), task)


def _out_dim(labels, task: str) -> int:
    return 1 if task == "regression" else int(np.max(labels)) + 1


def _load_inputs(args, cfg):
    """Dataset plus tokens, either extracted now or read from a token cache."""
    ds = load_bdds(args.data)
    n, T, C = ds.windows.shape
    fe = _frontend_for(cfg, T, C, ds.sample_rate_hz)
    if getattr(args, "features", None):
        cache = load_bdck(args.features)
        tokens = cache.tensors["tokens"]
        if len(tokens) != n:
            raise ConfigError(f"token cache {args.features} has {len(tokens)} rows, dataset has {n}")
    else:
        tokens = _tokens(ds.windows, fe, int(cfg["features"]["n_tokens"]), cfg["features"]["threads"])
    return ds, fe, tokens.astype(np.float64)


def _model_checkpoint(cfg_dec: M.DecoderConfig, fe: FrontEnd, params: dict, run: dict) -> Checkpoint:
    return Checkpoint({"decoder": cfg_dec.to_dict(), "frontend": fe.to_dict(), "kind": "float", "run": run},
                      {k: np.asarray(v) for k, v in params.items()})


def _load_model(path):
    ck = load_bdck(path)
    if "decoder" not in ck.config:
        raise ConfigError(f"{path} is not a model checkpoint")
    cfg_dec = M.DecoderConfig(**ck.config["decoder"])
    params = {k: v.astype(np.float64) for k, v in ck.tensors.items()}
    fe = FrontEnd.from_dict(ck.config["frontend"]) if "frontend" in ck.config else None
    qm = from_checkpoint(ck) if ck.quant_meta is not None else None
    if fe is None and qm is not None:
        fe = qm.frontend
    return ck, cfg_dec, params, fe, qm


# -- subcommands -----------------------------------------------------------

def cmd_gen_synthetic(args):
    cfg = resolve_config(args, {"seed": "seed", "n": "synth.n_windows", "T": "synth.T", "C": "synth.C",
                                "fs": "synth.fs", "classes": "synth.n_classes", "noise": "synth.noise_std",
                                "task": "synth.task"})
    s = cfg["synth"]
    spec = default_spec(int(s["n_windows"]), int(s["T"]), int(s["C"]), float(s["fs"]), int(s["n_classes"]),
                        float(s["noise_std"]), s["priors"], int(cfg["seed"]), s["task"])
    ds = gen_synthetic(spec)
    dump_bdds(ds, args.out)
    out = {"seed": cfg["seed"], "config": cfg, "dataset": args.out, "n": ds.n}
    if ds.task == "classification":
        out["label_counts"] = np.bincount(ds.labels, minlength=len(spec.classes)).tolist()
    if args.teacher_out:
        if ds.task != "classification":
            raise ConfigError("the synthetic teacher is a classifier; use a classification dataset")
        teacher = train_synthetic_teacher(ds, spec, int(s["teacher_width"]), seed=int(cfg["seed"]))
        dump_bdte(teacher.export(ds.windows, ds.labels), args.teacher_out)
        out.update(teacher=args.teacher_out, teacher_train_accuracy=teacher.train_accuracy)
    _emit(out, args)


def cmd_extract_features(args):
    cfg = resolve_config(args, {"seed": "seed", "bank": "features.bank", "tokens": "features.n_tokens",
                                "threads": "features.threads"})
    ds = load_bdds(args.data)
    n, T, C = ds.windows.shape
    fe = _frontend_for(cfg, T, C, ds.sample_rate_hz)
    tokens = _tokens(ds.windows, fe, int(cfg["features"]["n_tokens"]), cfg["features"]["threads"])
    tensors = {"tokens": tokens}
    if ds.labels is not None:
        tensors["labels"] = np.asarray(ds.labels)
    dump_bdck(Checkpoint({"kind": "token_cache", "frontend": fe.to_dict(), "task": ds.task}, tensors),
              args.out, float_dtype="<f8")
    _emit({"seed": cfg["seed"], "config": cfg, "cache": args.out, "shape": list(tokens.shape)}, args)


def cmd_train(args):
    cfg = resolve_config(args, {"seed": "seed", "epochs": "train.epochs", "lr": "train.lr",
                                "bank": "features.bank", "embed_dim": "model.embed_dim"})
    ds, fe, tokens = _load_inputs(args, cfg)
    if ds.labels is None:
        raise ConfigError(f"{args.data} has no labels to train on")
    dec = _decoder_cfg(cfg, tokens.shape[2], _out_dim(ds.labels, ds.task), ds.task)
    rep = train(tokens, ds.labels, dec, _train_hyper(cfg), make_rng(int(cfg["seed"])))
    dump_bdck(_model_checkpoint(dec, fe, rep.params, cfg), args.out)
    _emit({"seed": cfg["seed"], "config": cfg, "model": args.out, "param_count": M.param_count(dec),
           "train_report": rep.to_dict()}, args)


def _projector(kind: str, teacher, d_s: int, cfg: dict, rng):
    d = cfg["distill"]
    if kind == "supervised":
        hyper = DistillHyper(projector_lr=d["projector_lr"], projector_iters=int(d["projector_iters"]))
        return fit_supervised_projector(teacher, d_s, hyper, rng)
    if kind == "pca":
        return pca_projector(teacher.z_t, d_s)
    if kind == "random":
        return random_orthogonal_projector(teacher.d_t, d_s, rng)
    raise ConfigError(f"unknown projector {kind!r}; choose supervised, pca or random")


def cmd_distill(args):
    cfg = resolve_config(args, {"seed": "seed", "epochs": "train.epochs", "ds": "model.embed_dim",
                                "projector": "distill.projector", "lam": "distill.lam"})
    ds, fe, tokens = _load_inputs(args, cfg)
    teacher = load_bdte(args.teacher)
    labels = ds.labels if ds.labels is not None else teacher.labels
    dec = _decoder_cfg(cfg, tokens.shape[2], teacher.n_out, ds.task)
    rng = make_rng(int(cfg["seed"]))
    proj = _projector(cfg["distill"]["projector"], teacher, dec.embed_dim, cfg, rng)
    d = cfg["distill"]
    hyper = DistillHyper(lam=d["lam"], ce_mix=d["ce_mix"], train=_train_hyper(cfg))
    rep = distill_train(dec, M.init_params(dec, rng), tokens, teacher, proj, hyper, rng, labels)
    dump_bdck(_model_checkpoint(dec, fe, rep.params, cfg), args.out)
    _emit({"seed": cfg["seed"], "config": cfg, "model": args.out, "projector": proj.kind,
           "projection_report": projection_report(proj.p, teacher.w_t, teacher.z_t).to_dict(),
           "train_report": rep.to_dict()}, args)


def cmd_tsr(args):
    cfg = resolve_config(args, {"seed": "seed", "ds": "model.embed_dim"})
    teacher = load_bdte(args.teacher)
    d_s = int(cfg["model"]["embed_dim"])
    rng = make_rng(int(cfg["seed"]))
    reports = {}
    for kind in ("supervised", "pca", "random"):
        proj = _projector(kind, teacher, d_s, cfg, rng)
        reports[kind] = projection_report(proj.p, teacher.w_t, teacher.z_t).to_dict()
    _emit({"seed": cfg["seed"], "config": cfg, "d_s": d_s,
           "tsr": {k: r["tsr"] for k, r in reports.items()}, "reports": reports}, args)


def cmd_quantize(args):
    cfg = resolve_config(args, {"seed": "seed", "clips": "quant.clips", "qat_epochs": "quant.qat_epochs",
                                "check": "quant.check_windows"})
    ck, dec, params, fe, _ = _load_model(args.model)
    ds = load_bdds(args.data)
    fe = fe or _frontend_for(cfg, ds.windows.shape[1], ds.windows.shape[2], ds.sample_rate_hz)
    fe = FrontEnd(fe.center_freqs_hz, fe.sample_rate_hz, fe.n_cycles, fe.n_samples, fe.n_channels,
                  float(cfg["quant"]["adc_range"]))
    tokens = _tokens(ds.windows, fe, dec.n_tokens, cfg["features"]["threads"])
    q = cfg["quant"]
    if q["clips"] == "preset":
        clips = preset_clips(params, dec, tokens)
    elif q["clips"] == "calibrate":
        clips = calibrate_clips(params, dec, tokens)
    else:
        raise ConfigError(f"unknown clip source {q['clips']!r}; choose calibrate or preset")
    rng = make_rng(int(cfg["seed"]))
    th = _train_hyper(cfg)
    th.epochs = int(q["qat_epochs"])
    labels = ds.labels if ds.labels is not None else np.zeros(len(tokens), dtype=np.int64)
    qm = qat_train(params, dec, tokens, labels, clips, fe, QATHyper(train=th, loss=q["loss"]), rng)

    n_check = min(int(q["check_windows"]), ds.n)
    adc = fe.adc().convert(ds.windows[:n_check])
    res = int_infer(qm, adc)
    sim = simulate(qm, adc)
    traced = int_infer(qm, adc[:1], trace=True)
    fp_logits, _ = M.predict(params, dec, tokens[:n_check])
    conformance = {"windows": n_check, "bit_exact": bool(np.array_equal(res.logits, sim)),
                   "float_ops": traced.float_ops, "audit_ok": qm.report["audit"]["ok"]}
    if dec.task == "classification":
        conformance["argmax_agreement"] = float(np.mean(res.classes == fp_logits.argmax(1)))
    out_ck = to_checkpoint(qm, qm.params)
    out_ck.config["frontend"] = fe.to_dict()
    dump_bdck(out_ck, args.out)
    _emit({"seed": cfg["seed"], "config": cfg, "model": args.out, "conformance": conformance,
           "clips": qm.clips.to_dict(), "qat": qm.report.get("qat")}, args)


def cmd_infer(args):
    cfg = resolve_config(args, {"seed": "seed"})
    ck, dec, params, fe, qm = _load_model(args.model)
    ds = load_bdds(args.data)
    out = {"seed": cfg["seed"], "config": cfg, "model": args.model, "integer": bool(args.int)}
    fp_pred = None
    if params:
        tokens = _tokens(ds.windows, fe, dec.n_tokens, cfg["features"]["threads"])
        fp_logits, _ = M.predict(params, dec, tokens)
        fp_pred = fp_logits.argmax(1) if dec.task == "classification" else fp_logits[:, 0]
    if args.int:
        if qm is None:
            raise ConfigError(f"{args.model} has no quantized section; run quantize first")
        res = int_infer(qm, qm.frontend.adc().convert(ds.windows))
        pred = res.classes if dec.task == "classification" else qm.dequantize_logits(res.logits)[:, 0]
        if fp_pred is not None and dec.task == "classification":
            out["argmax_agreement"] = float(np.mean(pred == fp_pred))
    else:
        if fp_pred is None:
            raise ConfigError(f"{args.model} carries no float weights")
        pred = fp_pred
    out["predictions"] = np.asarray(pred).tolist()
    if ds.labels is not None:
        out["metrics"] = task_metrics(pred, ds.labels, dec.task)
    _emit(out, args)


def cmd_power(args):
    cfg = resolve_config(args, {"preset": "power.preset", "limit": "power.limit_mw",
                                "precision": "power.precision"})
    p = cfg["power"]
    table = PW.preset(p["preset"])
    if args.table:
        table = PW.load_energy_table(args.table, base=table)
    precision = p["precision"] or ("int8" if PW.PRESET_PRECISION.get(p["preset"]) else "fp32")
    if precision not in ("fp32", "int8"):
        raise ConfigError("precision must be fp32 or int8")
    spec = QuantSpec() if precision == "int8" else None
    if args.model:
        _, dec, _, fe, _ = _load_model(args.model)
        res = PW.count_resources(dec, fe.bank(), fe.n_samples, fe.n_channels, spec)
    else:
        dec, bank = PW.main_config()
        res = PW.count_resources(dec, bank, PW.MAIN_N_SAMPLES, PW.MAIN_N_CHANNELS, spec)
    cost = PW.estimate(res, table)
    verdict = PW.budget_check(cost, float(p["limit_mw"]))
    _emit({"seed": cfg["seed"], "config": cfg, "resources": res.to_dict(), "breakdown": cost.to_dict(),
           "power_mw": round(cost.power_mw, 2), "budget": verdict.to_dict()}, args)


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neurodistill", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--config", help="JSON file merged over the defaults")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dot-keyed override")
        p.add_argument("--report", help="also write the JSON result here")
        return p

    p = common(sub.add_parser("gen-synthetic", help="write a synthetic BDDS dataset"))
    p.add_argument("--out", required=True)
    p.add_argument("--teacher-out")
    p.add_argument("--n", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--C", type=int)
    p.add_argument("--fs", type=float)
    p.add_argument("--classes", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--task", choices=("classification", "regression"))
    p.set_defaults(func=cmd_gen_synthetic)

    p = common(sub.add_parser("extract-features", help="tokenize a dataset into a token cache"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bank")
    p.add_argument("--tokens", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_extract_features)

    p = common(sub.add_parser("train", help="train a decoder from scratch"))
    p.add_argument("--data", required=True)
    p.add_argument("--features", help="token cache from extract-features")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--bank")
    p.add_argument("--embed-dim", type=int)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("distill", help="train a student against a teacher export"))
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--features")
    p.add_argument("--out", required=True)
    p.add_argument("--ds", type=int, help="student width")
    p.add_argument("--projector", choices=("supervised", "pca", "random"))
    p.add_argument("--lam", type=float)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_distill)

    p = common(sub.add_parser("tsr", help="compare projectors on a teacher export"))
    p.add_argument("--teacher", required=True)
    p.add_argument("--ds", type=int)
    p.set_defaults(func=cmd_tsr)

    p = common(sub.add_parser("quantize", help="QAT / fold a float checkpoint into integer tables"))
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clips", choices=("calibrate", "preset"))
    p.add_argument("--qat-epochs", type=int)
    p.add_argument("--check", type=int, help="windows used for the conformance check")
    p.set_defaults(func=cmd_quantize)

    p = common(sub.add_parser("infer", help="predict with a checkpoint"))
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--int", action="store_true", help="use the integer-only path")
    p.set_defaults(func=cmd_infer)

    p = common(sub.add_parser("power", help="energy and power estimate"))
    p.add_argument("--preset", choices=sorted(PW.PRESETS))
    p.add_argument("--table", help="key=value energy table overriding the preset")
    p.add_argument("--precision", choices=("fp32", "int8"))
    p.add_argument("--limit", type=float, help="budget in mW")
    p.add_argument("--model", help="count resources for this checkpoint instead of the main config")
    p.set_defaults(func=cmd_power)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 1
    except (NeuroDistillError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
