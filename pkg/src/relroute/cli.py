"""Command-line entry point: ``relroute <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Each run resolves its configuration (defaults, then the ``--config`` JSON,
then flag overrides), writes ``resolved_config.json`` into the output
directory and emits only deterministic outputs. Failures print one JSON
object to stderr and exit with 2 (config), 3 (I/O) or 4 (numeric).
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import sys
from dataclasses import asdict, fields, is_dataclass
from pathlib import Path

import numpy as np

from . import aligner as al
from . import diagnostics as dg
from . import nn
from . import routing
from . import stage2 as s2m
from . import tensor_math as tm
from .gradcheck import TARGETS, run_gradcheck
from .relation import MaskedTrdConfig, masked_trd
from .synth import GeneratorConfig, generate_dataset

SUBCOMMANDS = ("gen-data", "budget", "eval-loss", "train-aligner", "diagnose", "train-stage2",
               "compare-routing", "gradcheck")
EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class ConfigError(ValueError):
    pass


# configuration ------------------------------------------------------------------

def _defaults_of(cls) -> dict:
    return json.loads(json.dumps(asdict(cls()), default=str))


STAGE2_GRID = {**_defaults_of(GeneratorConfig), "frames": 4, "height": 8, "width": 8}

SECTIONS: dict[str, dict] = {
    "gen-data": {"generator": _defaults_of(GeneratorConfig), "data": {"n": 16}},
    "budget": {"budget": {"p_fg": 0.48, "n_masks": 2400, "grid": 32}},
    "eval-loss": {"eval_loss": {"op": "or", "w": "ones", "vp": None, "vy": None,
                                "batch": 2, "frames": 2, "tokens": 16, "dim": 8},
                  "trd": _defaults_of(MaskedTrdConfig)},
    "train-aligner": {"generator": _defaults_of(GeneratorConfig),
                      "data": {"n_train": 256, "n_eval": 32},
                      "aligner": _defaults_of(al.AlignerConfig),
                      "stage1": {k: v for k, v in _defaults_of(al.Stage1Config).items() if k != "seed"}},
    "diagnose": {"generator": _defaults_of(GeneratorConfig), "data": {"n_eval": 32},
                 "diagnose": {"checkpoints": {}}},
    "train-stage2": {"generator": STAGE2_GRID, "data": {"n_train": 64, "n_eval": 8},
                     "denoiser": _defaults_of(s2m.DenoiserConfig),
                     "stage2": {k: v for k, v in _defaults_of(s2m.Stage2Config).items() if k != "seed"},
                     "saliency": {"aligner": None}},
    "gradcheck": {"gradcheck": {"target": "masked-trd", "op": "or", "coords": 40, "tolerance": 1e-4}},
}
SECTIONS["compare-routing"] = {**copy.deepcopy(SECTIONS["train-stage2"]),
                               "compare": {"operators": ["uniform", "and", "or", "xor"]}}
FREE_FORM = {("diagnose", "checkpoints")}


def _merge(base: dict, update: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and tuple(path.split(".")[-2:]) not in FREE_FORM:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            out[key] = _merge(base[key], value, path)
        else:
            out[key] = value
    return out


def resolve_config(command: str, user: dict | None, seed: int | None) -> dict:
    base = {"command": command, "seed": 0, **copy.deepcopy(SECTIONS[command])}
    user = dict(user or {})
    if user.get("command", command) != command:
        raise ConfigError(f"config is for {user['command']!r}, not {command!r}")
    cfg = _merge(base, user, "")
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    return cfg


def _build(cls, data: dict, **extra):
    """Instantiate a (possibly nested) config dataclass, mapping ValueError to ConfigError."""
    kw = dict(data)
    try:
        for f in fields(cls):
            if f.name in kw and isinstance(kw[f.name], dict):
                sub = {"optimizer": nn.OptimizerConfig, "trd": MaskedTrdConfig}.get(f.name)
                if sub is not None:
                    kw[f.name] = _build(sub, kw[f.name])
        if "tau" in kw:
            kw["tau"] = float(kw["tau"])
        return cls(**kw, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


# output helpers -------------------------------------------------------------------

def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if is_dataclass(o):
        return asdict(o)
    raise TypeError(type(o))


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(float(r[c])) if isinstance(r[c], float) else r[c] for c in columns])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def save_params(directory: Path, params: dict, meta: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name in sorted(params):
        tm.save_tensor(directory / name, params[name])
    write_json(directory / "index.json", {"params": sorted(params), **meta})


def load_params(directory: Path) -> tuple[dict, dict]:
    meta = json.loads((directory / "index.json").read_text())
    return {name: tm.load_tensor(directory / name) for name in meta.pop("params")}, meta


# subcommands ----------------------------------------------------------------------

def cmd_gen_data(cfg: dict, out: Path) -> dict:
    gen = _build(GeneratorConfig, cfg["generator"])
    scenes = generate_dataset(gen, int(cfg["data"]["n"]), cfg["seed"])
    manifest = []
    for i, s in enumerate(scenes):
        d = out / "scenes" / f"scene_{i:04d}"
        tm.save_tensor(d / "features", s.features)
        tm.save_tensor(d / "entity_masks", s.entity_masks)
        for k, c in enumerate(s.entity_captions):
            tm.save_tensor(d / f"entity_caption_{k}", c)
        tm.save_tensor(d / "background_caption", s.background_caption)
        manifest.append({"dir": d.relative_to(out).as_posix(), "seed": s.seed, "k": s.k,
                         "p_fg": s.p_fg, "entity_concepts": s.entity_concepts,
                         "background_concept": s.background_concept})
    write_json(out / "manifest.json", {"scenes": manifest,
                                       "mean_p_fg": float(np.mean([s.p_fg for s in scenes]))})
    return {"scenes": len(scenes)}


def cmd_budget(cfg: dict, out: Path) -> dict:
    b = cfg["budget"]
    try:
        analytic = routing.analytic_budget(float(b["p_fg"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rng = np.random.default_rng(cfg["seed"])
    masks = (rng.uniform(size=(int(b["n_masks"]), 1, int(b["grid"]) ** 2)) < analytic.p_fg)
    report = {"analytic": analytic.to_dict(),
              "empirical": routing.empirical_budget(masks.astype(np.float64)).to_dict()}
    write_json(out / "budget.json", report)
    return report


def cmd_eval_loss(cfg: dict, out: Path) -> dict:
    e = cfg["eval_loss"]
    rng = np.random.default_rng(cfg["seed"])
    shape = (int(e["batch"]), int(e["frames"]), int(e["tokens"]), int(e["dim"]))
    vp = tm.load_tensor(e["vp"]) if e["vp"] else rng.normal(size=shape)
    vy = tm.load_tensor(e["vy"]) if e["vy"] else rng.normal(size=vp.shape)
    grid = vp.shape[:3] if vp.ndim == 4 else (1,) + vp.shape[:2]
    if e["w"] == "ones":
        w = np.ones(grid)
    elif e["w"] == "random":
        w = rng.uniform(size=grid)
    else:
        w = tm.load_tensor(e["w"])
    try:
        terms = masked_trd(vp, vy, w, e["op"], _build(MaskedTrdConfig, cfg["trd"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report = {"op": routing.normalize_op(e["op"]), "total": terms.total, "spatial": terms.spatial,
              "temporal": terms.temporal, "per_element": [float(v) for v in terms.per_element]}
    write_json(out / "loss.json", report)
    return report


def _datasets(cfg: dict):
    gen = _build(GeneratorConfig, cfg["generator"])
    d = cfg["data"]
    train = generate_dataset(gen, int(d["n_train"]), cfg["seed"]) if "n_train" in d else []
    held = generate_dataset(gen, int(d["n_eval"]), cfg["seed"] + 1)
    return gen, train, held


def cmd_train_aligner(cfg: dict, out: Path) -> dict:
    gen, train, held = _datasets(cfg)
    acfg = _build(al.AlignerConfig, cfg["aligner"])
    s1 = _build(al.Stage1Config, cfg["stage1"], seed=cfg["seed"])
    s1 = al.ablation_variant(s1.recipe, s1)
    if acfg.d_v != gen.d_v or acfg.d_t != gen.d_t:
        raise ConfigError("aligner widths must match the generator's d_v / d_t")
    params, rows = al.train_aligner(train, acfg, s1)
    write_csv(out / "curve.csv", rows, ["step", "loss", "bce", "nce", "forwards", "grad_norm", "lr"])
    save_params(out / "checkpoint", params, {"aligner": acfg.to_dict(), "recipe": s1.recipe})
    report = al.evaluate_aligner(params, held, acfg)
    write_json(out / "eval.json", report)
    return report


def _load_aligner(path) -> tuple[dict, al.AlignerConfig, str]:
    params, meta = load_params(Path(path))
    return params, _build(al.AlignerConfig, meta["aligner"]), meta.get("recipe", "full")


def cmd_diagnose(cfg: dict, out: Path) -> dict:
    ckpts = cfg["diagnose"]["checkpoints"]
    if not ckpts:
        raise ConfigError("diagnose needs at least one checkpoint (diagnose.checkpoints or --checkpoint)")
    _, _, held = _datasets(cfg)
    reports = {}
    for recipe in sorted(ckpts):
        params, acfg, _ = _load_aligner(ckpts[recipe])
        reports[recipe] = dg.analyse(params, held, acfg).to_dict()
    write_json(out / "diagnostics.json", reports)
    names = sorted(reports)
    rows = [{"metric": m, **{r: reports[r][m] for r in names}} for m in dg.DiagnosticsReport.metric_names()]
    write_csv(out / "diagnostics.csv", rows, ["metric"] + names)
    return reports


def _stage2_setup(cfg: dict):
    gen, train, held = _datasets(cfg)
    dcfg = _build(s2m.DenoiserConfig, cfg["denoiser"])
    s2 = _build(s2m.Stage2Config, cfg["stage2"], seed=cfg["seed"])
    if dcfg.d_latent != gen.d_v or dcfg.d_cond != gen.d_t:
        raise ConfigError("denoiser widths must match the generator's d_v / d_t")
    if s2.steps and s2.batch > int(cfg["data"]["n_train"]):
        raise ConfigError(f"stage2.batch {s2.batch} exceeds data.n_train {cfg['data']['n_train']}")
    src = cfg["saliency"]["aligner"]
    if src is None:
        # no aligner given: planted foreground stands in for its saliency
        sal = lambda s: s.fg_mask  # noqa: E731
    else:
        params, acfg, _ = _load_aligner(src)
        sal = lambda s: al.full_caption_saliency(params, s, acfg)  # noqa: E731
    return dcfg, s2, s2m.make_samples(train, sal), s2m.make_samples(held, sal)


STAGE2_COLUMNS = ["step", "diff_loss", "trd_loss", "err_ffg", "err_fbg", "err_bbg"]


def cmd_train_stage2(cfg: dict, out: Path) -> dict:
    dcfg, s2, train, held = _stage2_setup(cfg)
    _, rows = s2m.train_stage2(train, held, dcfg, s2)
    write_csv(out / "curve.csv", rows, STAGE2_COLUMNS)
    write_json(out / "final.json", rows[-1])
    return rows[-1]


def cmd_compare_routing(cfg: dict, out: Path) -> dict:
    dcfg, s2, train, held = _stage2_setup(cfg)
    ops = cfg["compare"]["operators"]
    try:
        curves = s2m.routing_experiment(train, held, ops, dcfg, s2)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    summary = {}
    for op, rows in curves.items():
        write_csv(out / f"curve_{op}.csv", rows, STAGE2_COLUMNS)
        summary[op] = rows[-1]
    write_json(out / "summary.json", summary)
    return summary


def cmd_gradcheck(cfg: dict, out: Path) -> dict:
    g = cfg["gradcheck"]
    if g["target"] not in TARGETS:
        raise ConfigError(f"unknown gradcheck target {g['target']!r}; expected one of {TARGETS}")
    try:
        routing.normalize_op(g["op"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report = run_gradcheck(g["target"], cfg["seed"], g["op"], int(g["coords"]), float(g["tolerance"]))
    write_json(out / "gradcheck.json", report.to_dict())
    if not report.passed:
        raise FloatingPointError(f"gradient mismatch: max rel err {report.max_rel_err:.3e}")
    return report.to_dict()


HANDLERS = {"gen-data": cmd_gen_data, "budget": cmd_budget, "eval-loss": cmd_eval_loss,
            "train-aligner": cmd_train_aligner, "diagnose": cmd_diagnose,
            "train-stage2": cmd_train_stage2, "compare-routing": cmd_compare_routing,
            "gradcheck": cmd_gradcheck}


# argument parsing -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relroute", description="Saliency-routed relation distillation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic scenes")
    p.add_argument("--n", type=int)
    p = sub.add_parser("budget", parents=[common], help="pair-budget shares")
    p.add_argument("--p-fg", type=float)
    p = sub.add_parser("eval-loss", parents=[common], help="evaluate the routed relation loss")
    p.add_argument("--vp", help="student tensor stem")
    p.add_argument("--vy", help="target tensor stem")
    p.add_argument("--w", help="'ones', 'random' or a saliency tensor stem")
    p.add_argument("--op", help="uniform, and, or, xor")
    p = sub.add_parser("train-aligner", parents=[common], help="train the saliency aligner")
    p.add_argument("--recipe", choices=al.RECIPES)
    p.add_argument("--steps", type=int)
    p = sub.add_parser("diagnose", parents=[common], help="aligner diagnostics")
    p.add_argument("--checkpoint", action="append", default=[], metavar="RECIPE=DIR",
                   help="checkpoint directory, repeatable")
    for name, help_ in (("train-stage2", "train the toy denoiser"),
                        ("compare-routing", "one denoiser per routing operator")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--aligner", help="aligner checkpoint directory for saliency")
        p.add_argument("--steps", type=int)
        if name == "train-stage2":
            p.add_argument("--op")
        else:
            p.add_argument("--operators", help="comma-separated operator list")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--target", help=", ".join(TARGETS))
    p.add_argument("--op")
    return parser


def _overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    c = args.command
    if c == "gen-data":
        put("data", "n", args.n)
    elif c == "budget":
        put("budget", "p_fg", args.p_fg)
    elif c == "eval-loss":
        for k in ("vp", "vy", "w", "op"):
            put("eval_loss", k, getattr(args, k))
    elif c == "train-aligner":
        put("stage1", "recipe", args.recipe)
        put("stage1", "steps", args.steps)
    elif c == "diagnose" and args.checkpoint:
        pairs = {}
        for item in args.checkpoint:
            recipe, sep, path = item.partition("=")
            pairs[recipe if sep else "full"] = path if sep else recipe
        put("diagnose", "checkpoints", pairs)
    elif c in ("train-stage2", "compare-routing"):
        put("saliency", "aligner", args.aligner)
        put("stage2", "steps", args.steps)
        if c == "train-stage2":
            put("stage2", "operator", args.op)
        elif args.operators:
            put("compare", "operators", [s.strip() for s in args.operators.split(",") if s.strip()])
    elif c == "gradcheck":
        put("gradcheck", "target", args.target)
        put("gradcheck", "op", args.op)
    return o


def _deep_update(base: dict, upd: dict) -> dict:
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict) and k != "checkpoints":
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        try:
            user = json.loads(args.config.read_text()) if args.config else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        user = _deep_update(user, _overrides(args))
        cfg = resolve_config(args.command, user, args.seed)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "resolved_config.json", cfg)
        result = HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)
    except (FloatingPointError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    print(json.dumps(result, sort_keys=True, default=_json_default, allow_nan=True))
    return 0


def _fail(code: int, kind: str, exc: Exception) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": str(exc)}), file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
