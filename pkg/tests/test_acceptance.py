"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

The Stage-1 and routing tests train real models and take several minutes.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from relroute import aligner as al
from relroute import cli
from relroute import diagnostics as dg
from relroute.gradcheck import run_gradcheck
from relroute.relation import MaskedTrdConfig, masked_trd, pair_weight_matrix, trd_loss
from relroute.routing import analytic_budget, category_masks, empirical_budget
from relroute.synth import GeneratorConfig, generate_dataset


def test_budget_identity(verdict):
    start = time.perf_counter()
    a = analytic_budget(0.48)
    got = (round(a.share_ffg, 4), round(a.share_fbg, 4), round(a.share_bbg, 4))
    rng = np.random.default_rng(0)
    masks = (rng.uniform(size=(2400, 1, 32 * 32)) < 0.48).astype(np.float64)
    e = empirical_budget(masks)
    gap = max(abs(e.share_ffg - a.share_ffg), abs(e.share_fbg - a.share_fbg),
              abs(e.share_bbg - a.share_bbg))
    secs = time.perf_counter() - start
    verdict("budget identity", got == (0.2304, 0.4992, 0.2704) and gap < 0.01 and secs < 10,
            f"analytic={got} empirical gap={gap:.4f} time={secs:.2f}s")


def test_unrouted_recovery(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        b, t, n, d = rng.integers(1, 3), rng.integers(1, 4), rng.integers(2, 7), rng.integers(2, 6)
        vp, vy = rng.normal(size=(b, t, n, d)), rng.normal(size=(b, t, n, d))
        ref = trd_loss(vp, vy).total
        got = masked_trd(vp, vy, np.ones((b, t, n)), "or", MaskedTrdConfig(tau=math.inf)).total
        worst = max(worst, abs(got - ref) / abs(ref))
    secs = time.perf_counter() - start
    verdict("unrouted recovery", worst < 1e-6 and secs < 5,
            f"max rel err={worst:.2e} over 50 instances, time={secs:.2f}s")


def test_discrete_limit_routing(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    ok = True
    for _ in range(100):
        t, n = rng.integers(1, 4), rng.integers(2, 10)
        labels = (rng.uniform(size=(t, n)) < rng.uniform()).astype(np.float64)
        flat = labels.reshape(-1)
        cats = category_masks(flat)
        want = {"and": cats["fg_fg"], "or": cats["fg_fg"] | cats["fg_bg"], "xor": cats["fg_bg"]}
        for op, mask in want.items():
            nz = pair_weight_matrix(labels, op, t, n)[0] != 0
            ok &= bool(np.array_equal(nz, mask))
    secs = time.perf_counter() - start
    verdict("discrete-limit routing", ok and secs < 5, f"100 binary fields, time={secs:.2f}s")


GRADIENT_TARGETS = [("trd", "or"), ("masked-trd", "and"), ("masked-trd", "or"), ("masked-trd", "xor"),
                    ("bce", "or"), ("infonce", "or"), ("stage1", "or"), ("stage2", "or")]


def test_gradient_suite(verdict):
    start = time.perf_counter()
    reports = [run_gradcheck(target, seed=0, op=op) for target, op in GRADIENT_TARGETS]
    secs = time.perf_counter() - start
    worst = max(r.max_rel_err for r in reports)
    detail = ", ".join(f"{r.target}{'/' + r.op if r.op else ''}={r.max_rel_err:.1e}" for r in reports)
    verdict("gradient suite", all(r.passed for r in reports) and worst < 1e-4 and secs < 60,
            f"{detail}; time={secs:.1f}s")


def test_closed_form_losses(verdict):
    bce = al.bce_loss(np.full(9, 0.5), (np.arange(9) % 2).astype(float))
    one = al.infonce_loss(np.array([[0.6, 0.8]]), np.array([[0.6, 0.8]]))
    eye = np.eye(2)
    two = al.infonce_loss(eye, eye, 1.0)
    ok = (abs(bce - math.log(2)) <= 1e-9 and abs(one) <= 1e-12
          and abs(two - math.log(1 + math.exp(-1))) <= 1e-9)
    verdict("closed-form losses", ok, f"bce={bce!r} nce(B=1)={one!r} nce(B=2)={two!r}")


def _centred(singular_values, rows=6, seed=0):
    rng = np.random.default_rng(seed)
    k = len(singular_values)
    g = rng.normal(size=(rows, k))
    u, _ = np.linalg.qr(g - g.mean(axis=0))
    v, _ = np.linalg.qr(rng.normal(size=(k, k)))
    return u @ np.diag(singular_values) @ v.T


def test_diagnostics_unit_values(verdict):
    h = float(dg.binary_entropy(np.full(16, 0.5)).mean())
    focus = dg.ca_focus(np.eye(5)[[0, 3, 1]])
    rng = np.random.default_rng(3)
    attn = rng.uniform(size=(2, 6, 6))
    attn /= attn.sum(-1, keepdims=True)
    delta = dg.delta_self_attn_entropy(attn, attn.copy())
    r3 = dg.top3_variance_ratio(_centred([2.0, 1.0, 1.0, 0.0]))
    ok = abs(h - math.log(2)) <= 1e-9 and abs(focus - 1) <= 1e-12 and delta == 0 and abs(r3 - 1) <= 1e-9
    verdict("diagnostics unit values", ok, f"H={h!r} ca_focus={focus!r} dH={delta!r} r3={r3!r}")


@pytest.fixture(scope="module")
def stage1_runs():
    gen = GeneratorConfig()
    train = generate_dataset(gen, 256, seed=1)
    held = generate_dataset(gen, 32, seed=2)
    cfg = al.AlignerConfig()
    start = time.perf_counter()
    out = {}
    for recipe in ("full", "no-entity"):
        params, _ = al.train_aligner(train, cfg, al.ablation_variant(recipe, al.Stage1Config(steps=1000)))
        out[recipe] = (params, al.evaluate_aligner(params, held, cfg))
    return cfg, out, time.perf_counter() - start


def test_stage1_learning(verdict, stage1_runs):
    cfg, runs, secs = stage1_runs
    full, noent = runs["full"][1], runs["no-entity"][1]
    ok = full["iou"] > 0.5 and noent["coverage"] > full["coverage"] and secs < 600
    verdict("stage-1 learning", ok,
            f"full IoU={full['iou']:.3f} coverage full={full['coverage']:.3f} "
            f"no-entity={noent['coverage']:.3f}, time={secs:.0f}s")


def test_routing_direction(verdict, stage1_runs, tmp_path):
    cfg, runs, _ = stage1_runs
    ckpt = tmp_path / "aligner"
    cli.save_params(ckpt, runs["full"][0], {"aligner": cfg.to_dict(), "recipe": "full"})
    start = time.perf_counter()
    code = cli.run(["compare-routing", "--aligner", str(ckpt), "--out", str(tmp_path / "cmp")])
    secs = time.perf_counter() - start
    summary = json.loads((tmp_path / "cmp" / "summary.json").read_text()) if code == 0 else {}
    if not summary:
        verdict("routing direction", False, f"compare-routing exited {code}")
    u, o, x = summary["uniform"], summary["or"], summary["xor"]
    u_sum, o_sum = u["err_ffg"] + u["err_fbg"], o["err_ffg"] + o["err_fbg"]
    ok = o_sum <= u_sum and x["err_ffg"] >= o["err_ffg"] and secs < 1200
    verdict("routing direction", ok,
            f"FG-FG+FG-BG or={o_sum:.4f} uniform={u_sum:.4f}; FG-FG xor={x['err_ffg']:.4f} "
            f"or={o['err_ffg']:.4f}; time={secs:.0f}s")


TINY_GEN = {"height": 4, "width": 4, "d_v": 8, "d_t": 8, "caption_len": 2, "p_fg_mean": 0.4}
TINY_ALIGNER = {"d_v": 8, "d_t": 8, "heads": 2, "n_cross": 1, "n_self": 1, "sal_hidden": 8, "text_heads": 2}
TINY_STAGE2 = {"generator": {**TINY_GEN, "frames": 2}, "data": {"n_train": 3, "n_eval": 2},
               "denoiser": {"d_latent": 8, "d_cond": 8, "width": 8, "blocks": 2, "heads": 2,
                            "hookup": 1, "time_dim": 4},
               "stage2": {"steps": 3, "eval_every": 1, "batch": 2}}


def _snapshot(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_cli_determinism(verdict, tmp_path):
    configs = {
        "gen-data": ({"data": {"n": 3}}, []),
        "budget": ({"budget": {"n_masks": 200}}, []),
        "eval-loss": ({}, ["--w", "random", "--op", "xor"]),
        "train-aligner": ({"generator": TINY_GEN, "data": {"n_train": 3, "n_eval": 2},
                           "aligner": TINY_ALIGNER, "stage1": {"steps": 3}}, []),
        "train-stage2": (TINY_STAGE2, []),
        "compare-routing": (TINY_STAGE2, []),
        "gradcheck": ({"gradcheck": {"target": "stage1"}}, []),
    }
    failures = []

    def twice(name, user, extra, label=None):
        label = label or name
        path = tmp_path / f"{label}.json"
        path.write_text(json.dumps(user))
        outs = []
        for rep in (1, 2):
            out = tmp_path / f"{label}-{rep}"
            code = cli.run([name, "--config", str(path), "--seed", "3", "--out", str(out), *extra])
            if code != 0:
                failures.append(f"{name} exit {code}")
            outs.append(_snapshot(out))
        if outs[0] != outs[1] or not outs[0]:
            failures.append(label)
        return tmp_path / f"{label}-1"

    for name, (user, extra) in configs.items():
        out = twice(name, user, extra)
        if name == "train-aligner":
            ckpt = out / "checkpoint"
    twice("diagnose", {"generator": TINY_GEN, "data": {"n_eval": 2},
                       "diagnose": {"checkpoints": {"full": str(ckpt)}}}, [])
    with_aligner = {**TINY_STAGE2, "saliency": {"aligner": str(ckpt)}}
    twice("compare-routing", with_aligner, [], label="compare-routing-aligner")
    verdict("determinism", not failures,
            "8 subcommands byte-identical on re-run" if not failures else f"differs: {failures}")
