"""Acceptance criteria, one test and one verdict line each."""

import json
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from hhtrack.attention import BlockParams, TokenSet, hha_attention, hha_block
from hhtrack.checks import gradient_suite, update_frames
from hhtrack.cli import main
from hhtrack.dataio import GT_FILE, read_boxes, read_sequence
from hhtrack.head import Box, ciou_loss
from hhtrack.metrics import evaluate_ope, ope_from_measurements
from hhtrack.numerics import Tensor, precision
from hhtrack.spectral import HBFParams, channel_plan, false_color_indices, hbf_forward, init_hbf
from hhtrack.training import load_checkpoint

ROOT = Path(__file__).resolve().parents[1]
SYNTH_SPEC = ROOT / "configs" / "desk_synth.json"
TRAIN_CONFIG = ROOT / "configs" / "desk_train.json"


@pytest.fixture(autouse=True)
def float64():
    with precision(np.float64):
        yield


def random_block(rng, d, hidden):
    shapes = {"norm1_g": (d,), "norm1_b": (d,), "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
              "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,), "norm2_g": (d,), "norm2_b": (d,),
              "w1": (d, hidden), "b1": (hidden,), "w2": (hidden, d), "b2": (d,)}
    vals = {k: rng.normal(scale=0.5, size=s) for k, s in shapes.items()}
    vals["norm1_g"] += 1.0
    vals["norm2_g"] += 1.0
    return vals


def random_hbf(rng, c):
    plan = channel_plan(c)
    widths = (c,) + plan[1:]
    return HBFParams(
        dw_weight=Tensor(rng.normal(scale=0.5, size=(c, 3, 3))),
        dw_bias=Tensor(rng.normal(scale=0.1, size=c)),
        pw_weights=[Tensor(rng.normal(scale=0.5, size=(a, b))) for a, b in zip(plan[:-1], plan[1:])],
        pw_biases=[Tensor(rng.normal(scale=0.1, size=b)) for b in plan[1:]],
        norm_gammas=[Tensor(1.0 + 0.2 * rng.normal(size=w)) for w in widths],
        norm_betas=[Tensor(0.1 * rng.normal(size=w)) for w in widths],
    )


def test_criterion_1_gradient_suite(criterion):
    start = time.perf_counter()
    results = gradient_suite(instances=20, tol=1e-5, h=1e-5)
    elapsed = time.perf_counter() - start
    worst = ", ".join(f"{r.op}={r.max_rel_err:.1e}" for r in results)
    redrawn = sum(r.redrawn for r in results)
    ok = all(r.passed and r.instances >= 20 for r in results) and len(results) == 9 and elapsed < 60
    criterion(1, "finite-difference gradients at tol 1e-5, >= 20 instances per op, < 60 s", ok,
              f"{elapsed:.1f}s, {redrawn} oracle-limited redraws; {worst}")


def test_criterion_2_attention_laws(criterion):
    rng = np.random.default_rng(2)
    row_err = perm_err = 0.0
    asym = True
    for trial in range(10):
        d, heads = 8, (1, 2, 4)[trial % 3]
        params = BlockParams(**{k: Tensor(v) for k, v in random_block(rng, d, 2 * d).items()})
        n_t, n_s = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        tok = TokenSet(*(Tensor(rng.normal(size=(n, d))) for n in (n_t, n_s, n_s)))
        _, att_s, att_f, weights = hha_attention(tok, params, heads, return_weights=True)
        row_err = max(row_err, *(float(np.abs(w.data.sum(-1) - 1).max()) for w in weights.values()))
        perm = rng.permutation(n_t)
        _, s2, f2 = hha_attention(TokenSet(Tensor(tok.t.data[perm]), tok.s, tok.f), params, heads)
        perm_err = max(perm_err, float(np.abs(att_s.data - s2.data).max()),
                       float(np.abs(att_f.data - f2.data).max()))
        moved = TokenSet(tok.t, Tensor(rng.normal(size=tok.s.shape)), Tensor(rng.normal(size=tok.f.shape)))
        asym &= np.array_equal(hha_block(tok, params, heads).t.data, hha_block(moved, params, heads).t.data)
    ok = row_err <= 1e-12 and perm_err <= 1e-9 and asym
    criterion(2, "softmax rows, template permutation invariance, template-stream isolation", ok,
              f"row err {row_err:.1e}, permutation err {perm_err:.1e}, template bit-identical {asym}")


def test_criterion_3_small_instance_oracles(criterion):
    rng = np.random.default_rng(3)
    hha_err = 0.0
    for _ in range(10):
        d = int(rng.integers(1, 5))
        n_t, n_s = (int(v) for v in rng.integers(1, 4, size=2))
        raw = random_block(rng, d, 2 * d)
        t, s, f = (rng.normal(size=(n, d)) for n in (n_t, n_s, n_s))
        out = hha_block(TokenSet(Tensor(t), Tensor(s), Tensor(f)),
                        BlockParams(**{k: Tensor(v) for k, v in raw.items()}), heads=1)
        ref = oracles.hha_block(t.tolist(), s.tolist(), f.tolist(), {k: v.tolist() for k, v in raw.items()})
        for got, want in zip((out.t, out.s, out.f), ref):
            hha_err = max(hha_err, float(np.abs(got.data - np.array(want)).max()))
    hbf_err = 0.0
    for c in (3, 4):
        for size in (1, 4):
            p = random_hbf(rng, c)
            cube = rng.normal(size=(c, size, size))
            want = oracles.hbf(cube.tolist(), p.dw_weight.data.tolist(), p.dw_bias.data.tolist(),
                               [w.data.tolist() for w in p.pw_weights], [b.data.tolist() for b in p.pw_biases],
                               [g.data.tolist() for g in p.norm_gammas], [b.data.tolist() for b in p.norm_betas])
            hbf_err = max(hbf_err, float(np.abs(hbf_forward(cube, p).data - np.array(want)).max()))
    ok = hha_err <= 1e-10 and hbf_err <= 1e-12
    criterion(3, "explicit-loop oracles for the attention block and band fusion", ok,
              f"block err {hha_err:.1e} (tol 1e-10), fusion err {hbf_err:.1e} (tol 1e-12)")


def test_criterion_4_metric_oracle(criterion):
    dp = ope_from_measurements([0.0, 10.0, 30.0], [0.5, 0.5, 0.5]).dp
    auc = ope_from_measurements([0.0], [0.6]).auc
    gt = [Box.xywh(3 + k, 4, 12, 9) for k in range(5)]
    perfect = evaluate_ope(gt, gt)
    ok = dp == 2 / 3 and auc == 12 / 21 and perfect.dp == 1.0 and perfect.auc == 20 / 21
    criterion(4, "DP 2/3, AUC 12/21, perfect DP 1 and AUC 20/21 exactly", ok,
              f"dp {dp!r}, auc {auc!r}, perfect ({perfect.dp!r}, {perfect.auc!r})")


def test_criterion_5_architecture_contract(criterion):
    rng = np.random.default_rng(5)
    widths = {c: hbf_forward(rng.random((c, 5, 5)), init_hbf(c, rng)).shape[0] for c in range(3, 33)}
    idx = false_color_indices(16)
    fired = update_frames(25, 130)
    ok = set(widths.values()) == {3} and idx == (0, 8, 15) and fired == [25, 50, 75, 100, 125]
    criterion(5, "3 fused channels for C in 3..32, bands (0, 8, 15) for C=16, updates every 25 frames", ok,
              f"widths {sorted(set(widths.values()))}, bands {idx}, updates {fired}")


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    seq, ckpt, pred, report = root / "seq", root / "model.ckpt", root / "pred.txt", root / "report.json"
    start = time.perf_counter()
    codes = [
        main(["synth", "--spec", str(SYNTH_SPEC), "--out", str(seq)]),
        main(["train", "--data", str(seq), "--config", str(TRAIN_CONFIG), "--out", str(ckpt)]),
        main(["track", "--ckpt", str(ckpt), "--seq", str(seq), "--out", str(pred)]),
        main(["eval", "--pred", str(pred), "--gt", str(seq), "--report", str(report)]),
    ]
    elapsed = time.perf_counter() - start
    return {"root": root, "seq": seq, "ckpt": ckpt, "pred": pred, "report": report,
            "codes": codes, "elapsed": elapsed}


def test_criterion_6_end_to_end_desk_run(criterion, desk_run):
    meta, _, _ = read_sequence(desk_run["seq"])
    _, model_cfg, manifest = load_checkpoint(desk_run["ckpt"])
    stages = {s["name"]: s for s in manifest["train"]["stages"]}
    schedule_ok = (stages["stage1"]["epochs"], stages["stage1"]["lr"], stages["stage1"]["trainable"]) == \
        (20, 4e-4, ["hbf"]) and (stages["stage2"]["epochs"], stages["stage2"]["lr"]) == (5, 1e-4)
    setup_ok = (meta.frame_count, meta.channels, meta.height, meta.width) == (100, 8, 64, 64) and \
        (model_cfg.hha.d, model_cfg.hha.depth) == (64, 4) and manifest["pairs"]["count"] == 64
    report = json.loads(desk_run["report"].read_text())
    ok = (desk_run["codes"] == [0, 0, 0, 0] and schedule_ok and setup_ok
          and report["mean_iou"] >= 0.5 and report["dp"] >= 0.8 and desk_run["elapsed"] < 600)
    criterion(6, "desk run: mean IoU >= 0.5, DP >= 0.8, under 10 minutes", ok,
              f"mean IoU {report['mean_iou']:.3f}, DP {report['dp']:.3f}, AUC {report['auc']:.3f}, "
              f"{desk_run['elapsed']:.0f}s on this machine")


def test_criterion_7_determinism(criterion, desk_run, tmp_path):
    again = {}
    seq2 = tmp_path / "seq"
    main(["synth", "--spec", str(SYNTH_SPEC), "--out", str(seq2)])
    files = sorted(p.relative_to(desk_run["seq"]) for p in desk_run["seq"].rglob("*") if p.is_file())
    again["synth"] = all((desk_run["seq"] / f).read_bytes() == (seq2 / f).read_bytes() for f in files)

    # the full schedule is checked once by the desk run; repeat a short schedule of the same model twice
    config = json.loads(TRAIN_CONFIG.read_text())
    for stage in config["train"]["stages"]:
        stage["epochs"] = 1
    config["pairs"]["count"] = 16
    cfg_path = tmp_path / "short.json"
    cfg_path.write_text(json.dumps(config))
    ckpts = [tmp_path / "a.ckpt", tmp_path / "b.ckpt"]
    for c in ckpts:
        main(["train", "--data", str(seq2), "--config", str(cfg_path), "--out", str(c)])
    again["train"] = ckpts[0].read_bytes() == ckpts[1].read_bytes()

    pred2, report2 = tmp_path / "pred.txt", tmp_path / "report.json"
    main(["track", "--ckpt", str(desk_run["ckpt"]), "--seq", str(seq2), "--out", str(pred2)])
    again["track"] = pred2.read_bytes() == desk_run["pred"].read_bytes()
    main(["eval", "--pred", str(pred2), "--gt", str(seq2), "--report", str(report2)])
    again["eval"] = report2.read_bytes() == desk_run["report"].read_bytes()
    criterion(7, "synth, train, track and eval are byte-identical across repeated runs",
              all(again.values()), ", ".join(f"{k} {'same' if v else 'DIFFERENT'}" for k, v in again.items()))


def test_criterion_8_ciou_values(criterion):
    pred = np.array([0.0, 0.0, 2.0, 2.0]) / 4
    gt = np.array([1.0, 1.0, 3.0, 3.0]) / 4
    got = ciou_loss(pred, gt).item()
    want = 1 - (1 / 7 - 1 / 9)
    same = ciou_loss(gt, gt).item()
    ok = abs(got - want) <= 1e-9 and abs(same) <= 1e-12
    criterion(8, "CIoU of the shifted square pair and of identical boxes", ok,
              f"loss {got!r} vs {want!r}, self {same!r}")


def test_predicted_boxes_file_format(desk_run):
    lines = desk_run["pred"].read_text().splitlines()
    assert len(lines) == 100 and all(len(line.split(",")) == 4 for line in lines)
    assert read_boxes(desk_run["pred"])[0] == read_boxes(desk_run["seq"] / GT_FILE)[0]
