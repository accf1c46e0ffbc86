"""Acceptance criteria 1-10, each reported as one PASS/FAIL line in the terminal summary.

Seeded experiments share five trained TinyVGG models (one per seed) through
module-scoped fixtures so the whole module stays within a few minutes on one core.
"""
from itertools import combinations

import numpy as np
import pytest

from conftest import ACCEPTANCE
from gradchecks import KINDS, check
from oracles import lasso_stationarity, naive_conv2d
from pcp.finetune import TrainConfig, sgd_finetune
from pcp.graph import accuracy, apply_selection, compression_ratio, export_compact, flops, forward
from pcp.io import load_model
from pcp.numerics import DesignMatrix, conv2d_forward, lasso_cd, lasso_lambda_max, least_squares
from pcp.orchestrator import FSchedule, PruneConfig, one_shot_uniform, run_pcp
from pcp.prune import PruneRequest, prune_committed, select_and_reconstruct
from pcp.sampler import CalibrationBatch, SamplerConfig, collect_features, residual_target
from pcp.toybench import GeneratorSpec, build_reference_model, generate_splits, target_spec
from pcp.transfer import Dataset, MixConfig, PseudoLabeledSet, build_mixed_sets, pseudo_label, supervised_sets

SEEDS = range(5)
TRAIN = dict(lr=0.05, epochs=20, batch_size=32)
# toy layers hold 16-32 channels, so the 40-channel cap of the full-scale
# schedule would strip a layer to one channel in a single step
TOY_SCHEDULE = FSchedule(cap=1)


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    assert ok, detail


@pytest.fixture(scope="module")
def trained():
    """seed -> (model, splits) for TinyVGG trained on the source benchmark."""
    out = {}
    for seed in SEEDS:
        d = generate_splits(GeneratorSpec(seed=seed))
        m, _ = sgd_finetune(build_reference_model("tinyvgg", seed), d["train"], TrainConfig(seed=seed, **TRAIN))
        out[seed] = (m, d)
    return out


def pcp_config(seed, top_n, target=2.0, **kw):
    return PruneConfig(target_ratio=target, top_n=top_n, schedule=TOY_SCHEDULE,
                       sampler=SamplerConfig(seed=seed), seed=seed, **kw)


@pytest.fixture(scope="module")
def pcp_top2(trained):
    out = {}
    for seed, (m, d) in trained.items():
        out[seed] = run_pcp(m, pcp_config(seed, 2), d["train"].images[:128], d["val"])
    return out


# -- 1 ----------------------------------------------------------------------------

def test_criterion_1_solver_oracles():
    rng = np.random.default_rng(2024)
    ls_gap = 0.0
    for i in range(100):
        m, k = int(rng.integers(3, 40)), int(rng.integers(1, 12))
        A = rng.standard_normal((m, k))
        if i % 4 == 0 and k > 2:
            A[:, -1] = A[:, 0] + A[:, 1]                   # rank-deficient
        B = rng.standard_normal((m, int(rng.integers(1, 4))))
        X, Xp = least_squares(A, B), np.linalg.pinv(A) @ B
        gap = abs(np.linalg.norm(B - A @ X) - np.linalg.norm(B - A @ Xp)) / np.linalg.norm(B)
        ls_gap = max(ls_gap, gap)

    stat, closed = 0.0, 0.0
    for i in range(50):
        Z = rng.standard_normal((40, 6))
        d = DesignMatrix(Z, Z @ rng.standard_normal(6) + 0.3 * rng.standard_normal(40))
        lam = rng.uniform(0.01, 0.9) * lasso_lambda_max(d)
        stat = max(stat, lasso_stationarity(d, lasso_cd(d, lam), lam))
        col, y = rng.standard_normal(30), rng.standard_normal(30)
        lam1 = rng.uniform(0, 2) * abs(col @ y)
        b = lasso_cd(DesignMatrix(col[:, None], y), lam1)[0]
        ref = np.sign(col @ y) * max(abs(col @ y) - lam1 / 2, 0.0) / (col @ col)
        closed = max(closed, abs(b - ref))

    conv_err = 0.0
    for i in range(100):
        c, n = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k, stride, pad, size = [(3, 1, 1, 5), (1, 1, 0, 4), (3, 2, 1, 5), (2, 2, 0, 6)][i % 4]
        x = rng.standard_normal((1, c, size, size)).astype(np.float32)
        w = rng.standard_normal((n, c, k, k)).astype(np.float32)
        bias = rng.standard_normal(n).astype(np.float32)
        conv_err = max(conv_err, float(np.abs(conv2d_forward(x, w, bias, stride, pad)
                                              - naive_conv2d(x, w, bias, stride, pad)).max()))
    ok = ls_gap < 1e-8 and stat < 1e-6 and closed < 1e-8 and conv_err < 1e-5
    record(1, ok, f"LS gap {ls_gap:.1e} (<1e-8), stationarity {stat:.1e} (<1e-6), "
                  f"1-D closed form {closed:.1e} (<1e-8), conv {conv_err:.1e} (<1e-5)")


# -- 2 ----------------------------------------------------------------------------

def test_criterion_2_selection_vs_brute_force():
    wins, worst = 0, 0.0
    for i in range(50):
        rng = np.random.default_rng([7, i])
        c = 4 + i % 5
        S, hw, n = 60, 4, 3
        x = rng.standard_normal((c, S, hw))
        w = rng.standard_normal((n, c, 2, 2)) * rng.uniform(0.2, 1.5, c)[None, :, None, None]
        y = np.einsum("csk,nck->sn", x, w.reshape(n, c, hw)) + 0.3 * rng.standard_normal((S, n))
        batch = CalibrationBatch(x, y, 0, np.zeros((S, 3), np.int64), i)
        res = select_and_reconstruct(PruneRequest(batch, np.ones(c), w, c // 2))
        best = np.inf
        for sub in combinations(range(c), c - c // 2):
            A = batch.design_inputs(list(sub))
            best = min(best, float(np.sum((y - A @ np.linalg.pinv(A) @ y) ** 2)))
        ratio = res.reconstruction_error / best
        worst = max(worst, ratio)
        wins += ratio <= 1.25
    record(2, wins >= 48, f"{wins}/50 instances within 1.25x of the exhaustive optimum (need 48); worst {worst:.3f}x")


# -- 3 ----------------------------------------------------------------------------

def test_criterion_3_algorithm_invariants(trained):
    m, d = trained[0]
    cfg = pcp_config(0, 2)
    series = run_pcp(m, cfg, d["train"].images[:128], d["val"])
    again = run_pcp(m, cfg, d["train"].images[:128], d["val"])
    problems = []
    prev, prev_ratio = m, 1.0
    for model, rec in series:
        if rec.selected != sorted(set(rec.selected)):
            problems.append(f"t={rec.t} S_t not ascending")
        for l in m.prunable_layers:
            if np.any(model.selections[l] > prev.selections[l]):
                problems.append(f"t={rec.t} layer {l} support grew")
            if l in rec.selected:
                if model.nnz(l) != prev.nnz(l) - rec.removed[l]:
                    problems.append(f"t={rec.t} layer {l} cardinality {model.nnz(l)}")
            elif (model.layers[l].weight.tobytes() != prev.layers[l].weight.tobytes()
                  or not np.array_equal(model.selections[l], prev.selections[l])):
                problems.append(f"t={rec.t} unselected layer {l} changed")
        if not rec.ratio > prev_ratio:
            problems.append(f"t={rec.t} ratio not increasing")
        prev, prev_ratio = model, rec.ratio
    if series[-1][1].ratio < 2.0:
        problems.append("target not reached")
    same = len(series) == len(again) and all(a == b for (a, _), (b, _) in zip(series, again))
    if not same:
        problems.append("runs differ")
    record(3, not problems, f"{len(series)} iterations to ratio {series[-1][1].ratio:.3f}; "
                            f"{'all invariants hold, runs bitwise identical' if not problems else problems}")


# -- 4 ----------------------------------------------------------------------------

def test_criterion_4_progressive_beats_one_shot(trained):
    rows = []
    for seed, (m, d) in trained.items():
        calib, val = d["train"].images[:128], d["val"]
        pcp = run_pcp(m, pcp_config(seed, 1), calib, val)[-1][0]
        uni = one_shot_uniform(m, 2.0, calib, SamplerConfig(seed=seed), seed=seed)
        assert compression_ratio(m, pcp) >= 2.0 and compression_ratio(m, uni) >= 2.0
        rows.append((accuracy(pcp, val.images, val.labels), accuracy(uni, val.images, val.labels)))
    wins = sum(p >= u for p, u in rows)
    detail = ", ".join(f"{p:.3f} vs {u:.3f}" for p, u in rows)
    record(4, wins >= 4, f"PCP >= one-shot uniform on {wins}/5 seeds (need 4): {detail}")


# -- 5 ----------------------------------------------------------------------------

def test_criterion_5_finetune_recovery(trained, pcp_top2):
    gaps, val_pairs, test_pairs = [], [], []
    for seed, (m, d) in trained.items():
        test, val = d["test"], d["val"]
        pruned = pcp_top2[seed][-1][0]
        ft, _ = sgd_finetune(pruned, d["train"], TrainConfig(lr=0.05, epochs=5, seed=seed))
        base = accuracy(m, test.images, test.labels)
        gaps.append(100 * (base - accuracy(ft, test.images, test.labels)))
        val_pairs.append((accuracy(pruned, val.images, val.labels), accuracy(ft, val.images, val.labels)))
        test_pairs.append((accuracy(pruned, test.images, test.labels), accuracy(ft, test.images, test.labels)))
    within = sum(g <= 3.0 for g in gaps)
    improved = sum(after > before for before, after in val_pairs)
    held_out = sum(after > before for before, after in test_pairs)
    ACCEPTANCE["finetune example"] = (
        improved >= 4,
        f"fine-tuning strictly raised validation accuracy on {improved}/5 seeds (need 4): "
        + ", ".join(f"{a:.3f}->{b:.3f}" for a, b in val_pairs)
        + f"; on the held-out test split {held_out}/5",
    )
    record(5, within >= 4, f"{within}/5 seeds within 3.0 points of the unpruned model after 5 epochs "
                           f"(gaps {', '.join(f'{g:+.2f}' for g in gaps)})")


def test_finetune_example_strict_improvement():
    # finetune-module example run on the criterion-5 models; see the decisions ledger
    ok, detail = ACCEPTANCE.get("finetune example", (False, "criterion 5 did not run"))
    assert ok, detail


# -- 6 ----------------------------------------------------------------------------

def test_criterion_6_residual_correctness():
    rng = np.random.default_rng(6)
    m = build_reference_model("tinyres", 6)
    images = rng.standard_normal((10, 3, 8, 8)).astype(np.float32)
    entry, first, last = 5, 6, 10
    checks = {}

    beta = np.ones(16, np.uint8)
    beta[[0, 3, 9]] = 0
    p1 = apply_selection(m, first, beta, m.layers[first].weight)
    _, rec = forward(p1, images, [entry, last + 1])
    checks["shortcut shape"] = (rec[entry][1].shape == (10, 16, 4, 4) and rec[last + 1][1].shape == (10, 16, 4, 4)
                                and export_compact(p1).shapes[-1] == m.shapes[-1])

    cfg = SamplerConfig(positions_per_image=4, seed=1)
    batch = collect_features(m, m, last, images, cfg)
    _, r0 = forward(m, images, [last])
    y2 = r0[last][1].astype(np.float64) - m.layers[last].bias.astype(np.float64)[None, :, None, None]
    b, yy, xx = batch.positions.T
    checks["target == Y2"] = np.array_equal(batch.target, y2[b, :, yy, xx])

    upstream, _ = prune_committed(m, m, [2, 6, 8], {2: 5, 6: 5, 8: 5}, images, cfg)
    batch = collect_features(upstream, m, last, images, cfg)
    _, ro = forward(m, images, [entry, last])
    _, rp = forward(upstream, images, [entry])
    b, yy, xx = batch.positions.T
    oracle = np.empty_like(batch.target)
    for row, (i, y, x) in enumerate(batch.positions):
        for ch in range(16):
            oracle[row, ch] = (float(ro[entry][0][i, ch, y, x]) + y2[i, ch, y, x]
                               - float(rp[entry][0][i, ch, y, x]))
    checks["compensated target"] = np.allclose(batch.target, oracle, atol=1e-12) and np.allclose(
        residual_target(ro[entry][0][b, :, yy, xx], y2[b, :, yy, xx], rp[entry][0][b, :, yy, xx]), oracle)
    record(6, all(checks.values()), ", ".join(f"{k}: {'ok' if v else 'FAILED'}" for k, v in checks.items()))


# -- 7 ----------------------------------------------------------------------------

def adapted_model(seed, spec, tspec):
    """Stand-in for a pre-adapted source model: trained on source data plus a labelled
    target-domain sample drawn independently of the evaluation splits."""
    src = generate_splits(spec)["train"]
    extra = generate_splits(tspec.shifted(seed=tspec.seed + 1))["train"]
    both = Dataset(np.concatenate([src.images, extra.images]), np.concatenate([src.labels, extra.labels]))
    return sgd_finetune(build_reference_model("tinyvgg", seed), both, TrainConfig(seed=seed, **TRAIN))[0]


def test_criterion_7_transfer_pipeline():
    rows, identical = [], True
    for seed in SEEDS:
        spec = GeneratorSpec(seed=seed)
        tspec = target_spec(spec)
        d, t = generate_splits(spec), generate_splits(tspec)
        m = adapted_model(seed, spec, tspec)
        unlabelled = Dataset(t["train"].images, None, domain="target")
        pls = pseudo_label(m, unlabelled, 0.8)
        mix = MixConfig(seed=seed)
        cal_m, val_m = build_mixed_sets(d["train"], pls, unlabelled, mix)
        cal_s, val_s = supervised_sets(d["train"], mix)
        cfg = pcp_config(seed, 2)
        pm = run_pcp(m, cfg, cal_m.images, val_m)[-1][0]
        ps = run_pcp(m, cfg, cal_s.images, val_s)[-1][0]
        te = t["test"]
        rows.append((accuracy(pm, te.images, te.labels), accuracy(ps, te.images, te.labels)))

        if seed == 0:
            empty = PseudoLabeledSet(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), 0.8)
            cal_e, val_e = build_mixed_sets(d["train"], empty, unlabelled, mix)
            identical = (cal_e.images.tobytes() == cal_s.images.tobytes()
                         and val_e.images.tobytes() == val_s.images.tobytes()
                         and np.array_equal(val_e.labels, val_s.labels))
            pe = run_pcp(m, cfg, cal_e.images, val_e)[-1][0]
            identical = identical and pe == ps
    wins = sum(a >= b for a, b in rows)
    detail = ", ".join(f"{a:.3f} vs {b:.3f}" for a, b in rows)
    record(7, wins >= 4 and identical,
           f"mixed >= source-only on {wins}/5 seeds (need 4): {detail}; empty pseudo set identical: {identical}")


# -- 8 ----------------------------------------------------------------------------

def compact_macs(model):
    """Independent count from the physically compacted network's weight shapes."""
    c = export_compact(model)
    total = 0
    for i, layer in enumerate(c.layers):
        if layer.kind == "conv":
            _, oh, ow = c.shapes[i]
            total += int(np.prod(layer.weight.shape)) * oh * ow
        elif layer.kind == "fc":
            total += int(np.prod(layer.weight.shape))
    return total


def test_criterion_8_flops_accounting(pcp_top2, trained):
    vgg = 16 * 3 * 9 * 64 + 16 * 16 * 9 * 64 + 32 * 16 * 9 * 16 + 32 * 32 * 9 * 16 + 4 * 128
    res = 16 * 3 * 9 * 64 + 16 * 16 * 9 * 64 + 16 * 16 * 16 + 16 * 16 * 9 * 16 + 16 * 16 * 16 + 4 * 64
    ok = flops(build_reference_model("tinyvgg", 0)) == vgg and flops(build_reference_model("tinyres", 0)) == res
    n, bad = 0, 0
    for seed, series in pcp_top2.items():
        base = compact_macs(trained[seed][0])
        for model, rec in series:
            n += 1
            bad += rec.ratio != base / compact_macs(model) or rec.flops != compact_macs(model)
    record(8, ok and bad == 0, f"TinyVGG {vgg} / TinyRes {res} MACs exact: {ok}; "
                               f"{n - bad}/{n} reported ratios match the compacted-network recount")


# -- 9 ----------------------------------------------------------------------------

def test_criterion_9_gradient_checks():
    worst = {kind: max(check(kind, seed) for seed in range(20)) for kind in KINDS}
    ok = all(v < 1e-3 for v in worst.values())
    record(9, ok, "max rel. error over 20 instances: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# -- 10 ---------------------------------------------------------------------------

def test_criterion_10_series(trained, tmp_path):
    m, d = trained[1]
    series = run_pcp(m, pcp_config(1, 2, target=4.0, checkpoint_dir=str(tmp_path)),
                     d["train"].images[:128], d["val"])
    ratios = [1.0] + [rec.ratio for _, rec in series]
    monotone = all(b > a for a, b in zip(ratios, ratios[1:]))
    max_step = max(b - a for a, b in zip(ratios, ratios[1:]))
    loadable = True
    accs = []
    for model, rec in series:
        loaded = load_model(tmp_path / rec.checkpoint)
        loadable &= loaded == model
        accs.append(accuracy(loaded, d["test"].images, d["test"].labels))
    ok = monotone and ratios[-1] >= 4.0 and loadable and len(series) >= 3
    record(10, ok, f"{len(series)} checkpoints, ratios {ratios[1]:.2f} .. {ratios[-1]:.2f} increasing "
                   f"(largest step {max_step:.2f}); all loadable: {loadable}; "
                   f"test accuracy {accs[0]:.3f} .. {accs[-1]:.3f}")
