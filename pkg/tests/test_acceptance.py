"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s -v``.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from omnifuse.attention import record_attention
from omnifuse.datacube import SynthParams
from omnifuse.decoder import AblationFlags, ModelConfig, OmniFuse
from omnifuse.experiments import overfit, redundancy_pre_post, synth_scenes
from omnifuse.fusion import select_queries
from omnifuse.gradcheck import BLOCKS, gradient_check
from omnifuse.metrics import dsc, hausdorff, iou
from omnifuse.training import LossWeights, TrainConfig, combine_stages, fit, predict, to_batch, total_loss

GRAD_BLOCKS = (
    "cnn_extract", "windowed_attention", "spectral_scan", "deformable_attention", "cross_attention",
    "enhance", "pixel_decode", "stage1_decode", "foreground_attention", "dice_loss", "ce_loss",
    "total_loss", "full_pipeline",
)


@contextmanager
def criterion(capsys, number, name):
    detail = {}
    try:
        yield detail
    except BaseException:
        with capsys.disabled():
            print(f"\n[criterion {number}] FAIL  {name}  {detail.get('msg', '')}")
        raise
    with capsys.disabled():
        print(f"\n[criterion {number}] PASS  {name}  {detail.get('msg', '')}")


@pytest.fixture(scope="module")
def full_overfit():
    start = time.perf_counter()
    res = overfit(seed=0)
    return res, time.perf_counter() - start


# 1 -----------------------------------------------------------------------------------


def test_criterion_1_gradient_suite(capsys):
    with criterion(capsys, 1, "gradient suite") as d:
        start = time.perf_counter()
        errors = {b: gradient_check(b, (8, 8, 4)) for b in BLOCKS}
        elapsed = time.perf_counter() - start
        worst = max(errors, key=errors.get)
        d["msg"] = f"{len(errors)} blocks, worst {worst} {errors[worst]:.2e}, {elapsed:.0f}s"
        assert set(GRAD_BLOCKS) <= set(errors)
        assert all(e <= 1e-4 for e in errors.values()), errors
        assert elapsed <= 300


# 2 -----------------------------------------------------------------------------------


def _check_attention(model, x):
    with record_attention() as rec, torch.no_grad():
        out = model(x)
    maps = 0
    for tag, w in rec:
        assert (w.sum(-1) - 1).abs().max() <= 1e-6, tag
        maps += 1
    mask_maps = [w for tag, w in rec if tag == "mask"]
    prob = out.coarse.prob.flatten(1)  # [B, h*w]
    fg = prob >= model.cfg.mask_threshold
    zeros = 0
    for w in mask_maps:  # [B, heads, Nq, h*w]
        for b in range(w.shape[0]):
            if fg[b].any():
                off = w[b][..., ~fg[b]]
                assert torch.count_nonzero(off) == 0
                zeros += off.numel()
    return maps, len(mask_maps), zeros


def test_criterion_2_attention_normalization(capsys, full_overfit):
    with criterion(capsys, 2, "attention normalization") as d:
        res, _ = full_overfit
        x, _ = to_batch(res.scenes[:4])
        maps, mask_maps, zeros = _check_attention(res.result.model.eval(), x)
        torch.manual_seed(1)
        fresh = OmniFuse(16, ModelConfig(n_q=16)).eval()
        m2, _, _ = _check_attention(fresh, x)
        d["msg"] = f"{maps + m2} maps, {mask_maps} mask maps, {zeros} masked weights exactly 0"
        assert mask_maps and zeros > 0


# 3 -----------------------------------------------------------------------------------


def _selection_oracle(t_spa, t_spec, n_q):
    n_spa, n_spec, d = len(t_spa), len(t_spec), len(t_spa[0])
    scores = [max(sum(t_spa[i][k] * t_spec[j][k] for k in range(d)) for j in range(n_spec)) for i in range(n_spa)]
    ranked = sorted(range(n_spa), key=lambda i: (-scores[i], i))
    return sorted(ranked[:n_q])


def test_criterion_3_selection_oracle(capsys):
    with criterion(capsys, 3, "selection oracle") as d:
        rng = np.random.default_rng(0)
        ties = 0
        for _ in range(1000):
            n_spa, n_spec, dim = rng.integers(1, 65), rng.integers(1, 17), rng.integers(1, 5)
            n_q = int(rng.integers(1, n_spa + 1))
            # small integers keep every score exact and make ties common
            a = rng.integers(-2, 3, size=(n_spa, dim)).astype(np.float64)
            b = rng.integers(-2, 3, size=(n_spec, dim)).astype(np.float64)
            qs = select_queries(torch.from_numpy(a)[None], torch.from_numpy(b)[None], n_q)
            expect = _selection_oracle(a.tolist(), b.tolist(), n_q)
            assert qs.source_indices[0].tolist() == expect
            assert torch.equal(qs.tokens[0], torch.from_numpy(a[expect]))
            ties += len(set((a @ b.T).max(1))) < n_spa
        d["msg"] = f"1000 instances exact, {ties} with tied scores"


# 4 -----------------------------------------------------------------------------------


def _brute(a, b):
    pa = {(int(i), int(j)) for i, j in np.argwhere(a)}
    pb = {(int(i), int(j)) for i, j in np.argwhere(b)}
    d = 1.0 if not pa and not pb else 2 * len(pa & pb) / (len(pa) + len(pb))
    j = 1.0 if not pa | pb else len(pa & pb) / len(pa | pb)
    if not pa and not pb:
        h = 0.0
    elif not pa or not pb:
        h = math.hypot(*a.shape)
    else:
        near = lambda p, s: min(math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2) for q in s)
        h = max(max(near(p, pb) for p in pa), max(near(q, pa) for q in pb))
    return d, j, h


def test_criterion_4_metric_oracles(capsys):
    with criterion(capsys, 4, "metric oracles") as d:
        rng = np.random.default_rng(0)
        worst_identity = 0.0
        for _ in range(1000):
            h, w = rng.integers(1, 17, size=2)
            pa, pb = rng.choice([0.02, 0.1, 0.3, 0.6, 0.95], size=2)
            a, b = rng.random((h, w)) < pa, rng.random((h, w)) < pb
            ed, ej, eh = _brute(a, b)
            gd, gj, gh = dsc(a, b), iou(a, b), hausdorff(a, b)
            assert (gd, gj, gh) == (ed, ej, eh), (a, b)
            worst_identity = max(worst_identity, abs(gd - 2 * gj / (1 + gj)))
        d["msg"] = f"1000 pairs exact, |dsc - 2iou/(1+iou)| <= {worst_identity:.1e}"
        assert worst_identity <= 1e-12


# 5 -----------------------------------------------------------------------------------


def test_criterion_5_shape_contract(capsys):
    with criterion(capsys, 5, "shape contract") as d:
        rng = np.random.default_rng(0)
        cases = 0
        flag_sets = [AblationFlags(), AblationFlags.all_off(), AblationFlags.parse("cnn+mamba+cfe+mr")]
        for h, w in [(8, 8), (8, 24), (16, 40), (32, 32), (48, 16), (64, 64)]:
            s = int(rng.integers(2, 9))
            for flags in flag_sets:
                torch.manual_seed(0)
                model = OmniFuse(s, ModelConfig(n_q=4), flags).eval()
                with torch.no_grad():
                    out = model(torch.rand(2, s, h, w))
                assert out.coarse.prob.shape == (2, h // 4, w // 4)
                assert out.refined.prob.shape == (2, h, w)
                cases += 1
        d["msg"] = f"{cases} (size, flags) cases"


# 6 -----------------------------------------------------------------------------------


def test_criterion_6_overfit(capsys, full_overfit):
    with criterion(capsys, 6, "overfit experiment") as d:
        full, t_full = full_overfit
        start = time.perf_counter()
        off = overfit(seed=0, flags=AblationFlags.all_off())
        t_off = time.perf_counter() - start
        d["msg"] = f"full dsc {full.report.dsc:.4f} ({t_full:.0f}s), all-off dsc {off.report.dsc:.4f} ({t_off:.0f}s)"
        assert full.report.dsc >= 0.90
        assert full.report.dsc - off.report.dsc >= 0.05
        assert t_full <= 900


# 7 -----------------------------------------------------------------------------------


def test_criterion_7_redundancy_direction(capsys, full_overfit):
    with criterion(capsys, 7, "redundancy direction") as d:
        lines, wins = [], 0
        for seed in range(10):
            res = full_overfit[0] if seed == 0 else overfit(seed=seed)
            pre, post = redundancy_pre_post(res.result.model, res.scenes)
            wins += post < pre
            lines.append(f"{pre:.4f}->{post:.4f}")
        d["msg"] = f"post < pre in {wins}/10 seeds [{', '.join(lines)}]"
        assert wins >= 8


# 8 -----------------------------------------------------------------------------------


def test_criterion_8_determinism(capsys):
    with criterion(capsys, 8, "determinism") as d:
        scenes = synth_scenes(4, SynthParams(H=32, W=32, S=8), seed=2)
        cfg = TrainConfig(epochs=3, batch_size=2, seed=7, augment=True)
        runs = [fit(scenes, scenes, cfg, ModelConfig(n_q=8)) for _ in range(2)]
        a, b = runs
        assert len(a.log) == len(b.log) == 6
        gap = max(abs(ra[k] - rb[k]) for ra, rb in zip(a.log, b.log) for k in ("dsc", "iou", "hd", "loss"))
        assert gap <= 1e-6
        ma = [o.labels() for o in predict(a.model, scenes)]
        mb = [o.labels() for o in predict(b.model, scenes)]
        assert all(torch.equal(x, y) for x, y in zip(ma, mb))
        d["msg"] = f"{len(a.log)} log rows, max gap {gap:.1e}, masks bitwise equal"


# 9 -----------------------------------------------------------------------------------


def test_criterion_9_loss_arithmetic(capsys):
    with criterion(capsys, 9, "loss arithmetic") as d:
        w = LossWeights(0.25, 0.75, 0.8)
        assert abs(combine_stages(0.4, 0.1, w) - 0.34) <= 1e-12
        rng = np.random.default_rng(0)
        for _ in range(100):
            l1, l2 = rng.random(2) * 3
            assert abs(combine_stages(l1, l2, w) - (0.8 * l1 + 0.2 * l2)) <= 1e-12
        # end-to-end: stage losses of fixed probability maps, composed by hand
        p_c = torch.full((1, 2, 2), 0.5, dtype=torch.float64)
        p_f = torch.full((1, 8, 8), 0.5, dtype=torch.float64)
        gt = torch.zeros(1, 8, 8, dtype=torch.float64)
        gt[0, :4, :4] = 1  # one coarse cell sampled as foreground, 16 fine pixels
        ce = math.log(2)
        dice1 = 1 - (2 * 0.5 + 1) / (2.0 + 1 + 1)
        dice2 = 1 - (2 * 8.0 + 1) / (32.0 + 16 + 1)
        s1, s2 = 0.25 * ce + 0.75 * dice1, 0.25 * ce + 0.75 * dice2
        got = float(total_loss(p_c, p_f, gt, w))
        assert abs(got - (0.8 * s1 + 0.2 * s2)) <= 1e-12
        d["msg"] = f"0.8*0.4 + 0.2*0.1 = {combine_stages(0.4, 0.1, w):.12f}; end-to-end {got:.12f}"
