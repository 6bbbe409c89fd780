"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Criteria 7, 8 and 10 train the full synthetic benchmark and take several
minutes; they share one pipeline run.
"""
import math
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from boxpseudo import trainer as tr
from boxpseudo.decoder import LGADecoder, resolve_labels
from boxpseudo.evaluation import compute_macc
from boxpseudo.labeler import Labeler, LabelerConfig
from boxpseudo.losses import (
    DICE_SMOOTH, LossWeights, loss_sim, loss_sup, loss_total_real, loss_unsup, soft_bce,
)
from boxpseudo.overlap import LABEL_A, LABEL_B, LABEL_BG, S1, S2, S3, extract_object_bank, extract_overlap_samples
from boxpseudo.pipeline import BenchmarkConfig, run_pipeline
from boxpseudo.simgen import (
    PairEntry, PairStats, Rejection, SimConfig, compose_sample, generate_corpus, harvest_stats, sample_pair,
    verify_plausibility,
)
from boxpseudo.synth import WorldConfig, generate_world
from boxpseudo.trainer import TrainConfig, ema_update, finetune_smt, param_hash

W = LossWeights()


def report(capsys, number, title, ok, detail, start):
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail} ({time.time() - start:.1f}s)")
    assert ok, detail


# -- naive oracles ------------------------------------------------------------

def naive_self_attention(att, x):
    """softmax(q k^T / sqrt(d)) v, one score at a time."""
    x = x.detach().numpy()
    wq, wk, wv = (m.weight.detach().numpy() for m in (att.w_q, att.w_k, att.w_v))
    q, k, v = x @ wq.T, x @ wk.T, x @ wv.T
    L, C = x.shape
    d = C // att.heads
    out = np.zeros_like(x)
    for h in range(att.heads):
        for i in range(L):
            scores = [sum(q[i, c] * k[j, c] for c in range(h * d, (h + 1) * d)) / math.sqrt(d) for j in range(L)]
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            z = sum(e)
            for j in range(L):
                out[i, h * d:(h + 1) * d] += e[j] / z * v[j, h * d:(h + 1) * d]
    return out


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def bce(p, t):
    return -(t * math.log(p) + (1 - t) * math.log(1 - p))


def masked_loop(logits, target, mask, skip_empty=False):
    """(mean BCE over masked entries, per-row smooth dice averaged over rows)."""
    rows, cols = len(logits), len(logits[0])
    tot, n, dices = 0.0, 0, []
    for i in range(rows):
        inter = sp = sq = 0.0
        seen = False
        for j in range(cols):
            if mask[i][j]:
                p, t = sig(logits[i][j]), target[i][j]
                tot += bce(p, t)
                n += 1
                inter += p * t
                sp += p
                sq += t
                seen = True
        if seen or not skip_empty:
            dices.append(1 - (2 * inter + DICE_SMOOTH) / (sp + sq + DICE_SMOOTH))
    return (tot / n if n else 0.0), (sum(dices) / len(dices) if dices else 0.0)


def ce_loop(logits, label):
    m = max(logits)
    return -(logits[label] - m - math.log(sum(math.exp(v - m) for v in logits)))


def fd_check(fn, x, step=1e-4):
    """Max relative error between autograd and central differences."""
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().clone()
    numeric = torch.zeros_like(x)
    flat, nflat = x.detach().view(-1), numeric.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = fn(x.detach()).item()
            flat[i] = orig - step
            down = fn(x.detach()).item()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * step)
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-8)
    return (analytic - numeric).abs().max().item() / scale


# -- 1 ------------------------------------------------------------------------

def test_criterion_1_attention_oracle(capsys):
    t0 = time.time()
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(100):
        dec = LGADecoder(32, heads=1 + trial % 2).double()
        n1, n2, n3 = (int(v) for v in rng.integers(1, 11, size=3))
        f1, f2, f3 = (torch.randn(n, 32, dtype=torch.float64) for n in (n1, n2, n3))
        # local stage: each region with its query, attended separately
        att_l = dec.local_blocks[0][0].attn
        v1_in, v2_in = torch.cat([f1, dec.q1[None]]), torch.cat([f2, dec.q2[None]])
        with torch.no_grad():
            worst = max(worst, np.abs(att_l(v1_in).numpy() - naive_self_attention(att_l, v1_in)).max(),
                        np.abs(att_l(v2_in).numpy() - naive_self_attention(att_l, v2_in)).max())
            # global stage: everything together
            v1, v2 = dec.local_structure_attention(f1, f2)
            x = torch.cat([v1, v2, f3])
            att_g = dec.global_blocks[0][0].attn
            worst = max(worst, np.abs(att_g(x).numpy() - naive_self_attention(att_g, x)).max())
            # the masked batched path equals the per-sample stages
            table = torch.cat([f1, f2, f3])
            idx = torch.tensor([list(range(n1)) + [-1] + list(range(n1, n1 + n2)) + [-2]
                                + list(range(n1 + n2, n1 + n2 + n3)) + [-3] * 4])
            g = torch.tensor([[1] * (n1 + 1) + [2] * (n2 + 1) + [3] * n3 + [0] * 4])
            logits, _, _ = dec(table, idx, g)
            single = dec.decode(f1, f2, f3).token_logits
            cols = [c for c in range(idx.shape[1]) if idx[0, c] >= 0]
            worst = max(worst, (logits[0][:, cols] - single).abs().max().item())
    report(capsys, 1, "attention matches explicit loops", worst <= 1e-5 and time.time() - t0 < 60,
           f"max abs error {worst:.2e} over 100 instances", t0)


# -- 2 ------------------------------------------------------------------------

def test_criterion_2_loss_oracles(capsys):
    t0 = time.time()
    gen = torch.Generator().manual_seed(0)
    worst_val, worst_grad = 0.0, 0.0
    for trial in range(100):
        L = int(torch.randint(3, 13, (1,), generator=gen))
        logits = torch.randn(2, L, generator=gen, dtype=torch.float64) * 2
        regions = torch.randint(0, 3, (L,), generator=gen)
        regions[0], regions[1], regions[2] = S1, S2, S3
        token_mask = torch.rand(L, generator=gen) > 0.15
        token_mask[:3] = True
        targets = torch.rand(2, L, generator=gen, dtype=torch.float64)
        cls_logits = torch.randn(2, 6, generator=gen, dtype=torch.float64)
        cats = torch.randint(0, 5, (2,), generator=gen)
        teacher = torch.randn(2, L, generator=gen, dtype=torch.float64) * 3
        lg, tg, cl = logits.tolist(), targets.tolist(), cls_logits.tolist()
        s3 = (regions == S3).tolist()

        # simulated-phase total
        m = [[bool(token_mask[j]) for j in range(L)]] * 2
        b, d = masked_loop(lg, tg, m)
        l_cls = (ce_loop(cl[0], int(cats[0])) + ce_loop(cl[1], int(cats[1]))) / 2
        want_sim = W.cls * l_cls + W.bce * b + W.dice * d
        got_sim = loss_sim(logits, cls_logits, targets, token_mask, cats, W)[0].item()
        # supervision of non-overlap regions
        known = [[int(regions[j]) in (S1, S2) for j in range(L)]] * 2
        own = [[float(regions[j] == S1) for j in range(L)], [float(regions[j] == S2) for j in range(L)]]
        b, d = masked_loop(lg, own, known)
        want_sup = W.bce * b + W.dice * d
        got_sup = loss_sup(logits, regions, W).item()
        # gated consistency on S3
        tp = [[sig(v) for v in row] for row in teacher.tolist()]
        gate = [[s3[j] and tp[i][j] > W.tau for j in range(L)] for i in range(2)]
        if any(any(r) for r in gate):
            b, d = masked_loop(lg, tp, gate, skip_empty=True)
            want_unsup = W.bce * b + W.dice * d
        else:
            want_unsup = 0.0
        got_unsup = loss_unsup(logits, teacher, regions == S3, W)[0].item()
        # real-phase total
        want_real = W.cls * l_cls + want_sup + want_unsup
        got_real = float(loss_total_real(l_cls, got_sup, got_unsup, W))
        # soft-label BCE
        soft = torch.rand(2, L, generator=gen, dtype=torch.float64)
        num = sum(bce(sig(lg[i][j]), soft[i, j].item()) * soft[i, j].item() for i in range(2) for j in range(L))
        want_soft = num / soft.sum().item()
        got_soft = soft_bce(logits, soft).item()
        for got, want in ((got_sim, want_sim), (got_sup, want_sup), (got_unsup, want_unsup),
                          (got_real, want_real), (got_soft, want_soft)):
            worst_val = max(worst_val, abs(got - want))

        if trial % 4 == 0:
            grads = [
                fd_check(lambda x: loss_sim(x, cls_logits, targets, token_mask, cats, W)[0], logits),
                fd_check(lambda x: loss_sim(logits, x, targets, token_mask, cats, W)[0], cls_logits),
                fd_check(lambda x: loss_sup(x, regions, W), logits),
                fd_check(lambda x: soft_bce(x, soft), logits),
            ]
            if want_unsup > 0:
                grads.append(fd_check(lambda x: loss_unsup(x, teacher, regions == S3, W)[0], logits))
            worst_grad = max(worst_grad, max(grads))
    ok = worst_val <= 1e-6 and worst_grad < 1e-3 and time.time() - t0 < 300
    report(capsys, 2, "losses match loops, gradients match finite differences", ok,
           f"max value error {worst_val:.2e}, max gradient relative error {worst_grad:.2e}", t0)


# -- 3 ------------------------------------------------------------------------

def test_criterion_3_mask_semantics(capsys):
    t0 = time.time()
    eps = 1e-7
    values = [-1.0, -eps, 0.0, eps, 1.0]
    bad = 0
    for a in values:
        for b in values:
            got = resolve_labels(np.array([[a], [b]]))[0]
            fa, fb = a > 0, b > 0   # sigmoid(x) > 0.5 exactly when x > 0
            want = LABEL_BG if not (fa or fb) else LABEL_A if fa and (not fb or a >= b) else LABEL_B
            bad += got != want
    zero_is_bg = resolve_labels(np.zeros((2, 1)))[0] == LABEL_BG
    torch.manual_seed(1)
    dec = LGADecoder(16).double()
    violations = 0
    with torch.no_grad():
        for i in range(1000):
            n1, n2, n3 = np.random.default_rng(i).integers(1, 8, size=3)
            out = dec.decode(*(torch.randn(int(n), 16, dtype=torch.float64) for n in (n1, n2, n3)))
            m1, m2, bg = out.m1, out.m2, out.background
            labels = out.labels()
            violations += int(torch.any(bg != (~m1 & ~m2)))
            violations += int(np.any((labels == LABEL_BG) != bg.numpy()))
            violations += int(np.any((labels == LABEL_A) & ~m1.numpy()) or np.any((labels == LABEL_B) & ~m2.numpy()))
    ok = bad == 0 and zero_is_bg and violations == 0
    report(capsys, 3, "strict 0.5 threshold and background trichotomy", ok,
           f"{bad} threshold mismatches of 25, zero logit background={zero_is_bg}, "
           f"{violations} trichotomy violations in 1000 outputs", t0)


# -- 4 ------------------------------------------------------------------------

def test_criterion_4_ema_contract(small_samples, capsys, monkeypatch):
    t0 = time.time()
    torch.set_default_dtype(torch.float64)
    try:
        torch.manual_seed(0)
        model = Labeler(LabelerConfig(channels=16))
        flat = lambda m: torch.cat([p.detach().flatten() for p in m.parameters()])
        theta0 = flat(model).clone()
        trajectory, hash_faults = [], []
        state = {"hash": param_hash(model)}
        real = tr.ema_update

        def recording(teacher, student, alpha):
            # the teacher must be untouched since the previous EMA call
            if param_hash(teacher) != state["hash"]:
                hash_faults.append(len(trajectory))
            trajectory.append(flat(student).clone())
            out = real(teacher, student, alpha)
            state["hash"] = param_hash(teacher)
            return out

        monkeypatch.setattr(tr, "ema_update", recording)
        samples = small_samples[:6]
        cfg = TrainConfig(real_epochs=5, real_batch=len(samples), ema_decay=0.9)
        res = finetune_smt(model, samples, cfg, eval_hook=lambda t: 0.0, eval_every=1)
        after_hash = param_hash(res.model)
    finally:
        torch.set_default_dtype(torch.float32)
    alpha, k = 0.9, len(trajectory)
    closed = alpha ** k * theta0 + sum((1 - alpha) * alpha ** (k - 1 - i) * trajectory[i] for i in range(k))
    err = (flat(res.model) - closed).abs().max().item()
    # edge cases
    t, s = Labeler(LabelerConfig(channels=8)), Labeler(LabelerConfig(channels=8))
    t_before, s_vals = flat(t).clone(), flat(s).clone()
    ema_update(t, s, 1.0)
    edge1 = torch.equal(flat(t), t_before)
    ema_update(t, s, 0.0)
    edge0 = torch.equal(flat(t), s_vals)
    ok = k == 5 and err <= 1e-7 and edge0 and edge1 and not hash_faults and after_hash == state["hash"]
    report(capsys, 4, "EMA equals closed-form trajectory", ok,
           f"{k} steps, max error {err:.2e}, alpha=0 exact {edge0}, alpha=1 exact {edge1}, "
           f"teacher writes outside EMA: {len(hash_faults)}", t0)


# -- 5 ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def benchmark_world():
    cfg = BenchmarkConfig()
    world = generate_world(WorldConfig(num_scenes=cfg.train_scenes, superpoint_size=cfg.superpoint_size,
                                       seed=cfg.seed))
    samples = [s for sc in world for s in extract_overlap_samples(sc)]
    return world, samples


def test_criterion_5_ssg_plausibility(benchmark_world, capsys):
    t0 = time.time()
    world, real = benchmark_world
    bank, stats = extract_object_bank(world), harvest_stats(real)
    cfg = SimConfig()
    samples, manifest = generate_corpus(stats, bank, 1000, cfg)
    reports = [verify_plausibility(s, cfg) for s in samples]
    collisions = sum(not r.collision_ok for r in reports)
    floating = sum(not r.floating_ok for r in reports)
    empty = sum(not r.s3_ok for r in reports)
    # retry limit: colliding placements are attempted exactly M times, then rejected
    obj = bank.objects[0]
    attempts = []
    out = compose_sample(obj, obj, 0.0, cfg, np.random.default_rng(0), redraw=lambda: attempts.append(1) or 0.0)
    rejected_at_m = isinstance(out, Rejection) and out.attempts == 8 and len(out.reasons) == 8 and len(attempts) == 7
    fails = sum(manifest["failed_attempts"].values())
    consistent = fails >= 8 * manifest["rejected_pairs"]
    ok = (len(samples) == 1000 and collisions == 0 and floating == 0 and empty == 0 and rejected_at_m
          and consistent and time.time() - t0 < 300)
    report(capsys, 5, "simulated samples are plausible", ok,
           f"{len(samples)} samples, {collisions} collisions, {floating} floating, {empty} empty overlaps, "
           f"rejection at M=8: {rejected_at_m}, {manifest['rejected_pairs']} pairs rejected", t0)


# -- 6 ------------------------------------------------------------------------

def test_criterion_6_statistics_fidelity(benchmark_world, capsys):
    t0 = time.time()
    _, real = benchmark_world
    stats = harvest_stats(real)
    groups = {}
    for s in real:
        a, b = s.boxes[0].category, s.boxes[1].category
        key = (min(a, b), max(a, b))
        groups.setdefault(key, []).append(math.dist(s.boxes[0].center.tolist(), s.boxes[1].center.tolist()))
    exact = set(groups) == set(stats.entries)
    for key, d in groups.items():
        n = len(d)
        mean = sum(Fraction(x) for x in d) / n
        std = math.sqrt(float(sum((Fraction(x) - mean) ** 2 for x in d) / (n - 1))) if n > 1 else 0.0
        exact &= stats.entries[key] == PairEntry(n, float(mean), std)
    # pair frequencies
    rng = np.random.default_rng(0)
    bank = extract_object_bank(benchmark_world[0])
    draws = 100_000
    counts = {}
    for _ in range(draws):
        key = sample_pair(stats, bank, rng)[3]
        counts[key] = counts.get(key, 0) + 1
    servable = {k: e.n for k, e in stats.entries.items() if all(c in bank.by_category() for c in k)}
    total = sum(servable.values())
    worst = 0.0
    for key, n in servable.items():
        p = n / total
        se = math.sqrt(p * (1 - p) / draws)
        worst = max(worst, abs(counts.get(key, 0) / draws - p) / se)
    ok = exact and worst <= 3.0
    report(capsys, 6, "pair statistics and sampling frequencies", ok,
           f"exact match {exact} over {len(groups)} pairs, worst frequency deviation {worst:.2f} SE", t0)


# -- 9 ------------------------------------------------------------------------

def macc_double_loop(preds, gts):
    accs = []
    for p, g in zip(preds, gts):
        if len(g) == 0:
            continue
        hits = 0
        for x, y in zip(p, g):
            hits += int(x == y)
        accs.append(hits / len(g))
    return float(sum(Fraction(a) for a in accs) / len(accs))


def test_criterion_9_macc(capsys):
    t0 = time.time()
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(1, 12))
        gts = [rng.integers(0, 3, size=int(rng.integers(1, 60))) for _ in range(n)]
        preds = [np.where(rng.random(len(g)) < 0.6, g, rng.integers(0, 3, size=len(g))) for g in gts]
        mismatches += compute_macc(preds, gts).macc != macc_double_loop(preds, gts)
    # sample-averaged, not point-weighted: 1/2 and 10/10 give 0.75, not 11/12
    r = compute_macc([[LABEL_A, LABEL_A], [LABEL_B] * 10], [[LABEL_A, LABEL_B], [LABEL_B] * 10])
    ok = mismatches == 0 and r.macc == 0.75
    report(capsys, 9, "mAcc equals the double-loop oracle", ok,
           f"{mismatches} mismatches in 100 cases, disambiguation example {r.macc}", t0)


# -- 7, 8, 10 -----------------------------------------------------------------

EVAL_EVERY = 3


@pytest.fixture(scope="module")
def pipeline_runs():
    cfg = BenchmarkConfig(eval_every=EVAL_EVERY)
    t0 = time.time()
    first = run_pipeline(cfg)
    first_time = time.time() - t0
    return cfg, first, first_time


def test_criterion_7_end_to_end_benchmark(pipeline_runs, capsys):
    t0 = time.time()
    _, res, elapsed = pipeline_runs
    table = res.table
    sa, sb, maj = table.macc("saformer"), table.macc("smaller-box"), table.macc("majority")
    ok = sa >= sb + 0.10 and sa >= maj and elapsed < 30 * 60
    with capsys.disabled():
        print("\n" + table.to_text())
    report(capsys, 7, "labeler beats smaller-box by 10 points and the majority baseline", ok,
           f"saformer {100 * sa:.2f}, smaller-box {100 * sb:.2f}, majority {100 * maj:.2f}, "
           f"overlap fraction {res.overlap_fraction:.2f}, {res.counts}, pipeline {elapsed:.0f}s", t0 - elapsed)


def test_criterion_8_ssg_speedup(pipeline_runs, capsys):
    t0 = time.time()
    _, res, _ = pipeline_runs
    ssg, scratch = res.curves["saformer"], res.curves["saformer-no-ssg"]
    budget = scratch[-1][0]
    target = scratch[-1][1]
    reached = next((step for step, v in ssg if v >= target), None)
    ok = reached is not None and reached <= 0.5 * budget
    report(capsys, 8, "simulation pretraining reaches the scratch run's final mAcc in half the steps", ok,
           f"scratch final {100 * target:.2f} after {budget} steps; pretrained reaches it at step {reached} "
           f"(curve {[(s, round(100 * v, 1)) for s, v in ssg]})", t0)


def test_criterion_10_determinism(pipeline_runs, capsys):
    t0 = time.time()
    cfg, first, _ = pipeline_runs
    second = run_pipeline(cfg)
    same = first.table.to_dict() == second.table.to_dict() and first.curves == second.curves
    report(capsys, 10, "identical seeds give identical benchmark tables", same,
           "tables and curves identical" if same else f"{first.table.to_text()}\nvs\n{second.table.to_text()}", t0)
