"""Acceptance suite.

Each test covers one acceptance criterion and reports a single pass/fail
line (collected again in the terminal summary). The desk-scale training
runs dominate the runtime: roughly four minutes for the change-detection
run and nine for the pair of semantic runs on one CPU core.
"""

import math
import time

import numpy as np
import pytest
from oracles import flood_fill_components, naive_attention, probe_parameter_gradients, same_partition

from objformer import checkpoint as ckpt
from objformer.attention import (FUSIONS, AttentionWeights, CrossAttentionWeights, object_cross_attention,
                                 object_self_attention, pool_tokens, reassign)
from objformer.autograd import Tensor, gradcheck, ops
from objformer.data import DIRECTIONS, attach_maps, load_dataset, make_batch, save_dataset, synth_generate
from objformer.harness import (REG_OFFSETS, RunConfig, Trainer, evaluate, pooling_sweep, registration_sweep,
                               time_attention)
from objformer.losses import bcd_loss, cce_loss, foreground_probs, lcm_loss
from objformer.metrics import format_table
from objformer.net import ModelConfig, ObjFormer
from objformer.net.complexity import complexity_table
from objformer.segmentation import connected_components, slic

F64 = np.float64

# desk-scale setting: tiny preset, 64 training pairs of 64x64, change_rate 0.3
DESK = dict(preset="tiny", lr=3e-3, batch_size=8, iterations=1500, seed=0)
N_TRAIN, N_TEST = 64, 32


@pytest.fixture(scope="module")
def desk_data():
    train = [attach_maps(synth_generate(i, 64, 64, change_rate=0.3)) for i in range(N_TRAIN)]
    test = [attach_maps(synth_generate(10000 + i, 64, 64, change_rate=0.3)) for i in range(N_TEST)]
    return train, test


# ---------------------------------------------------------------------------
# 1. gradient suite


def _leaf(rng, *shape, positive=False):
    a = rng.standard_normal(shape)
    return Tensor(np.abs(a) + 0.5 if positive else a, requires_grad=True, dtype=F64)


def _weighted(rng, out_fn):
    cache = {}

    def fn():
        y = out_fn()
        if "w" not in cache:
            cache["w"] = rng.standard_normal(y.shape)
        return ops.sum_(ops.mul_const(y, cache["w"]))

    return fn


def _objects(rng, n, h, w, batch=None):
    shape = (h, w) if batch is None else (batch, h, w)
    lab = rng.integers(0, n, shape)
    lab.reshape(-1, h * w)[:, :n] = np.arange(n)  # every id present
    return lab


def _trainable(ws, rng):
    """Replace the small initial weights with O(1) ones so every path matters."""
    for t in ws.named().values():
        t.data[...] = 0.5 * rng.standard_normal(t.shape)
        t.requires_grad = True
    return ws


def primitive_cases(rng):
    """(name, fn, inputs) gradient checks for one seed."""
    cases = []
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    for name in ("add", "sub", "mul"):
        f = getattr(ops, name)
        cases.append((name, _weighted(rng, lambda f=f: f(a, b)), [a, b]))
    x = _leaf(rng, 2, 3, 4)
    unary = {
        "exp": lambda: ops.exp(x),
        "gelu": lambda: ops.gelu(x),
        "softmax": lambda: ops.softmax(x, axis=1),
        "mean": lambda: ops.mean(x, axis=2),
        "transpose": lambda: ops.transpose(x, (2, 0, 1)),
        "slice": lambda: ops.slice_(x, (slice(None), slice(1, 3))),
        "bilinear_upsample": lambda: ops.bilinear_upsample(ops.reshape(x, (1, 2, 3, 4)), 2),
        "nearest_upsample": lambda: ops.nearest_upsample(ops.reshape(x, (1, 2, 3, 4)), 2),
    }
    for name, f in unary.items():
        cases.append((name, _weighted(rng, f), [x]))
    pos = _leaf(rng, 3, 4, positive=True)
    cases.append(("log_clamp", _weighted(rng, lambda: ops.log(ops.clamp_max(pos, 1e6))), [pos]))
    m1, m2, bias = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    cases.append(("linear", _weighted(rng, lambda: ops.linear(m1, m2, bias)), [m1, m2, bias]))
    c1 = _leaf(rng, 2, 3)
    cases.append(("concat", _weighted(rng, lambda: ops.concat([m1, ops.reshape(ops.concat([c1, c1], 1), (2, 3, 2))],
                                                              axis=2)), [m1, c1]))
    k, stride, pad = [(1, 1, 0), (3, 1, 1), (3, 2, 1), (7, 4, 3)][int(rng.integers(0, 4))]
    img, wc, bc = _leaf(rng, 1, 2, 8, 8), _leaf(rng, 3, 2, k, k), _leaf(rng, 3)
    cases.append((f"conv2d_k{k}s{stride}", _weighted(rng, lambda: ops.conv2d(img, wc, bc, stride, pad)),
                  [img, wc, bc]))
    wd, bd = _leaf(rng, 2, 3, 3), _leaf(rng, 2)
    cases.append(("depthwise_conv2d", _weighted(rng, lambda: ops.depthwise_conv2d(img, wd, bd)), [img, wd, bd]))
    g, be = _leaf(rng, 4), _leaf(rng, 4)
    ln_in = _leaf(rng, 3, 5, 4)
    cases.append(("layer_norm", _weighted(rng, lambda: ops.layer_norm(ln_in, g, be)), [ln_in, g, be]))
    logits = _leaf(rng, 2, 4, 3, 3)
    target = rng.integers(0, 4, (2, 3, 3))
    target[0, 0, 0] = 255
    cases.append(("cross_entropy", lambda: ops.cross_entropy(logits, target, ignore_label=255), [logits]))
    lcm = _leaf(rng, 2, 5, 3, 3)
    y_osm = rng.integers(1, 5, (2, 3, 3))
    y_bcd = rng.integers(0, 2, (2, 3, 3))
    y_bcd[0, 0, 0] = 1
    cases.append(("cce", lambda: cce_loss(foreground_probs(lcm), y_osm, y_bcd), [lcm]))
    cases.append(("lcm_loss", lambda: lcm_loss(lcm, y_osm * (1 - y_bcd)), [lcm]))
    cases.append(("bcd_loss", lambda: bcd_loss(ops.slice_(lcm, (slice(None), slice(0, 2))), y_bcd), [lcm]))
    return cases


def composite_cases(rng):
    """pool -> attention -> reassign paths; the key bias is checked separately."""
    cases, zero_grad = [], []
    feat = _leaf(rng, 2, 2, 3, 3)
    lab = _objects(rng, 5, 3, 3, batch=2)
    fusion = FUSIONS[int(rng.integers(0, len(FUSIONS)))]
    cases.append((f"pool_{fusion}_reassign", _weighted(rng, lambda: reassign(pool_tokens(feat, lab, fusion).tokens,
                                                                             lab, batched=True)), [feat]))
    w = _trainable(AttentionWeights.init(2, 2, rng, F64), rng)
    cases.append(("object_self_attention", _weighted(rng, lambda: object_self_attention(feat, lab, w)),
                  [feat, *(t for n, t in w.named().items() if n != "bk")]))
    zero_grad.append(w.bk)
    fo = _leaf(rng, 2, 2, 3, 3)
    inst, obj = _objects(rng, 3, 3, 3, batch=2), _objects(rng, 4, 3, 3, batch=2)
    cw = _trainable(CrossAttentionWeights.init(2, 2, 2, 2, rng, F64), rng)
    wa, wb = rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 2, 3, 3))

    def cross():
        ym, yo = object_cross_attention(feat, inst, fo, obj, cw)
        return ops.add(ops.sum_(ops.mul_const(ym, wa)), ops.sum_(ops.mul_const(yo, wb)))

    cases.append(("object_cross_attention", cross, [feat, fo, *cw.named().values()]))
    return cases, zero_grad


def end_to_end_error(seed: int) -> float:
    cfg = ModelConfig.from_preset("tiny", task="scd")
    model = ObjFormer(cfg, seed=seed, dtype=F64)
    sample = attach_maps(synth_generate(seed, 32, 32))
    batch = make_batch([sample], 1500, cfg.stage_strides(), F64).inputs()
    rng = np.random.default_rng(seed)
    wts = []

    def fn():
        outs = model(batch)
        if not wts:
            wts.extend(rng.standard_normal(o.shape) for o in outs)
        total = ops.sum_(ops.mul_const(outs[0], wts[0]))
        for o, w in zip(outs[1:], wts[1:]):
            total = ops.add(total, ops.sum_(ops.mul_const(o, w)))
        return total

    return probe_parameter_gradients(fn, model.named_parameters(), rng, n_tensors=2, n_entries=1)


def test_criterion_1_gradient_suite(acceptance):
    t0 = time.perf_counter()
    worst_local, worst_e2e, worst_name, max_bk = 0.0, 0.0, "", 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        comp, zero = composite_cases(rng)
        for name, fn, inputs in primitive_cases(rng) + comp:
            err = gradcheck(fn, inputs)
            if err > worst_local:
                worst_local, worst_name = err, name
        max_bk = max(max_bk, max(float(np.abs(t.grad).max()) for t in zero))
        worst_e2e = max(worst_e2e, end_to_end_error(seed))
    elapsed = time.perf_counter() - t0
    ok = worst_local <= 1e-4 and worst_e2e <= 1e-3 and max_bk <= 1e-10 and elapsed < 120
    acceptance(1, ok, f"100 seeds, primitives/composite max rel err {worst_local:.2e} ({worst_name}), "
                      f"end-to-end {worst_e2e:.2e}, key-bias |grad| {max_bk:.1e}, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. partition suite


def test_criterion_2_partition_suite(acceptance):
    failures = []
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        h, w = (int(v) for v in rng.integers(1, 13, 2))
        img = rng.integers(0, int(rng.integers(1, 5)), (h, w))
        cc = connected_components(img)
        cc.validate()
        ok = same_partition(cc.labels, flood_fill_components(img))
        ok &= cc.n_instances == len(np.unique(flood_fill_components(img)))
        ok &= all(len(np.unique(img[cc.labels == k])) == 1 for k in range(cc.n_instances))
        rgb = rng.integers(0, 256, (int(rng.integers(4, 17)), int(rng.integers(4, 17)), 3), dtype=np.uint8)
        n = int(rng.integers(1, min(20, rgb.shape[0] * rgb.shape[1]) + 1))
        m = slic(rgb, n)
        m.validate()
        ok &= set(np.unique(m.labels)) == set(range(m.n_objects))
        ok &= m.n_objects <= max(2 * n, 1)
        ok &= same_partition(m.labels, connected_components(m.labels).labels)
        if not ok:
            failures.append(seed)
    acceptance(2, not failures, f"1000 random inputs, connected components equal flood fill, "
                                f"SLIC partitions valid and connected; failing seeds {failures[:5]}")
    assert not failures


# ---------------------------------------------------------------------------
# 3. attention equivalence


def test_criterion_3_attention_matches_naive_oracle(acceptance):
    worst, worst_row = 0.0, 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        heads = int(rng.choice([1, 2]))
        c = 2 * int(rng.integers(1, 3))
        h, w = 3, 4
        n = int(rng.integers(1, 9))
        lab = _objects(rng, n, h, w)
        feat = Tensor(rng.standard_normal((c, h, w)), dtype=F64)
        ws = _trainable(AttentionWeights.init(c, heads, rng, F64), rng)
        y, probs = object_self_attention(feat, lab, ws, return_probs=True)
        tok = pool_tokens(feat, lab).tokens.data
        ref, pref = naive_attention(tok, tok, tok, ws.wq.data, ws.bq.data, ws.wk.data, ws.bk.data, ws.wv.data,
                                    ws.bv.data, heads)
        ref = ref @ ws.wo.data + ws.bo.data
        worst = max(worst, np.abs(probs.data[0] - pref).max(), np.abs(y.data - np.moveaxis(ref[lab], -1, 0)).max())
        worst_row = max(worst_row, np.abs(probs.data.sum(-1) - 1).max())

        ni, no = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        inst, obj = _objects(rng, ni, h, w), _objects(rng, no, h, w)
        co = 2 * int(rng.integers(1, 3))
        cw = _trainable(CrossAttentionWeights.init(c, co, 2 * heads, heads, rng, F64), rng)
        fm, fo = Tensor(rng.standard_normal((c, h, w)), dtype=F64), Tensor(rng.standard_normal((co, h, w)), dtype=F64)
        ym, yo, am, ao = object_cross_attention(fm, inst, fo, obj, cw, return_probs=True)
        tm, to = pool_tokens(fm, inst).tokens.data, pool_tokens(fo, obj).tokens.data
        rm, pm = naive_attention(tm, to, to, cw.wq.data, cw.bq.data, cw.wk.data, cw.bk.data, cw.wv_opt.data,
                                 cw.bv_opt.data, heads)
        ro, po = naive_attention(to, tm, tm, cw.wk.data, cw.bk.data, cw.wq.data, cw.bq.data, cw.wv_osm.data,
                                 cw.bv_osm.data, heads)
        rm = rm @ cw.wo_map.data + cw.bo_map.data
        ro = ro @ cw.wo_opt.data + cw.bo_opt.data
        worst = max(worst, np.abs(am.data[0] - pm).max(), np.abs(ao.data[0] - po).max(),
                    np.abs(ym.data - np.moveaxis(rm[inst], -1, 0)).max(),
                    np.abs(yo.data - np.moveaxis(ro[obj], -1, 0)).max())
        worst_row = max(worst_row, np.abs(am.data.sum(-1) - 1).max(), np.abs(ao.data.sum(-1) - 1).max())
    ok = worst <= 1e-6 and worst_row <= 1e-6
    acceptance(3, ok, f"50 seeds x (self + cross), <= 8 tokens: max |diff| {worst:.1e}, "
                      f"max |row sum - 1| {worst_row:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 4. and 5. complexity and parameter anchors


def test_criterion_4_complexity_anchor(acceptance):
    rows = {r["mode"]: r for r in complexity_table(ObjFormer(ModelConfig()), 512, 512, 1500, 1500)}
    ratio = rows["vanilla"]["macs"] / rows["object_guided"]["macs"]
    score = rows["vanilla"]["stage1_attention_scores"] / rows["object_guided"]["stage1_attention_scores"]
    timing = time_attention(128, 1500)
    ok = 5 <= ratio <= 12 and score >= 100
    acceptance(4, ok, f"512x512, 1500 tokens: vanilla {rows['vanilla']['macs'] / 1e9:.1f}G / object-guided "
                      f"{rows['object_guided']['macs'] / 1e9:.1f}G = {ratio:.2f}, stage-1 score ratio {score:.1f}; "
                      f"measured layer speedup at 128x128 {timing['speedup']:.1f}x")
    assert ok


def test_criterion_5_parameter_anchor(acceptance):
    bcd = ObjFormer(ModelConfig()).param_count()
    scd = ObjFormer(ModelConfig(task="scd")).param_count()
    ok = abs(bcd - 28.37e6) <= 0.2 * 28.37e6 and scd <= 1.15 * bcd
    acceptance(5, ok, f"BCD {bcd / 1e6:.2f}M (window 22.70M..34.04M), SCD {scd / 1e6:.2f}M "
                      f"(+{100 * (scd / bcd - 1):.1f}%)")
    assert ok


# ---------------------------------------------------------------------------
# 6. desk-scale change detection


@pytest.mark.slow
def test_criterion_6_desk_bcd(desk_data, acceptance):
    train, test = desk_data
    cfg = RunConfig(task="bcd", eval_every=0, **DESK)
    t0 = time.perf_counter()
    tr = Trainer(cfg, train, test).fit(log_every=0)
    elapsed = time.perf_counter() - t0
    rep = tr.evaluate().report
    # determinism: two fresh runs agree bit for bit with each other and with the long run's prefix
    a, b = Trainer(cfg, train), Trainer(cfg, train)
    la = [a.step().l_total for _ in range(10)]
    lb = [b.step().l_total for _ in range(10)]
    same = la == lb == [r.l_total for r in tr.history[:10]]
    same &= all(np.array_equal(p.data, b.model.named_parameters()[k].data)
                for k, p in a.model.named_parameters().items())
    same &= evaluate(tr.model, test, cfg.test_scales).report.to_dict() == rep.to_dict()
    ok = rep.f1 >= 0.80 and rep.kc >= 0.60 and elapsed <= 900 and same
    acceptance(6, ok, f"held-out F1 {rep.f1:.3f} (>= 0.80), KC {rep.kc:.3f} (>= 0.60), "
                      f"{elapsed:.0f}s, deterministic {same}")
    assert ok


# ---------------------------------------------------------------------------
# 7. converse cross-entropy effect


@pytest.fixture(scope="module")
def scd_pair(desk_data):
    train, test = desk_data
    runs = {}
    for cce in (True, False):
        cfg = RunConfig(task="scd", eval_every=150, cce=cce, **DESK)
        runs[cce] = Trainer(cfg, train, test).fit(log_every=0)
    return runs


@pytest.mark.slow
def test_criterion_7_cce_effect(scd_pair, acceptance):
    on, off = scd_pair[True].curve, scd_pair[False].curve
    gain = on[-1]["tr_kc"] - off[-1]["tr_kc"]
    last = DESK["iterations"] * 2 / 3
    tail = [(a["changed_acc"], b["changed_acc"]) for a, b in zip(on, off) if a["iteration"] > last]
    dominates = all(x > y for x, y in tail)
    ok = gain >= 0.05 and dominates
    acceptance(7, ok, f"trKC with CCE {on[-1]['tr_kc']:.3f}, without {off[-1]['tr_kc']:.3f}, gain {gain:+.3f} "
                      f"(>= +0.05); changed-area accuracy over final third "
                      f"{[round(x, 3) for x, _ in tail]} vs {[round(y, 3) for _, y in tail]}, dominates {dominates}")
    assert ok


# ---------------------------------------------------------------------------
# 8. pooling statistic sweep


@pytest.mark.slow
def test_criterion_8_pooling_sweep(desk_data, acceptance):
    train, test = desk_data
    base = RunConfig(task="bcd", eval_every=0, **{**DESK, "iterations": 60})
    rows = pooling_sweep(base, train, test[:8])
    table = format_table(rows)
    ok = [r["fusion"] for r in rows] == ["mean", "max", "min", "mean+max"]
    ok &= all(math.isfinite(r[k]) for r in rows for k in ("f1", "kc"))
    acceptance(8, ok, "mean/max/min/mean+max table emitted (no ordering asserted)\n" + table)
    assert ok


# ---------------------------------------------------------------------------
# 9. registration harness


def test_criterion_9_registration_grid(desk_data, acceptance):
    train, test = desk_data
    cfg = RunConfig(task="scd", eval_every=0, **{**DESK, "iterations": 40})
    model = Trainer(cfg, train).fit(log_every=0).model
    test = test[:6]
    avg, per_dir = registration_sweep(model, test, cfg.test_scales)
    base = evaluate(model, test, cfg.test_scales).report
    keys = ("clf_oa", "clf_kc", "cd_kc", "tr_oa", "tr_kc")
    grid = sorted((r["offset"], r["direction"]) for r in per_dir)
    ok = grid == sorted((o, d) for o in REG_OFFSETS for d in DIRECTIONS) and len(grid) == 15
    ok &= [r["offset"] for r in avg] == list(REG_OFFSETS)
    ok &= all(avg[0][k] == getattr(base, k) for k in keys)
    ok &= all(r[k] == getattr(base, k) for r in per_dir if r["offset"] == 0 for k in keys)
    acceptance(9, ok, f"{len(REG_OFFSETS)} offsets x {len(DIRECTIONS)} directions, offset-0 row bit-equal to "
                      f"evaluation (trKC {base.tr_kc:.4f})")
    assert ok


# ---------------------------------------------------------------------------
# 10. round trips and resume


def test_criterion_10_round_trip_and_resume(desk_data, tmp_path, acceptance):
    train, test = desk_data
    samples = [s.with_instance_map() if s.instance_map is None else s for s in train[:16] + test[:8]]
    save_dataset([(s, "train") for s in samples[:16]] + [(s, "test") for s in samples[16:]], tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    data_ok = len(loaded) == len(samples)
    for a, b in zip(samples, loaded):
        for k in ("x_osm", "x_opt", "y_osm", "y_bcd", "y_opt_full"):
            data_ok &= getattr(a, k).dtype == getattr(b, k).dtype and np.array_equal(getattr(a, k), getattr(b, k))
        data_ok &= a.object_maps.keys() == b.object_maps.keys()
        data_ok &= all(np.array_equal(a.object_maps[k].labels, b.object_maps[k].labels) for k in a.object_maps)
        data_ok &= np.array_equal(a.instance_map.labels, b.instance_map.labels)

    cfg = RunConfig(task="scd", eval_every=0, augment=True, **{**DESK, "iterations": 10})
    ref = Trainer(cfg, loaded[:16])
    for _ in range(3):
        ref.step()
    ref.save(tmp_path / "mid.ckpt")
    ck = ckpt.load(tmp_path / "mid.ckpt")
    enc_ok = ckpt.encode(ckpt.decode(ckpt.encode(ck))) == ckpt.encode(ck)
    want = ref.step()
    res = Trainer.resume(tmp_path / "mid.ckpt", loaded[:16])
    got = res.step()
    resume_ok = (want.l_total, want.iteration, want.scale) == (got.l_total, got.iteration, got.scale)
    resume_ok &= all(np.array_equal(p.data, res.model.named_parameters()[k].data)
                     for k, p in ref.model.named_parameters().items())
    ok = data_ok and enc_ok and resume_ok
    acceptance(10, ok, f"dataset of {len(samples)} pairs bit-exact {data_ok}, checkpoint bytes stable {enc_ok}, "
                       f"resumed next step bit-exact {resume_ok}")
    assert ok
