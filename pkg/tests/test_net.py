import numpy as np
import pytest
from oracles import probe_parameter_gradients

from objformer.autograd import ConfigurationError, DimensionError, Tensor, count_macs, gradcheck, no_grad, ops
from objformer.data import attach_maps, make_batch, synth_generate
from objformer.net import ModelConfig, ObjFormer
from objformer.net.complexity import complexity_table, model_macs, param_count
from objformer.net.model import EncoderStage, FusionBlock

TINY = ModelConfig.from_preset("tiny")


def batch_for(cfg, n=2, size=64, dtype=np.float32, seed=0):
    samples = [attach_maps(synth_generate(seed + i, size, size)) for i in range(n)]
    return make_batch(samples, 1500, cfg.stage_strides(), dtype).inputs()


@pytest.fixture(scope="module")
def tiny_batch():
    return batch_for(TINY)


# -- shapes -----------------------------------------------------------------


def test_tiny_pyramid_shapes(tiny_batch):
    model = ObjFormer(TINY)
    fm, fo = model.encode(tiny_batch)
    assert [f.shape[2] for f in fm] == [16, 8, 4, 2]
    assert [f.shape[1] for f in fm] == list(TINY.map_channels)
    assert [f.shape[1] for f in fo] == list(TINY.opt_channels)


def test_full_preset_strides():
    assert [512 // s for s in ModelConfig().stage_strides()] == [128, 64, 32, 16]


def test_bcd_and_scd_output_shapes(tiny_batch):
    with no_grad():
        logits = ObjFormer(TINY)(tiny_batch)
        assert logits.shape == (2, 2, 64, 64)
        assert np.all(np.isfinite(logits.data))
        out = ObjFormer(ModelConfig.from_preset("tiny", task="scd"))(tiny_batch)
    assert [o.shape for o in out] == [(2, 2, 64, 64), (2, 8, 64, 64), (2, 8, 64, 64)]


def test_forward_is_deterministic(tiny_batch):
    with no_grad():
        a = ObjFormer(TINY, seed=3)(tiny_batch).data
        b = ObjFormer(TINY, seed=3)(tiny_batch).data
    np.testing.assert_array_equal(a, b)


def test_other_input_sizes_share_parameters():
    model = ObjFormer(TINY)
    n = param_count(model)
    with no_grad():
        assert model(batch_for(TINY, 1, 32)).shape == (1, 2, 32, 32)
        assert model(batch_for(TINY, 1, 96)).shape == (1, 2, 96, 96)
    assert param_count(model) == n


def test_indivisible_or_mismatched_inputs_rejected(tiny_batch):
    model = ObjFormer(TINY)
    bad = batch_for(TINY, 1, 64)
    bad.x_opt = bad.x_opt[:, :, :32, :32]
    with pytest.raises(DimensionError):
        model(bad)
    odd = batch_for(TINY, 1, 64)
    odd.x_osm = odd.x_opt = np.zeros((1, 3, 48, 48), dtype=np.float32)
    with pytest.raises(ConfigurationError):
        model(odd)


def test_bcd_model_rejects_scd_forward(tiny_batch):
    with pytest.raises(ConfigurationError):
        ObjFormer(TINY).forward_scd(tiny_batch)


def test_zeroed_attention_outputs_still_finite(tiny_batch):
    model = ObjFormer(TINY)
    for name, p in model.named_parameters().items():
        if name.endswith((".wo", ".bo", ".wo_map", ".bo_map", ".wo_opt", ".bo_opt")):
            p.data[...] = 0.0
    with no_grad():
        assert np.all(np.isfinite(model(tiny_batch).data))


# -- parameter and MAC anchors ------------------------------------------------


def test_parameter_counts():
    bcd = param_count(ObjFormer(ModelConfig()))
    scd = param_count(ObjFormer(ModelConfig(task="scd")))
    assert abs(bcd - 28.37e6) <= 0.2 * 28.37e6
    assert 0 < scd - bcd <= 0.15 * bcd
    tiny = ObjFormer(TINY)
    assert param_count(tiny) < 1_000_000
    assert tiny.enc_opt.param_count() > tiny.enc_map.param_count()
    paper = ObjFormer(ModelConfig())
    assert paper.enc_opt.param_count() > paper.enc_map.param_count()


def test_parameter_names_unique_and_ordered():
    a = list(ObjFormer(TINY).named_parameters())
    assert len(a) == len(set(a))
    assert a == list(ObjFormer(TINY, seed=9).named_parameters())


def test_full_preset_macs_table():
    rows = {r["mode"]: r for r in complexity_table(ObjFormer(ModelConfig()), 512, 512, 1500, 1500)}
    ratio = rows["vanilla"]["macs"] / rows["object_guided"]["macs"]
    assert 5 <= ratio <= 12
    assert rows["vanilla"]["stage1_attention_scores"] / rows["object_guided"]["stage1_attention_scores"] >= 100
    assert 27.12e9 / 2 <= rows["object_guided"]["macs"] <= 27.12e9 * 2


@pytest.mark.parametrize("task", ["bcd", "scd"])
def test_instrumented_macs_equal_analytic(task):
    cfg = ModelConfig.from_preset("tiny", task=task)
    model = ObjFormer(cfg)
    batch = batch_for(cfg, 1)
    n_obj = [int(m.max()) + 1 for m in batch.object_maps]
    n_ins = [int(m.max()) + 1 for m in batch.instance_maps]
    with no_grad(), count_macs() as c:
        model(batch)
    assert c.total == model_macs(model, 64, 64, n_obj, n_ins)


# -- building blocks ------------------------------------------------------------


def test_fusion_block_zero_coarse_and_shape():
    rng = np.random.default_rng(0)
    fb = FusionBlock(6, 4, rng, np.float64)
    fine = Tensor(rng.standard_normal((1, 6, 32, 32)))
    zero = Tensor(np.zeros((1, 4, 16, 16)))
    np.testing.assert_allclose(fb(zero, fine).data, fb.conv(fb.proj(fine)).data, atol=1e-12)
    np.testing.assert_allclose(fb(None, fine).data, fb.conv(fb.proj(fine)).data, atol=1e-12)
    assert fb(Tensor(rng.standard_normal((1, 4, 16, 16))), fine).shape == (1, 4, 32, 32)
    with pytest.raises(DimensionError):
        fb(Tensor(np.zeros((1, 4, 8, 8))), fine)


def test_fusion_block_gradient():
    rng = np.random.default_rng(1)
    fb = FusionBlock(3, 2, rng, np.float64)
    coarse = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    fine = Tensor(rng.standard_normal((1, 3, 6, 6)), requires_grad=True)
    wts = rng.standard_normal((1, 2, 6, 6))
    params = list(fb.named_parameters().values())
    assert gradcheck(lambda: ops.sum_(ops.mul_const(fb(coarse, fine), wts)), [coarse, fine, *params]) <= 1e-4


def test_encoder_stage_depth_zero_and_gradient():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
    labels = rng.integers(0, 3, (1, 4, 4))
    labels[0, 0, :3] = np.arange(3)
    empty = EncoderStage(3, 4, 2, 0, 1, 2, rng, np.float64)
    np.testing.assert_allclose(empty(x, labels).data, empty.norm(empty.embed(x)).data)
    stage = EncoderStage(3, 4, 2, 1, 2, 2, rng, np.float64)
    for p in stage.named_parameters().values():
        p.data += 0.1 * rng.standard_normal(p.shape)
    wts = rng.standard_normal((1, 4, 4, 4))
    params = [p for n, p in stage.named_parameters().items() if not n.endswith("attn.bk")]
    assert gradcheck(lambda: ops.sum_(ops.mul_const(stage(x, labels), wts)), [x, *params]) <= 1e-4


def test_attention_sub_block_constant_per_object():
    rng = np.random.default_rng(3)
    stage = EncoderStage(3, 4, 2, 1, 2, 2, rng, np.float64)
    blk = stage.blocks[0]
    blk.use_ffn = False
    labels = np.array([[[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]])
    x = Tensor(np.repeat(np.repeat(rng.standard_normal((1, 4, 2, 2)), 2, axis=2), 2, axis=3))
    y = blk(x, labels).data
    for k in range(4):
        vals = y[0][:, labels[0] == k]
        np.testing.assert_allclose(vals, vals[:, :1].repeat(vals.shape[1], 1), atol=1e-12)


def test_tiny_model_end_to_end_gradient():
    """Finite differences through the whole tiny network at 32x32 (f64).

    Forty random parameter tensors are probed at up to three entries each;
    checking every entry would take hours.
    """
    cfg = ModelConfig.from_preset("tiny", task="scd")
    model = ObjFormer(cfg, seed=4, dtype=np.float64)
    batch = batch_for(cfg, 1, 32, np.float64, seed=7)
    rng = np.random.default_rng(5)
    wts = [rng.standard_normal((1, 2, 32, 32)), rng.standard_normal((1, 8, 32, 32)),
           rng.standard_normal((1, 8, 32, 32))]

    def fn():
        outs = model(batch)
        return ops.add(ops.add(ops.sum_(ops.mul_const(outs[0], wts[0])), ops.sum_(ops.mul_const(outs[1], wts[1]))),
                       ops.sum_(ops.mul_const(outs[2], wts[2])))

    worst = probe_parameter_gradients(fn, model.named_parameters(), rng, n_tensors=40, n_entries=3)
    assert worst <= 1e-3
