import numpy as np
import numpy.testing as npt
import pytest

from tie import tensor as T
from tie import encoder as enc
from tie.gradcheck import grad_check


@pytest.fixture(autouse=True)
def fp64():
    T.set_mode("fp64")
    yield


def tiny_cfg(variant="tie-default", **kw):
    args = dict(d_ie=16, n_layers=2, n_heads=2, patch_p=14, tile_h=28, tile_w=28,
                channels=3, variant=variant, d_te=8)
    args.update(kw)
    return enc.EncoderConfig(**args)


def make_inputs(cfg, l_txt=3, seed=0):
    rng = T.Rng(seed)
    tile = rng.uniform((cfg.tile_h, cfg.tile_w, cfg.channels))
    emb = rng.normal((l_txt, cfg.d_te)) if l_txt else None
    return tile, emb


def test_patchify_counts():
    cfg = tiny_cfg()
    params = enc.init_encoder_params(cfg, T.Rng(1))
    tile, _ = make_inputs(cfg)
    out = enc.patchify(T.constant(tile[None]), params, cfg)
    assert out.shape == (1, 4, 16)
    big = tiny_cfg(tile_h=448, tile_w=448)
    assert big.n_patches == 1024


def test_patchify_constant_tile_identical_embeddings():
    cfg = tiny_cfg()
    params = enc.init_encoder_params(cfg, T.Rng(1))
    tile = np.full((28, 28, 3), 0.5)
    out = enc.patchify(T.constant(tile[None]), params, cfg).data[0]
    for row in out[1:]:
        npt.assert_array_equal(row, out[0])


def test_patchify_raster_order():
    cfg = tiny_cfg(channels=1)
    params = enc.init_encoder_params(cfg, T.Rng(1))
    # kernel that sums the patch: recovers per-patch means in raster order
    params["patch.w"] = T.constant(np.ones((14 * 14, cfg.d_ie)))
    params["patch.b"] = T.zeros((cfg.d_ie,))
    tile = np.zeros((28, 28, 1))
    tile[0:14, 14:28] = 1.0  # top-right patch only
    out = enc.patchify(T.constant(tile[None]), params, cfg).data[0]
    sums = out[:, 0]
    npt.assert_allclose(sums, [0.0, 196.0, 0.0, 0.0], atol=1e-12)


def test_rope_identity_at_origin():
    cfg = tiny_cfg()
    tabs = enc.rope_tables(cfg)
    x = T.Rng(2).normal((1, 2, cfg.n_patches, cfg.head_dim))
    out = enc.apply_rope_2d(T.constant(x), tabs).data
    npt.assert_allclose(out[:, :, 0], x[:, :, 0], atol=1e-15)


def test_rope_preserves_pair_norms():
    cfg = tiny_cfg(d_ie=32, n_heads=2)  # head_dim 16
    tabs = enc.rope_tables(cfg)
    x = T.Rng(3).normal((1, 2, cfg.n_patches, cfg.head_dim))
    out = enc.apply_rope_2d(T.constant(x), tabs).data
    pairs_in = x.reshape(1, 2, cfg.n_patches, -1, 2)
    pairs_out = out.reshape(1, 2, cfg.n_patches, -1, 2)
    npt.assert_allclose(np.linalg.norm(pairs_out, axis=-1),
                        np.linalg.norm(pairs_in, axis=-1), atol=1e-12)


def test_rope_relative_position_property():
    # dot(q(r,c), k(r',c')) depends only on (r-r', c-c') for fixed content
    cfg = enc.EncoderConfig(d_ie=16, n_layers=1, n_heads=2, patch_p=8,
                            tile_h=24, tile_w=24, variant="baseline", d_te=8)
    tabs = enc.rope_tables(cfg)  # 3x3 grid
    hd = cfg.head_dim
    q_content = T.Rng(4).normal((hd,))
    k_content = T.Rng(5).normal((hd,))
    q = enc.apply_rope_2d(T.constant(np.tile(q_content, (1, 1, 9, 1))), tabs).data[0, 0]
    k = enc.apply_rope_2d(T.constant(np.tile(k_content, (1, 1, 9, 1))), tabs).data[0, 0]
    dots = {}
    for qi in range(9):
        for ki in range(9):
            delta = (qi // 3 - ki // 3, qi % 3 - ki % 3)
            val = float(q[qi] @ k[ki])
            if delta in dots:
                assert abs(val - dots[delta]) <= 1e-10
            else:
                dots[delta] = val


def test_rope_requires_head_dim_multiple_of_4():
    cfg = tiny_cfg(d_ie=12, n_heads=2)  # head_dim 6: even but not /4
    with pytest.raises(ValueError):
        enc.rope_tables(cfg)


def test_empty_text_equals_baseline_bitwise():
    base_cfg = tiny_cfg(variant="baseline")
    tie_cfg = tiny_cfg(variant="tie-default")
    base = enc.init_encoder_params(base_cfg, T.Rng(7))
    tie_params = enc.init_encoder_params(tie_cfg, T.Rng(7))
    for k in base:  # share the ViT body weights
        tie_params[k] = base[k]
    tile, _ = make_inputs(base_cfg)
    from tie.text import empty_conditioning
    a = enc.encode(base, base_cfg, tile, empty_conditioning(base_cfg.d_te))
    b = enc.encode(tie_params, tie_cfg, tile, empty_conditioning(tie_cfg.d_te))
    assert a.data.tobytes() == b.data.tobytes()


def test_baseline_rejects_text():
    cfg = tiny_cfg(variant="baseline")
    params = enc.init_encoder_params(cfg, T.Rng(7))
    tile, emb = make_inputs(cfg, l_txt=3)
    with pytest.raises(ValueError):
        enc.encode_batch(params, cfg, T.constant(tile[None]), T.constant(emb[None]))


def test_text_tokens_only_see_ffn():
    # perturb the image: text activations at every layer must be unchanged
    cfg = tiny_cfg()
    params = enc.init_encoder_params(cfg, T.Rng(8))
    tile, emb = make_inputs(cfg, l_txt=3)
    trace_a, trace_b = [], []
    enc.encode_batch(params, cfg, T.constant(tile[None]), T.constant(emb[None]),
                     txt_trace=trace_a)
    tile2 = tile.copy()
    tile2[5, 5, 0] = min(1.0, tile2[5, 5, 0] + 0.5)
    enc.encode_batch(params, cfg, T.constant(tile2[None]), T.constant(emb[None]),
                     txt_trace=trace_b)
    assert len(trace_a) == cfg.n_layers
    for a, b in zip(trace_a, trace_b):
        assert a.data.tobytes() == b.data.tobytes()  # 0 ulp


def test_text_isolation_by_autodiff():
    # gradient of text-path activations w.r.t. pixels is exactly zero
    cfg = tiny_cfg()
    params = enc.init_encoder_params(cfg, T.Rng(8))
    tile, emb = make_inputs(cfg, l_txt=3)
    pixels = T.Tensor(tile[None], requires_grad=True)
    trace = []
    enc.encode_batch(params, cfg, pixels, T.constant(emb[None]), txt_trace=trace)
    loss = T.tsum(T.concat([T.reshape(t, (-1,)) for t in trace], axis=0))
    T.backward(loss)
    assert pixels.grad is None or not pixels.grad.any()


def test_attention_rows_and_shape():
    cfg = tiny_cfg()
    params = enc.init_encoder_params(cfg, T.Rng(9))
    tile, emb = make_inputs(cfg, l_txt=3)
    from tie.text import TextConditioning, PROVIDER_EXTERNAL
    cond = TextConditioning([1, 2, 3], T.constant(emb), PROVIDER_EXTERNAL)
    rec = enc.record_attention(params, cfg, tile, cond)
    assert rec.n_layers == cfg.n_layers and rec.n_heads == cfg.n_heads
    for w in rec.weights:
        assert w.shape == (cfg.n_heads, cfg.n_patches, cfg.n_patches + 3)
        npt.assert_allclose(w.sum(axis=-1), np.ones((cfg.n_heads, cfg.n_patches)),
                            atol=1e-6)


def test_recording_does_not_change_outputs():
    cfg = tiny_cfg()
    params = enc.init_encoder_params(cfg, T.Rng(10))
    tile, emb = make_inputs(cfg, l_txt=2)
    embt = T.constant(emb[None])
    a = enc.encode_batch(params, cfg, T.constant(tile[None]), embt)
    sink = []
    b = enc.encode_batch(params, cfg, T.constant(tile[None]), embt, record_to=sink)
    assert a.data.tobytes() == b.data.tobytes()
    assert len(sink) == cfg.n_layers


def test_two_queries_give_different_outputs():
    cfg = tiny_cfg()
    params = enc.init_encoder_params(cfg, T.Rng(11))
    tile, _ = make_inputs(cfg)
    e1 = T.Rng(12).normal((1, 3, cfg.d_te))
    e2 = T.Rng(13).normal((1, 3, cfg.d_te))
    a = enc.encode_batch(params, cfg, T.constant(tile[None]), T.constant(e1))
    b = enc.encode_batch(params, cfg, T.constant(tile[None]), T.constant(e2))
    assert np.abs(a.data - b.data).max() > 1e-6


def test_t5_same_differs_from_default_after_two_layers():
    tile = T.Rng(14).uniform((28, 28, 3))
    emb = T.Rng(15).normal((1, 3, 8))
    outs = {}
    for variant in ("tie-default", "t5-same"):
        cfg = tiny_cfg(variant=variant)
        params = enc.init_encoder_params(cfg, T.Rng(16))
        outs[variant] = enc.encode_batch(params, cfg, T.constant(tile[None]),
                                         T.constant(emb)).data
    assert np.abs(outs["tie-default"] - outs["t5-same"]).max() > 1e-9


def test_parameter_count_relations():
    base = enc.init_encoder_params(tiny_cfg(variant="baseline"), T.Rng(17))
    tie_p = enc.init_encoder_params(tiny_cfg(variant="tie-default"), T.Rng(17))
    t5 = enc.init_encoder_params(tiny_cfg(variant="t5-same"), T.Rng(17))
    cross = enc.init_encoder_params(tiny_cfg(variant="cross-encoder"), T.Rng(17))
    cfg = tiny_cfg()
    adapter = cfg.d_te * cfg.d_ie + cfg.d_ie
    assert enc.param_count(tie_p) == enc.param_count(base) + adapter
    assert enc.param_count(t5) == enc.param_count(tie_p)
    assert enc.param_count(cross) > enc.param_count(tie_p)


def test_default_config_cross_encoder_overhead_window():
    tie_p = enc.init_encoder_params(enc.EncoderConfig(variant="tie-default"), T.Rng(18))
    cross = enc.init_encoder_params(enc.EncoderConfig(variant="cross-encoder"), T.Rng(18))
    ratio = enc.param_count(cross) / enc.param_count(tie_p)
    assert 1.2 <= ratio <= 1.45


def test_batched_tiles_match_separate_encoding():
    cfg = tiny_cfg()
    params = enc.init_encoder_params(cfg, T.Rng(19))
    rng = T.Rng(20)
    tiles = [rng.uniform((28, 28, 3)) for _ in range(2)]
    from tie.text import TextConditioning, PROVIDER_EXTERNAL
    cond = TextConditioning([1, 2], T.constant(rng.normal((2, cfg.d_te))), PROVIDER_EXTERNAL)
    both = enc.encode_tiles(params, cfg, tiles, cond)
    solo = [enc.encode(params, cfg, t, cond) for t in tiles]
    for a, b in zip(both, solo):
        assert a.data.tobytes() == b.data.tobytes()


def test_tile_independence_under_perturbation():
    cfg = tiny_cfg()
    params = enc.init_encoder_params(cfg, T.Rng(21))
    rng = T.Rng(22)
    tiles = [rng.uniform((28, 28, 3)) for _ in range(2)]
    from tie.text import empty_conditioning
    cond = empty_conditioning(cfg.d_te)
    cfg_b = tiny_cfg(variant="baseline")
    before = enc.encode_tiles(params, cfg_b, tiles, cond)
    tiles2 = [tiles[0].copy(), tiles[1]]
    tiles2[0][3, 3, 1] = 0.0
    after = enc.encode_tiles(params, cfg_b, tiles2, cond)
    assert after[1].data.tobytes() == before[1].data.tobytes()
    assert after[0].data.tobytes() != before[0].data.tobytes()


def test_encoder_grad_check():
    cfg = tiny_cfg()
    params = enc.init_encoder_params(cfg, T.Rng(23))
    tile, emb = make_inputs(cfg, l_txt=3, seed=24)
    proj = T.Rng(25).normal((1, cfg.n_patches, cfg.d_ie))
    tiles = T.constant(tile[None])
    embt = T.constant(emb[None])
    rope = enc.rope_tables(cfg)

    def f():
        out = enc.encode_batch(params, cfg, tiles, embt, rope=rope)
        return T.tsum(T.mul(out, T.constant(proj)))

    picked = {k: params[k] for k in
              ["patch.w", "adapter.w", "l0.qkv.w", "l0.ffn1.w", "l1.attn_out.w",
               "l1.ffn2.w", "lnf.g", "l0.ln1.b"]}
    assert grad_check(f, picked, rng=T.Rng(26), max_coords_per_param=8) <= 1e-6
