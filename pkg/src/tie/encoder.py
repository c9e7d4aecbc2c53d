"""Query-conditioned vision transformer.

Image patches attend to frozen text embeddings appended as extra keys at
every layer; the text tokens never attend back and are never rotated by
position. With no text the blocks reduce to a plain ViT, bit-for-bit.

Variants:
  tie-default   text keys visible to image queries; text evolves via FFN
  t5-same       text reset to the adapter-mapped provider output each layer
  cross-encoder separate cross-attention stage; self-attention is image-only
  baseline      no text path at all
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("tie-default", "t5-same", "cross-encoder", "baseline")


@dataclass
class EncoderConfig:
    d_ie: int = 32
    n_layers: int = 3
    n_heads: int = 4
    patch_p: int = 8
    tile_h: int = 32
    tile_w: int = 32
    channels: int = 3
    variant: str = "tie-default"
    d_te: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.d_ie % self.n_heads:
            raise ValueError("d_ie must be divisible by n_heads")
        if self.tile_h % self.patch_p or self.tile_w % self.patch_p:
            raise ValueError("patch size must divide tile dims")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for rotary pairing")

    @property
    def head_dim(self):
        return self.d_ie // self.n_heads

    @property
    def grid_h(self):
        return self.tile_h // self.patch_p

    @property
    def grid_w(self):
        return self.tile_w // self.patch_p

    @property
    def n_patches(self):
        return self.grid_h * self.grid_w


@dataclass
class AttentionRecord:
    """Per (layer, head) image-query attention weights, N_IE x (N_IE+L_txt)."""
    weights: list  # list over layers of (heads, N_IE, N_IE + L_txt) arrays
    grid_h: int
    grid_w: int
    l_txt: int

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def n_heads(self):
        return self.weights[0].shape[0] if self.weights else 0


def init_encoder_params(cfg, rng):
    """Fresh parameter dict. Baseline carries no text adapter; the
    cross-encoder variant adds per-layer cross-attention blocks."""
    d = cfg.d_ie
    r = rng.stream("encoder")
    p = {}
    pdim = cfg.patch_p * cfg.patch_p * cfg.channels
    p["patch.w"] = T.parameter(r.stream("patch"), (pdim, d))
    p["patch.b"] = T.zeros((d,), requires_grad=True)
    if cfg.variant != "baseline":
        p["adapter.w"] = T.parameter(r.stream("adapter"), (cfg.d_te, d))
        p["adapter.b"] = T.zeros((d,), requires_grad=True)
    for i in range(cfg.n_layers):
        s = r.stream(f"layer{i}")
        p[f"l{i}.ln1.g"] = T.ones((d,), requires_grad=True)
        p[f"l{i}.ln1.b"] = T.zeros((d,), requires_grad=True)
        p[f"l{i}.qkv.w"] = T.parameter(s.stream("qkv"), (d, 3 * d))
        p[f"l{i}.qkv.b"] = T.zeros((3 * d,), requires_grad=True)
        p[f"l{i}.attn_out.w"] = T.parameter(s.stream("out"), (d, d))
        p[f"l{i}.attn_out.b"] = T.zeros((d,), requires_grad=True)
        if cfg.variant == "cross-encoder":
            p[f"l{i}.lnx.g"] = T.ones((d,), requires_grad=True)
            p[f"l{i}.lnx.b"] = T.zeros((d,), requires_grad=True)
            p[f"l{i}.xq.w"] = T.parameter(s.stream("xq"), (d, d))
            p[f"l{i}.xq.b"] = T.zeros((d,), requires_grad=True)
            p[f"l{i}.xk.w"] = T.parameter(s.stream("xk"), (d, d))
            p[f"l{i}.xk.b"] = T.zeros((d,), requires_grad=True)
            p[f"l{i}.xv.w"] = T.parameter(s.stream("xv"), (d, d))
            p[f"l{i}.xv.b"] = T.zeros((d,), requires_grad=True)
            p[f"l{i}.xout.w"] = T.parameter(s.stream("xout"), (d, d))
            p[f"l{i}.xout.b"] = T.zeros((d,), requires_grad=True)
        p[f"l{i}.ln2.g"] = T.ones((d,), requires_grad=True)
        p[f"l{i}.ln2.b"] = T.zeros((d,), requires_grad=True)
        p[f"l{i}.ffn1.w"] = T.parameter(s.stream("ffn1"), (d, 4 * d))
        p[f"l{i}.ffn1.b"] = T.zeros((4 * d,), requires_grad=True)
        p[f"l{i}.ffn2.w"] = T.parameter(s.stream("ffn2"), (4 * d, d))
        p[f"l{i}.ffn2.b"] = T.zeros((d,), requires_grad=True)
    p["lnf.g"] = T.ones((d,), requires_grad=True)
    p["lnf.b"] = T.zeros((d,), requires_grad=True)
    return p


def param_count(params):
    return sum(t.size for t in params.values())


def patchify(tile, params, cfg):
    """Non-overlapping PxP convolution as unfold + linear. `tile` is a
    Tensor (..., h, w, c); returns (..., n_patches, d_ie) in raster order."""
    lead = tile.shape[:-3]
    h, w, c = tile.shape[-3:]
    if (h, w, c) != (cfg.tile_h, cfg.tile_w, cfg.channels):
        raise ValueError(f"tile shape {(h, w, c)} does not match config")
    gh, gw, pp = cfg.grid_h, cfg.grid_w, cfg.patch_p
    x = T.reshape(tile, lead + (gh, pp, gw, pp, c))
    nl = len(lead)
    x = T.permute(x, tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
    x = T.reshape(x, lead + (gh * gw, pp * pp * c))
    return T.add(T.matmul(x, params["patch.w"]), params["patch.b"])


def rope_tables(cfg):
    """Axial 2D rotary tables: first half of each head rotates by row index,
    second half by column index; base frequency 10000."""
    hd = cfg.head_dim
    if hd % 4:
        raise ValueError("head_dim must be divisible by 4 for axial rotary pairs")
    half = hd // 2
    n_freq = half // 2
    freqs = 10000.0 ** (-2.0 * np.arange(n_freq) / half)
    rows = np.repeat(np.arange(cfg.grid_h), cfg.grid_w).astype(np.float64)
    cols = np.tile(np.arange(cfg.grid_w), cfg.grid_h).astype(np.float64)
    ang_r = rows[:, None] * freqs[None, :]
    ang_c = cols[:, None] * freqs[None, :]
    return {
        "cos_r": T.constant(np.cos(ang_r)), "sin_r": T.constant(np.sin(ang_r)),
        "cos_c": T.constant(np.cos(ang_c)), "sin_c": T.constant(np.sin(ang_c)),
    }


def _rotate(x, cos, sin):
    # x: (..., n, half) grouped as adjacent pairs; cos/sin: (n, half/2)
    lead = x.shape[:-1]
    half = x.shape[-1]
    xp = T.reshape(x, lead + (half // 2, 2))
    a = T.reshape(T.narrow(xp, len(lead) + 1, 0, 1), lead + (half // 2,))
    b = T.reshape(T.narrow(xp, len(lead) + 1, 1, 1), lead + (half // 2,))
    ra = T.sub(T.mul(a, cos), T.mul(b, sin))
    rb = T.add(T.mul(a, sin), T.mul(b, cos))
    ra = T.reshape(ra, lead + (half // 2, 1))
    rb = T.reshape(rb, lead + (half // 2, 1))
    return T.reshape(T.concat([ra, rb], axis=-1), lead + (half,))


def apply_rope_2d(x, tables):
    """Rotate image-token q/k by their 2D grid position. x: (..., n, head_dim).
    Never applied to text keys: provider embeddings carry their own positions."""
    hd = x.shape[-1]
    if hd % 4:
        raise ValueError("head_dim must be divisible by 4 for axial rotary pairs")
    half = hd // 2
    row_part = _rotate(T.narrow(x, x.ndim - 1, 0, half), tables["cos_r"], tables["sin_r"])
    col_part = _rotate(T.narrow(x, x.ndim - 1, half, half), tables["cos_c"], tables["sin_c"])
    return T.concat([row_part, col_part], axis=-1)


def _split_heads(x, n_heads):
    # (B, S, d) -> (B, H, S, hd)
    b, s, d = x.shape
    return T.permute(T.reshape(x, (b, s, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, s, hd = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (b, s, h * hd))


def _linear(x, params, name):
    return T.add(T.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def tie_block(params, cfg, layer, x_img, x_txt, rope, record=None):
    """One encoder layer.

    Image queries attend over [image keys, text keys]; the text stream skips
    layernorm and attention entirely and is only advanced by the shared FFN.
    Returns (x_img, x_txt).
    """
    if cfg.variant == "baseline" and x_txt is not None:
        raise ValueError("baseline variant cannot take text tokens")
    li = f"l{layer}"
    b, n, d = x_img.shape
    h, hd = cfg.n_heads, cfg.head_dim

    y = T.layernorm(x_img, params[f"{li}.ln1.g"], params[f"{li}.ln1.b"])
    qkv = _linear(y, params, f"{li}.qkv")
    q = _split_heads(T.narrow(qkv, 2, 0, d), h)
    k = _split_heads(T.narrow(qkv, 2, d, d), h)
    v = _split_heads(T.narrow(qkv, 2, 2 * d, d), h)
    q = apply_rope_2d(q, rope)
    k = apply_rope_2d(k, rope)

    if x_txt is not None and cfg.variant != "cross-encoder":
        # text keys/values from the raw text stream, no rotation
        tqkv = _linear(x_txt, params, f"{li}.qkv")
        tk = _split_heads(T.narrow(tqkv, 2, d, d), h)
        tv = _split_heads(T.narrow(tqkv, 2, 2 * d, d), h)
        k = T.concat([k, tk], axis=2)
        v = T.concat([v, tv], axis=2)

    scores = T.mul(T.matmul(q, T.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    att = T.softmax_lastdim(scores)
    if record is not None:
        record.append(att.data.copy())
    ctx = _merge_heads(T.matmul(att, v))
    x_img = T.add(x_img, _linear(ctx, params, f"{li}.attn_out"))

    if cfg.variant == "cross-encoder" and x_txt is not None:
        yx = T.layernorm(x_img, params[f"{li}.lnx.g"], params[f"{li}.lnx.b"])
        xq = _split_heads(_linear(yx, params, f"{li}.xq"), h)
        xk = _split_heads(_linear(x_txt, params, f"{li}.xk"), h)
        xv = _split_heads(_linear(x_txt, params, f"{li}.xv"), h)
        xs = T.mul(T.matmul(xq, T.permute(xk, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        xatt = T.softmax_lastdim(xs)
        xctx = _merge_heads(T.matmul(xatt, xv))
        x_img = T.add(x_img, _linear(xctx, params, f"{li}.xout"))

    y2 = T.layernorm(x_img, params[f"{li}.ln2.g"], params[f"{li}.ln2.b"])
    x_img = T.add(x_img, _linear(T.gelu(_linear(y2, params, f"{li}.ffn1")), params, f"{li}.ffn2"))

    if x_txt is not None:
        ty2 = T.layernorm(x_txt, params[f"{li}.ln2.g"], params[f"{li}.ln2.b"])
        x_txt = T.add(x_txt, _linear(T.gelu(_linear(ty2, params, f"{li}.ffn1")), params, f"{li}.ffn2"))

    return x_img, x_txt


def encode_batch(params, cfg, tiles, cond_emb, rope=None, record_to=None,
                 txt_trace=None):
    """Encode a batch of tiles, all conditioned on per-example embeddings.

    tiles: Tensor (B, h, w, c); cond_emb: Tensor (B, L, d_te) or None.
    Returns the first n_patches rows per example, (B, n_patches, d_ie).
    `record_to` (a list) collects per-layer attention arrays; `txt_trace`
    collects the text-stream activations per layer for isolation probes.
    """
    if rope is None:
        rope = rope_tables(cfg)
    x_img = patchify(tiles, params, cfg)
    if cond_emb is not None and cond_emb.shape[1] > 0:
        if cfg.variant == "baseline":
            raise ValueError("baseline variant cannot take text conditioning")
        x_txt = T.add(T.matmul(cond_emb, params["adapter.w"]), params["adapter.b"])
    else:
        x_txt = None
    txt_initial = x_txt
    for i in range(cfg.n_layers):
        x_img, x_txt = tie_block(params, cfg, i, x_img, x_txt, rope, record_to)
        if txt_trace is not None and x_txt is not None:
            txt_trace.append(x_txt)
        if cfg.variant == "t5-same" and x_txt is not None:
            x_txt = txt_initial
    return T.layernorm(x_img, params["lnf.g"], params["lnf.b"])


def encode(params, cfg, tile, cond, rope=None):
    """Encode one tile (numpy (h, w, c)) under a TextConditioning."""
    if cfg.variant == "baseline" and cond.length > 0:
        raise ValueError("baseline variant requires empty conditioning")
    tiles = T.constant(tile[None])
    emb = None
    if cond.length > 0:
        emb = T.reshape(cond.embeddings, (1,) + cond.embeddings.shape)
    out = encode_batch(params, cfg, tiles, emb, rope=rope)
    return T.reshape(out, out.shape[1:])


def encode_tiles(params, cfg, tiles, cond, rope=None):
    """Encode several tiles independently (one encoder pass per tile, so
    patches across tiles can never interact)."""
    if rope is None:
        rope = rope_tables(cfg)
    return [encode(params, cfg, t, cond, rope=rope) for t in tiles]


def record_attention(params, cfg, tile, cond, rope=None):
    """Forward one tile and capture every layer/head attention matrix."""
    if cfg.variant == "baseline" and cond.length > 0:
        raise ValueError("baseline variant requires empty conditioning")
    layers = []
    tiles = T.constant(tile[None])
    emb = None
    if cond.length > 0:
        emb = T.reshape(cond.embeddings, (1,) + cond.embeddings.shape)
    encode_batch(params, cfg, tiles, emb, rope=rope, record_to=layers)
    l_seen = layers[0].shape[-1] - cfg.n_patches if layers else 0
    return AttentionRecord([w[0] for w in layers], cfg.grid_h, cfg.grid_w, l_seen)
