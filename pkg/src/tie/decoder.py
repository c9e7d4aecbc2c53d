"""Toy causal decoder: consumes [visual tokens; query tokens; answer] as one
strictly left-to-right sequence with 1D rotary positions, and scores answer
tokens with mean cross-entropy.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .text import EOS_ID


@dataclass
class DecoderConfig:
    d_llm: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 64
    max_seq: int = 128

    def __post_init__(self):
        if self.d_llm % self.n_heads:
            raise ValueError("d_llm must be divisible by n_heads")

    @property
    def head_dim(self):
        return self.d_llm // self.n_heads


def init_decoder_params(cfg, rng):
    d = cfg.d_llm
    r = rng.stream("decoder")
    p = {"emb": T.parameter(r.stream("emb"), (cfg.vocab_size, d), scale=1.0 / math.sqrt(d))}
    for i in range(cfg.n_layers):
        s = r.stream(f"layer{i}")
        p[f"l{i}.ln1.g"] = T.ones((d,), requires_grad=True)
        p[f"l{i}.ln1.b"] = T.zeros((d,), requires_grad=True)
        p[f"l{i}.qkv.w"] = T.parameter(s.stream("qkv"), (d, 3 * d))
        p[f"l{i}.qkv.b"] = T.zeros((3 * d,), requires_grad=True)
        p[f"l{i}.attn_out.w"] = T.parameter(s.stream("out"), (d, d))
        p[f"l{i}.attn_out.b"] = T.zeros((d,), requires_grad=True)
        p[f"l{i}.ln2.g"] = T.ones((d,), requires_grad=True)
        p[f"l{i}.ln2.b"] = T.zeros((d,), requires_grad=True)
        p[f"l{i}.ffn1.w"] = T.parameter(s.stream("ffn1"), (d, 4 * d))
        p[f"l{i}.ffn1.b"] = T.zeros((4 * d,), requires_grad=True)
        p[f"l{i}.ffn2.w"] = T.parameter(s.stream("ffn2"), (4 * d, d))
        p[f"l{i}.ffn2.b"] = T.zeros((d,), requires_grad=True)
    p["lnf.g"] = T.ones((d,), requires_grad=True)
    p["lnf.b"] = T.zeros((d,), requires_grad=True)
    p["head.w"] = T.parameter(r.stream("head"), (d, cfg.vocab_size))
    p["head.b"] = T.zeros((cfg.vocab_size,), requires_grad=True)
    return p


def _rope_1d(x, cos, sin):
    # x: (B, H, S, hd); adjacent-pair rotation by sequence position
    b, h, s, hd = x.shape
    xp = T.reshape(x, (b, h, s, hd // 2, 2))
    a = T.reshape(T.narrow(xp, 4, 0, 1), (b, h, s, hd // 2))
    bb = T.reshape(T.narrow(xp, 4, 1, 1), (b, h, s, hd // 2))
    ra = T.sub(T.mul(a, cos), T.mul(bb, sin))
    rb = T.add(T.mul(a, sin), T.mul(bb, cos))
    ra = T.reshape(ra, (b, h, s, hd // 2, 1))
    rb = T.reshape(rb, (b, h, s, hd // 2, 1))
    return T.reshape(T.concat([ra, rb], axis=-1), (b, h, s, hd))


def _rope_tables_1d(seq_len, head_dim):
    freqs = 10000.0 ** (-2.0 * np.arange(head_dim // 2) / head_dim)
    ang = np.arange(seq_len)[:, None] * freqs[None, :]
    return T.constant(np.cos(ang)), T.constant(np.sin(ang))


def _linear(x, params, name):
    return T.add(T.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def forward_hidden(params, cfg, seq):
    """Causal transformer over an embedded sequence (B, S, d_llm)."""
    b, s, d = seq.shape
    if s > cfg.max_seq:
        raise ValueError(f"sequence length {s} exceeds max_seq {cfg.max_seq}")
    h, hd = cfg.n_heads, cfg.head_dim
    cos, sin = _rope_tables_1d(s, hd)
    causal = np.triu(np.full((s, s), T.MASK_NEG), k=1)
    mask = T.constant(causal[None, None])
    x = seq
    for i in range(cfg.n_layers):
        li = f"l{i}"
        y = T.layernorm(x, params[f"{li}.ln1.g"], params[f"{li}.ln1.b"])
        qkv = _linear(y, params, f"{li}.qkv")
        q = T.permute(T.reshape(T.narrow(qkv, 2, 0, d), (b, s, h, hd)), (0, 2, 1, 3))
        k = T.permute(T.reshape(T.narrow(qkv, 2, d, d), (b, s, h, hd)), (0, 2, 1, 3))
        v = T.permute(T.reshape(T.narrow(qkv, 2, 2 * d, d), (b, s, h, hd)), (0, 2, 1, 3))
        q = _rope_1d(q, cos, sin)
        k = _rope_1d(k, cos, sin)
        scores = T.add(T.mul(T.matmul(q, T.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd)), mask)
        att = T.softmax_lastdim(scores)
        ctx = T.reshape(T.permute(T.matmul(att, v), (0, 2, 1, 3)), (b, s, d))
        x = T.add(x, _linear(ctx, params, f"{li}.attn_out"))
        y2 = T.layernorm(x, params[f"{li}.ln2.g"], params[f"{li}.ln2.b"])
        x = T.add(x, _linear(T.gelu(_linear(y2, params, f"{li}.ffn1")), params, f"{li}.ffn2"))
    return T.layernorm(x, params["lnf.g"], params["lnf.b"])


def decode_forward(params, cfg, visual, text_ids, answer_ids):
    """Teacher-forced logits for every answer position.

    visual: Tensor (B, Nv, d_llm); text_ids: (B, Tt) int array, uniform
    length; answer_ids: (B, Ta). Returns logits Tensor (B, Ta, vocab).
    """
    text_ids = np.asarray(text_ids)
    answer_ids = np.asarray(answer_ids)
    if answer_ids.ndim != 2 or answer_ids.shape[1] < 1:
        raise ValueError("answer must be non-empty")
    text_emb = T.gather_rows(params["emb"], text_ids)
    ans_emb = T.gather_rows(params["emb"], answer_ids)
    seq = T.concat([visual, text_emb, ans_emb], axis=1)
    hidden = forward_hidden(params, cfg, seq)
    prompt_len = visual.shape[1] + text_ids.shape[1]
    # the hidden state one step before each answer token predicts it
    pred = T.narrow(hidden, 1, prompt_len - 1, answer_ids.shape[1])
    return _linear(pred, params, "head")


def alignment_loss(logits, answer_ids):
    """Mean token-level negative log-likelihood over answer positions."""
    answer_ids = np.asarray(answer_ids)
    if answer_ids.size == 0:
        raise ValueError("empty answer")
    lse = T.logsumexp_lastdim(logits)
    correct = T.gather_lastdim(logits, answer_ids)
    return T.tmean(T.sub(lse, correct))


def generate(params, cfg, visual, text_ids, max_new, eos_id=EOS_ID):
    """Greedy decoding until EOS or `max_new` tokens."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    text_ids = np.asarray(text_ids).reshape(1, -1)
    if visual.ndim == 2:
        visual = T.reshape(visual, (1,) + visual.shape)
    out = []
    for _ in range(max_new):
        text_emb = T.gather_rows(params["emb"], text_ids)
        seq = T.concat([visual, text_emb], axis=1)
        hidden = forward_hidden(params, cfg, seq)
        last = T.narrow(hidden, 1, seq.shape[1] - 1, 1)
        logits = _linear(last, params, "head").data[0, 0]
        nxt = int(np.argmax(logits))
        if nxt == eos_id:
            break
        out.append(nxt)
        text_ids = np.concatenate([text_ids, [[nxt]]], axis=1)
    return out
