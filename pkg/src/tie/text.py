"""Query-side conditioning: vocabulary, tokenizer, prompt templates, and the
frozen providers that turn token ids into embedding sequences.

Providers never receive gradient: their outputs enter the encoder as
constants and only the encoder-side adapter is trainable.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T

UNK_ID = 0
PAD_ID = 1
EOS_ID = 2

INSTRUCTION = "Answer the following question about the given image:"
GENERIC_PROMPT = "Answer the question about the given image: Summarize the details in the image"
DUMMY_TOKEN = "a"

PROVIDER_EXTERNAL = "external-contextual"
PROVIDER_VLM = "vlm-noncontextual"
PROVIDER_NONE = "none"

# Closed vocabulary: reserved ids, prompt/template words, scene labels,
# digits, and filler so the decoder vocab lands near 64 entries.
_WORDS = [
    "<unk>", "<pad>", "<eos>",
    "answer", "the", "following", "question", "about", "given", "image",
    "summarize", "details", "in",
    "what", "glyph", "color", "at", "row", "col",
    "plus", "ring", "slash", "dots", "bars", "tee", "corner", "zig",
    "red", "green", "blue", "yellow",
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    "a", "cat", "dog",
    ":", "?", ".", ",",
    "is", "shown", "of", "this", "scene", "grid", "cell", "shape",
    "tile", "on", "to", "and", "or", "not", "yes", "no",
]


class Vocab:
    def __init__(self, words):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self):
        return len(self.words)

    def id_of(self, word):
        return self.index.get(word, UNK_ID)

    def word_of(self, idx):
        return self.words[idx]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for w in self.words:
                f.write(w + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def default_vocab():
    return Vocab(_WORDS)


def tokenize(text, vocab, max_len=64):
    """Lowercased whitespace+punctuation tokenization against `vocab`.

    Unknown words map to UNK; output is truncated from the right at
    `max_len` (a desk-scale cap, not a modeling claim).
    """
    ids = []
    for raw in text.lower().split():
        word = ""
        for ch in raw:
            if ch.isalnum():
                word += ch
            else:
                if word:
                    ids.append(vocab.id_of(word))
                    word = ""
                ids.append(vocab.id_of(ch))
        if word:
            ids.append(vocab.id_of(word))
    return ids[:max_len]


@dataclass
class PromptTemplate:
    instruction: str = INSTRUCTION
    query: str = ""
    mode: str = "instruction+query"  # | query-only | instruction-only | generic | dummy


def render_prompt(template, vocab, dummy_token=DUMMY_TOKEN):
    """Render the encoder-side conditioning text for a prompt mode."""
    mode = template.mode
    if mode == "instruction+query":
        return f"{template.instruction} {template.query}"
    if mode == "query-only":
        return template.query
    if mode == "instruction-only":
        return template.instruction
    if mode == "generic":
        return GENERIC_PROMPT
    if mode == "dummy":
        n = len(tokenize(template.query, vocab))
        if n == 0:
            raise ValueError("dummy mode requires the original query for its token count")
        return template.instruction + " " + " ".join([dummy_token] * n)
    raise ValueError(f"unknown prompt mode {mode!r}")


@dataclass
class TextConditioning:
    tokens: list
    embeddings: T.Tensor  # (L_txt, d_te), constant
    provider: str
    frozen: bool = True

    def __post_init__(self):
        if (len(self.tokens) == 0) != (self.provider == PROVIDER_NONE):
            raise ValueError("empty conditioning iff provider is none")

    @property
    def length(self):
        return len(self.tokens)


def empty_conditioning(d_te):
    return TextConditioning([], T.zeros((0, d_te)), PROVIDER_NONE)


def _sin_positions(n, d):
    pos = np.arange(n)[:, None].astype(np.float64)
    i = np.arange(d // 2)[None, :].astype(np.float64)
    ang = pos / np.power(10000.0, 2.0 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


class ExternalTextEncoder:
    """Frozen stand-in for a pretrained contextual text encoder.

    A 2-layer, 2-head bidirectional transformer with sinusoidal positions,
    generated once from a fixed seed. Contextual on purpose: reordering the
    input tokens changes every output embedding.
    """

    N_LAYERS = 2
    N_HEADS = 2

    def __init__(self, vocab_size, d_te=32, seed=314159):
        self.vocab_size = vocab_size
        self.d_te = d_te
        self.seed = seed
        rng = T.Rng(seed).stream("external-text-encoder")
        d = d_te
        p = {"emb": rng.normal((vocab_size, d), 1.0 / math.sqrt(d))}
        for i in range(self.N_LAYERS):
            p[f"l{i}.ln1.g"] = np.ones(d)
            p[f"l{i}.ln1.b"] = np.zeros(d)
            p[f"l{i}.qkv.w"] = rng.normal((d, 3 * d), 1.0 / math.sqrt(d))
            p[f"l{i}.qkv.b"] = np.zeros(3 * d)
            p[f"l{i}.out.w"] = rng.normal((d, d), 1.0 / math.sqrt(d))
            p[f"l{i}.out.b"] = np.zeros(d)
            p[f"l{i}.ln2.g"] = np.ones(d)
            p[f"l{i}.ln2.b"] = np.zeros(d)
            p[f"l{i}.ffn1.w"] = rng.normal((d, 4 * d), 1.0 / math.sqrt(d))
            p[f"l{i}.ffn1.b"] = np.zeros(4 * d)
            p[f"l{i}.ffn2.w"] = rng.normal((4 * d, d), 1.0 / math.sqrt(4 * d))
            p[f"l{i}.ffn2.b"] = np.zeros(d)
        p["lnf.g"] = np.ones(d)
        p["lnf.b"] = np.zeros(d)
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in p.items()}

    def _ln(self, x, g, b, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps) * g + b

    def encode(self, tokens):
        if len(tokens) == 0:
            raise ValueError("external encoder requires a non-empty token list")
        p = self.params
        d, h = self.d_te, self.N_HEADS
        hd = d // h
        x = p["emb"][np.asarray(tokens)] + _sin_positions(len(tokens), d)
        n = x.shape[0]
        for i in range(self.N_LAYERS):
            y = self._ln(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])
            qkv = y @ p[f"l{i}.qkv.w"] + p[f"l{i}.qkv.b"]
            q, k, v = [a.reshape(n, h, hd).transpose(1, 0, 2) for a in np.split(qkv, 3, axis=-1)]
            att = q @ k.transpose(0, 2, 1) / math.sqrt(hd)
            att = np.exp(att - att.max(axis=-1, keepdims=True))
            att = att / att.sum(axis=-1, keepdims=True)
            ctx = (att @ v).transpose(1, 0, 2).reshape(n, d)
            x = x + ctx @ p[f"l{i}.out.w"] + p[f"l{i}.out.b"]
            y = self._ln(x, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
            hmid = y @ p[f"l{i}.ffn1.w"] + p[f"l{i}.ffn1.b"]
            hmid = hmid * 0.5 * (1.0 + np.tanh(0.7978845608028654 * (hmid + 0.044715 * hmid ** 3)))
            x = x + hmid @ p[f"l{i}.ffn2.w"] + p[f"l{i}.ffn2.b"]
        x = self._ln(x, p["lnf.g"], p["lnf.b"])
        return TextConditioning(list(tokens), T.constant(x), PROVIDER_EXTERNAL)


class VlmEmbeddingProvider:
    """Non-contextual provider: frozen rows of the decoder's input embedding
    table, plus a fixed linear map when the widths differ."""

    def __init__(self, embedding_table, d_te, seed=271828):
        self.table = np.asarray(embedding_table, dtype=np.float64)
        self.d_te = d_te
        d_llm = self.table.shape[1]
        if d_llm != d_te:
            rng = T.Rng(seed).stream("vlm-provider-map")
            self.width_map = rng.normal((d_llm, d_te), 1.0 / math.sqrt(d_llm)).astype(np.float64)
        else:
            self.width_map = None

    @property
    def params(self):
        out = {"table": self.table}
        if self.width_map is not None:
            out["width_map"] = self.width_map
        return out

    def encode(self, tokens):
        ids = np.asarray(tokens)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.shape[0]):
            raise IndexError("token id outside embedding table")
        rows = self.table[ids] if ids.size else np.zeros((0, self.table.shape[1]))
        if self.width_map is not None:
            rows = rows @ self.width_map
        return TextConditioning(list(tokens), T.constant(rows), PROVIDER_VLM)
