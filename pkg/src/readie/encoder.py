"""Whitespace tokenization, the reserved-token vocabulary, and a small
bidirectional transformer encoder.

One word maps to one token, so word and token indices coincide. The
vocabulary reserves PAD, UNK, a separator token, and a contiguous block of
candidate-marker tokens ``<ST_0> .. <ST_max>`` whose hidden states stand in
for the retrieved candidates inside the prediction heads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterStore, truncated_normal

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
SEP_TOKEN = "[SEP]"

ATTENTION_MASK_BIAS = -1e9  # finite, but exp() underflows to exactly 0


@dataclass
class Tokenization:
    ids: list[int]
    word_offsets: list[int]  # token index -> word index (identity at one word per token)


class Vocabulary:
    """Dense word->id map with a reserved special-token block.

    Layout: 0=PAD, 1=UNK, 2=[SEP], 3..3+num_st-1 the candidate markers,
    then corpus words in insertion order.
    """

    def __init__(self, num_st: int):
        if num_st < 1:
            raise ValueError("need at least one candidate-marker token")
        self.num_st = num_st
        self._tokens: list[str] = [PAD_TOKEN, UNK_TOKEN, SEP_TOKEN]
        self._tokens += [f"<ST_{i}>" for i in range(num_st)]
        self._ids: dict[str, int] = {t: i for i, t in enumerate(self._tokens)}

    pad_id = 0
    unk_id = 1
    sep_id = 2

    @property
    def st_base(self) -> int:
        return 3

    def st_id(self, i: int) -> int:
        if not 0 <= i < self.num_st:
            raise ValueError(f"candidate marker {i} outside reserved block of {self.num_st}")
        return self.st_base + i

    def add_word(self, word: str) -> int:
        if word not in self._ids:
            self._ids[word] = len(self._tokens)
            self._tokens.append(word)
        return self._ids[word]

    def add_words(self, words) -> None:
        for w in words:
            self.add_word(w)

    def id_of(self, word: str) -> int:
        return self._ids.get(word, self.unk_id)

    def __len__(self) -> int:
        return len(self._tokens)

    def tokens(self) -> list[str]:
        return list(self._tokens)

    def tokenize(self, text: str) -> Tokenization:
        """Whitespace-split ``text``; unknown words map to UNK."""
        words = text.split()
        ids = [self.id_of(w) for w in words]
        return Tokenization(ids=ids, word_offsets=list(range(len(words))))

    def encode_words(self, words) -> list[int]:
        return [self.id_of(w) for w in words]

    def save(self, path: str | Path) -> None:
        manifest = {
            "num_st": self.num_st,
            "pad_id": self.pad_id,
            "unk_id": self.unk_id,
            "sep_id": self.sep_id,
            "st_base": self.st_base,
            "size": len(self._tokens),
        }
        lines = [json.dumps(manifest, sort_keys=True)] + self._tokens
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        manifest = json.loads(lines[0])
        vocab = cls(manifest["num_st"])
        tokens = lines[1:]
        if len(tokens) != manifest["size"]:
            raise ValueError(f"vocabulary file corrupt: {len(tokens)} tokens, manifest says {manifest['size']}")
        reserved = 3 + manifest["num_st"]
        if tokens[:reserved] != vocab._tokens:
            raise ValueError("reserved-token block does not match manifest")
        for w in tokens[reserved:]:
            vocab.add_word(w)
        return vocab


@dataclass
class EncoderConfig:
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_multiplier: int = 4
    max_seq_len: int = 512
    vocab_size: int = 0  # filled when params are created

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ValueError("hidden_size must be divisible by num_heads")

    def to_dict(self) -> dict:
        return {
            "hidden_size": self.hidden_size,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "ffn_multiplier": self.ffn_multiplier,
            "max_seq_len": self.max_seq_len,
            "vocab_size": self.vocab_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


class TransformerEncoder:
    """Post-norm bidirectional transformer over token + learned position embeddings.

    Parameters live in the shared store under ``prefix``. ``forward_count``
    tracks how many sequences have been encoded, which the single-pass
    guarantees are asserted against.
    """

    def __init__(self, store: ParameterStore, config: EncoderConfig, rng: np.random.Generator,
                 prefix: str = "enc.", dtype=np.float64):
        if config.vocab_size <= 0:
            raise ValueError("config.vocab_size must be set before building the encoder")
        self.store = store
        self.config = config
        self.prefix = prefix
        self.forward_count = 0
        H = config.hidden_size
        F = H * config.ffn_multiplier

        def w(name, shape):
            store.create(prefix + name, truncated_normal(rng, shape, dtype=dtype))

        def zeros(name, shape):
            store.create(prefix + name, np.zeros(shape, dtype=dtype))

        def ones(name, shape):
            store.create(prefix + name, np.ones(shape, dtype=dtype))

        w("tok_emb", (config.vocab_size, H))
        w("pos_emb", (config.max_seq_len, H))
        ones("emb_ln_g", (H,))
        zeros("emb_ln_b", (H,))
        for i in range(config.num_layers):
            for part in ("q", "k", "v", "o"):
                w(f"layer{i}.attn_{part}_w", (H, H))
                zeros(f"layer{i}.attn_{part}_b", (H,))
            ones(f"layer{i}.ln1_g", (H,))
            zeros(f"layer{i}.ln1_b", (H,))
            w(f"layer{i}.ffn_w1", (H, F))
            zeros(f"layer{i}.ffn_b1", (F,))
            w(f"layer{i}.ffn_w2", (F, H))
            zeros(f"layer{i}.ffn_b2", (H,))
            ones(f"layer{i}.ln2_g", (H,))
            zeros(f"layer{i}.ln2_b", (H,))

    def _p(self, name: str) -> Tensor:
        return self.store[self.prefix + name]

    def param_depth(self, name: str) -> int:
        """Depth from the output side: top layer 1, embeddings deepest."""
        if not name.startswith(self.prefix):
            return 0
        local = name[len(self.prefix):]
        if local.startswith("layer"):
            idx = int(local[5:].split(".")[0])
            return self.config.num_layers - idx
        return self.config.num_layers + 1

    def encode_batch(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """Encode a padded batch.

        ids: int array (B, L); mask: float array (B, L), 1 for real tokens.
        Returns hidden states (B, L, H). PAD columns are excluded from
        attention so padding never changes the states of real tokens.
        """
        ids = np.asarray(ids, dtype=np.int64)
        mask = np.asarray(mask)
        B, L = ids.shape
        cfg = self.config
        if L > cfg.max_seq_len:
            raise ValueError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
        self.forward_count += B
        H, nh = cfg.hidden_size, cfg.num_heads
        dh = H // nh

        x = ad.add(ad.embedding(self._p("tok_emb"), ids),
                   ad.embedding(self._p("pos_emb"), np.arange(L)))
        x = ad.layer_norm(x, self._p("emb_ln_g"), self._p("emb_ln_b"))

        # (B, 1, 1, L) additive bias: 0 on real tokens, large negative on PAD
        bias = ((1.0 - mask) * ATTENTION_MASK_BIAS).reshape(B, 1, 1, L)
        bias = bias.astype(x.data.dtype)
        scale = 1.0 / np.sqrt(dh)

        for i in range(cfg.num_layers):
            pre = f"layer{i}."
            q = ad.add(ad.matmul(x, self._p(pre + "attn_q_w")), self._p(pre + "attn_q_b"))
            k = ad.add(ad.matmul(x, self._p(pre + "attn_k_w")), self._p(pre + "attn_k_b"))
            v = ad.add(ad.matmul(x, self._p(pre + "attn_v_w")), self._p(pre + "attn_v_b"))
            q = ad.transpose(ad.reshape(q, (B, L, nh, dh)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(k, (B, L, nh, dh)), (0, 2, 1, 3))
            v = ad.transpose(ad.reshape(v, (B, L, nh, dh)), (0, 2, 1, 3))
            scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale)
            scores = ad.add(scores, Tensor(bias))
            attn = ad.softmax(scores, axis=-1)
            ctx = ad.matmul(attn, v)
            ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, L, H))
            ctx = ad.add(ad.matmul(ctx, self._p(pre + "attn_o_w")), self._p(pre + "attn_o_b"))
            x = ad.layer_norm(ad.add(x, ctx), self._p(pre + "ln1_g"), self._p(pre + "ln1_b"))
            h = ad.gelu(ad.add(ad.matmul(x, self._p(pre + "ffn_w1")), self._p(pre + "ffn_b1")))
            h = ad.add(ad.matmul(h, self._p(pre + "ffn_w2")), self._p(pre + "ffn_b2"))
            x = ad.layer_norm(ad.add(x, h), self._p(pre + "ln2_g"), self._p(pre + "ln2_b"))
        return x

    def encode(self, ids) -> Tensor:
        """Encode a single unpadded sequence; returns (l, H)."""
        ids = np.asarray(ids, dtype=np.int64)
        x = self.encode_batch(ids.reshape(1, -1), np.ones((1, len(ids))))
        return ad.getitem(x, 0)


def pool_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of unmasked rows. x: (B, L, H) or (L, H); mask matches leading dims."""
    mask = np.asarray(mask, dtype=x.data.dtype)
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise ValueError("pooling requires at least one unmasked position")
    weights = (mask / counts[..., None])[..., None]  # (..., L, 1)
    return ad.tensor_sum(ad.mul(x, Tensor(weights)), axis=-2)
