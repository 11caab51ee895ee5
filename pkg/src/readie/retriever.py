"""Bi-encoder retrieval over textual representations of entities and relations.

One shared transformer encodes queries (text windows) and passages; the
score is the raw dot product of the mean-pooled embeddings (no
normalization, no temperature). Training minimizes a multi-label NCE over
in-batch negatives plus periodically re-mined hard negatives, rebuilding
the flat index on the mining schedule.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, TransformerEncoder, Vocabulary, pool_mean
from .params import ParameterStore, load_snapshot, save_snapshot

INDEX_MAGIC = b"RDINDX"


@dataclass(frozen=True)
class Passage:
    """Textual representation of an entity or a relation type.

    ``text`` is what the retriever embeds (title plus opening text for
    entities); ``reader_text`` is the shorter form the reader consumes
    (entity title only). When absent, the reader falls back to ``text``.
    """

    id: str
    kind: str  # "entity" | "relation"
    text: str
    reader_text: str | None = None
    is_nme: bool = False

    def text_for_reader(self) -> str:
        return self.reader_text if self.reader_text is not None else self.text


def save_passages(path: str | Path, passages: list[Passage]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in passages:
            rec = {"id": p.id, "kind": p.kind, "text": p.text}
            if p.reader_text is not None:
                rec["reader_text"] = p.reader_text
            if p.is_nme:
                rec["is_nme"] = True
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_passages(path: str | Path) -> list[Passage]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(Passage(id=rec["id"], kind=rec["kind"], text=rec["text"],
                               reader_text=rec.get("reader_text"),
                               is_nme=bool(rec.get("is_nme", False))))
    ids = [p.id for p in out]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate passage ids in collection")
    return out


@dataclass(frozen=True)
class RetrievalExample:
    """One training/eval query: a window's text plus its gold passage ids."""

    query_id: str
    text: str
    gold_ids: tuple[str, ...]


def sim(q_emb: np.ndarray, p_emb: np.ndarray) -> float:
    """Raw dot-product similarity."""
    q = np.asarray(q_emb)
    p = np.asarray(p_emb)
    if q.shape != p.shape:
        raise ValueError(f"embedding dimensions disagree: {q.shape} vs {p.shape}")
    return float(q @ p)


class FlatIndex:
    """Exhaustive dot-product index: row i embeds the passage ids[i]."""

    def __init__(self, embeddings: np.ndarray, ids: list[str], encoder_hash: str = ""):
        if embeddings.ndim != 2 or embeddings.shape[0] != len(ids):
            raise ValueError("embedding matrix and id list disagree")
        self.embeddings = embeddings
        self.ids = list(ids)
        self.encoder_hash = encoder_hash

    def __len__(self) -> int:
        return len(self.ids)

    def search_vector(self, q_emb: np.ndarray, k: int) -> list[tuple[str, float]]:
        """Top-k (id, score), score descending, ties broken by ascending id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if len(self.ids) == 0:
            raise ValueError("index is empty")
        scores = self.embeddings @ np.asarray(q_emb)
        n = len(self.ids)
        k = min(k, n)
        if n > 2 * k and n > 64:
            # everything at or above the k-th score, so exact ties stay in play
            part = np.argpartition(-scores, k - 1)
            kth = scores[part[:k]].min()
            cand = np.flatnonzero(scores >= kth)
        else:
            cand = np.arange(n)
        order = sorted(cand.tolist(), key=lambda i: (-scores[i], self.ids[i]))[:k]
        return [(self.ids[i], float(scores[i])) for i in order]

    def save(self, path: str | Path) -> None:
        header = {
            "count": len(self.ids),
            "dim": int(self.embeddings.shape[1]),
            "dtype": self.embeddings.dtype.name,
            "encoder_hash": self.encoder_hash,
            "ids": self.ids,
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(INDEX_MAGIC)
            f.write(struct.pack("<I", len(hb)))
            f.write(hb)
            f.write(np.ascontiguousarray(
                self.embeddings, dtype=self.embeddings.dtype.newbyteorder("<")).tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "FlatIndex":
        blob = Path(path).read_bytes()
        if blob[: len(INDEX_MAGIC)] != INDEX_MAGIC:
            raise ValueError("not an index file (bad magic)")
        off = len(INDEX_MAGIC)
        (hlen,) = struct.unpack("<I", blob[off : off + 4])
        off += 4
        header = json.loads(blob[off : off + hlen].decode("utf-8"))
        off += hlen
        dtype = np.dtype(header["dtype"]).newbyteorder("<")
        mat = np.frombuffer(blob[off:], dtype=dtype).reshape(header["count"], header["dim"])
        return cls(mat.astype(np.dtype(header["dtype"])), header["ids"], header["encoder_hash"])


class BiEncoderRetriever:
    """Shared-encoder bi-encoder with mean pooling."""

    def __init__(self, vocab: Vocabulary, config: EncoderConfig,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        self.vocab = vocab
        config.vocab_size = len(vocab)
        self.config = config
        self.store = ParameterStore()
        self.dtype = np.dtype(dtype).type
        self.encoder = TransformerEncoder(self.store, config,
                                          rng or np.random.default_rng(0), dtype=dtype)

    def _batch_ids(self, texts: list[str], max_tokens: int) -> tuple[np.ndarray, np.ndarray]:
        seqs = [self.vocab.tokenize(t).ids[:max_tokens] for t in texts]
        if any(len(s) == 0 for s in seqs):
            raise ValueError("cannot embed an empty text")
        L = max(len(s) for s in seqs)
        ids = np.zeros((len(seqs), L), dtype=np.int64)
        mask = np.zeros((len(seqs), L))
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            mask[i, : len(s)] = 1.0
        return ids, mask

    def embed_train(self, texts: list[str], max_tokens: int) -> Tensor:
        ids, mask = self._batch_ids(texts, max_tokens)
        return pool_mean(self.encoder.encode_batch(ids, mask), mask)

    def embed(self, texts: list[str], max_tokens: int, batch_size: int = 128) -> np.ndarray:
        """Pooled embeddings with no graph, in input order."""
        chunks = []
        with ad.no_grad():
            for i in range(0, len(texts), batch_size):
                chunk = texts[i : i + batch_size]
                chunks.append(self.embed_train(chunk, max_tokens).data)
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.config.hidden_size))

    def save(self, path: str | Path, meta: dict | None = None) -> str:
        full_meta = {"encoder_config": self.config.to_dict(), "kind": "retriever"}
        full_meta.update(meta or {})
        return save_snapshot(path, self.store, meta=full_meta)

    @classmethod
    def load(cls, path: str | Path, vocab: Vocabulary) -> tuple["BiEncoderRetriever", str]:
        values, _, meta, digest = load_snapshot(path)
        config = EncoderConfig.from_dict(meta["encoder_config"])
        dtype = values[next(iter(values))].dtype
        model = cls(vocab, config, np.random.default_rng(0), dtype=dtype)
        model.store.load_values(values)
        return model, digest


def build_index(retriever: BiEncoderRetriever, passages: list[Passage],
                max_tokens: int, encoder_hash: str = "") -> FlatIndex:
    """Embed every indexable passage (NME slots are reader-side only)."""
    indexable = [p for p in passages if not p.is_nme]
    embs = retriever.embed([p.text for p in indexable], max_tokens)
    return FlatIndex(embs, [p.id for p in indexable], encoder_hash)


def search(index: FlatIndex, retriever: BiEncoderRetriever, query_text: str,
           k: int, max_tokens: int) -> list[tuple[str, float]]:
    q = retriever.embed([query_text], max_tokens)[0]
    return index.search_vector(q, k)


def nce_loss(scores: Tensor, gold_columns: list[list[int]]) -> Tensor:
    """Multi-label NCE over a query-by-passage score matrix.

    For each query, every column not gold for it is a negative. Each gold
    column contributes -log( e^s+ / (e^s+ + sum_neg e^s-) ), evaluated
    stably as softplus(logsumexp(negatives) - s+). Mean over queries.
    """
    Q, P = scores.shape
    if len(gold_columns) != Q:
        raise ValueError("one gold set per query required")
    terms = []
    for qi, gold in enumerate(gold_columns):
        if not gold:
            raise ValueError(f"query {qi} has no gold passage in the batch")
        gold_set = set(gold)
        neg = [j for j in range(P) if j not in gold_set]
        row = ad.getitem(scores, qi)
        per_query = []
        if neg:
            neg_lse = ad.logsumexp(ad.take_rows(row, np.array(neg)), axis=0)
            for j in gold:
                per_query.append(ad.softplus(ad.sub(neg_lse, ad.getitem(row, j))))
        else:
            # no negatives: the ratio is 1 and the term vanishes
            continue
        terms.append(per_query[0] if len(per_query) == 1 else
                     ad.tensor_sum(ad.concat([ad.reshape(t, (1,)) for t in per_query], axis=0)))
    if not terms:
        return Tensor(np.zeros(()))
    stacked = ad.concat([ad.reshape(t, (1,)) for t in terms], axis=0)
    return ad.div(ad.tensor_sum(stacked), float(Q))


def mine_hard_negatives(index: FlatIndex, retriever: BiEncoderRetriever,
                        examples: list[RetrievalExample], cap: int, prob: float,
                        rng: np.random.Generator, max_tokens: int) -> dict[str, list[str]]:
    """Per query, with probability ``prob``, keep the top ``cap`` highest
    scoring non-gold passages as that query's hard negatives."""
    mined: dict[str, list[str]] = {}
    if cap <= 0 or prob <= 0.0 or len(index) == 0:
        return mined
    embs = retriever.embed([e.text for e in examples], max_tokens)
    for e, q_emb in zip(examples, embs):
        if rng.random() >= prob:
            continue
        hits = index.search_vector(q_emb, cap + len(e.gold_ids))
        negs = [pid for pid, _ in hits if pid not in set(e.gold_ids)][:cap]
        if negs:
            mined[e.query_id] = negs
    return mined


def recall_at_k(index: FlatIndex, retriever: BiEncoderRetriever,
                examples: list[RetrievalExample], k: int, max_tokens: int) -> float:
    """Micro recall: fraction of gold passages appearing in their query's top-k."""
    total = hits = 0
    if not examples or len(index) == 0:
        return 0.0
    embs = retriever.embed([e.text for e in examples], max_tokens)
    for e, q_emb in zip(examples, embs):
        if not e.gold_ids:
            continue
        top = {pid for pid, _ in index.search_vector(q_emb, k)}
        total += len(e.gold_ids)
        hits += sum(1 for g in e.gold_ids if g in top)
    return hits / total if total else 0.0


@dataclass
class RetrieverTrainConfig:
    epochs: int = 5
    query_batch: int = 32
    passage_cap: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    optimizer: str = "radam"
    max_query_tokens: int = 64
    max_passage_tokens: int = 64
    mine_cap: int = 15
    mine_prob: float = 1.0
    mine_interval: float = 0.1  # fraction of an epoch between re-mining cycles
    recall_k: int = 10
    warmup_steps: int = 0
    seed: int = 0
    log: list = field(default_factory=list)


def train_retriever(retriever: BiEncoderRetriever, train_examples: list[RetrievalExample],
                    val_examples: list[RetrievalExample], passages: list[Passage],
                    cfg: RetrieverTrainConfig,
                    progress=None) -> tuple[FlatIndex, list[dict]]:
    """Optimize the NCE objective; re-mine negatives and rebuild the index on
    the configured schedule. Returns the final index and the recall history."""
    from .optim import LinearSchedule, make_optimizer

    passage_by_id = {p.id: p for p in passages}
    missing = sorted({g for e in train_examples for g in e.gold_ids} - set(passage_by_id))
    if missing:
        raise ValueError(f"gold passage ids missing from the collection: {missing[:5]}")

    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = max(1, (len(train_examples) + cfg.query_batch - 1) // cfg.query_batch)
    total_steps = steps_per_epoch * cfg.epochs
    mine_every = max(1, int(round(steps_per_epoch * cfg.mine_interval)))
    schedule = LinearSchedule(cfg.lr, total_steps, cfg.warmup_steps)
    opt = make_optimizer(cfg.optimizer, retriever.store, schedule, cfg.weight_decay,
                         depth_fn=retriever.encoder.param_depth)

    mined: dict[str, list[str]] = {}
    history: list[dict] = []

    def mining_cycle(step: int) -> FlatIndex:
        idx = build_index(retriever, passages, cfg.max_passage_tokens)
        nonlocal mined
        mined = mine_hard_negatives(idx, retriever, train_examples, cfg.mine_cap,
                                    cfg.mine_prob, rng, cfg.max_query_tokens)
        rec = recall_at_k(idx, retriever, val_examples, cfg.recall_k, cfg.max_query_tokens)
        history.append({"step": step, "recall": rec, "k": cfg.recall_k})
        if progress:
            progress(f"step {step}: recall@{cfg.recall_k} = {rec:.4f}")
        return idx

    index = mining_cycle(0)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train_examples))
        for b in range(steps_per_epoch):
            batch = [train_examples[i] for i in order[b * cfg.query_batch : (b + 1) * cfg.query_batch]]
            if not batch:
                continue
            pool: list[str] = []
            seen = set()
            for e in batch:
                for g in e.gold_ids:
                    if g not in seen:
                        seen.add(g)
                        pool.append(g)
            budget = max(cfg.passage_cap - len(pool), 0)
            for e in batch:
                for m in mined.get(e.query_id, []):
                    if budget <= 0:
                        break
                    if m not in seen:
                        seen.add(m)
                        pool.append(m)
                        budget -= 1
            col = {pid: j for j, pid in enumerate(pool)}
            gold_columns = [[col[g] for g in e.gold_ids] for e in batch]

            q_emb = retriever.embed_train([e.text for e in batch], cfg.max_query_tokens)
            p_emb = retriever.embed_train([passage_by_id[pid].text for pid in pool],
                                          cfg.max_passage_tokens)
            scores = ad.matmul(q_emb, ad.transpose(p_emb, (1, 0)))
            loss = nce_loss(scores, gold_columns)
            ad.check_finite(loss, "retriever loss")
            retriever.store.zero_grad()
            loss.backward()
            retriever.store.fill_missing_grads()
            opt.step()
            step += 1
            if step % mine_every == 0 and step < total_steps:
                index = mining_cycle(step)
    index = mining_cycle(step)
    return index, history
