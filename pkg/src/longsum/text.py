"""Corpus files, vocabulary, tokenization, batching and synthetic corpora."""

from __future__ import annotations

import itertools
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .model import BOS, EOS, GLOBAL, N_RESERVED, PAD, UNK

log = logging.getLogger(__name__)

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>", "<global>")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class CorpusError(ValueError):
    """Bad corpus input; the message names the offending line."""


def split_tokens(text):
    """Lowercase and split on whitespace and punctuation boundaries."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text):
    return " ".join(split_tokens(text))


class Vocabulary:
    def __init__(self, tokens=()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            if t in self.stoi:
                raise ValueError(f"duplicate vocabulary token {t!r}")
            self.stoi[t] = len(self.itos)
            self.itos.append(t)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token):
        return self.stoi.get(token, UNK)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.itos[N_RESERVED:]:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def build_vocab(texts, max_size):
    """Keep the ``max_size - 5`` most frequent tokens; ties go to the smaller string."""
    if max_size <= N_RESERVED:
        raise ValueError(f"max_size must exceed the {N_RESERVED} reserved ids")
    counts = Counter()
    for text in texts:
        counts.update(split_tokens(text))
    for r in RESERVED:
        counts.pop(r, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(t for t, _ in ranked[: max_size - N_RESERVED])


def tokenize(text, vocab):
    return [vocab.id(t) for t in split_tokens(text)]


def detokenize(ids, vocab):
    return " ".join(vocab.itos[i] for i in ids if i not in (PAD, BOS, EOS))


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------

@dataclass
class CorpusPair:
    document: list
    summary: list
    line: int


def read_jsonl(path):
    """Yield ``(line_number, document, summary)`` with validation."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path}: invalid UTF-8 ({exc})") from None
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise CorpusError(f"{path}:{lineno}: expected a JSON object")
        for key in ("document", "summary"):
            if not isinstance(obj.get(key), str):
                raise CorpusError(f"{path}:{lineno}: missing string field {key!r}")
        yield lineno, obj["document"], obj["summary"]


def load_corpus(path, vocab=None, max_input_len=512, max_summary_len=64, max_vocab=1000):
    """Read a JSONL corpus into id pairs.

    Documents are truncated to ``max_input_len - 1`` tokens and get the
    GLOBAL sentinel in front. Summaries are truncated to
    ``max_summary_len - 1`` tokens so BOS/EOS still fit. Returns
    ``(pairs, vocab, n_truncated)``.
    """
    rows = list(read_jsonl(path))
    if not rows:
        raise CorpusError(f"{path}: corpus is empty")
    if vocab is None:
        vocab = build_vocab(itertools.chain.from_iterable((d, s) for _, d, s in rows), max_vocab)
    pairs, truncated = [], 0
    for lineno, doc, summ in rows:
        d_ids = tokenize(doc, vocab)
        s_ids = tokenize(summ, vocab)
        if not d_ids or not s_ids:
            raise CorpusError(f"{path}:{lineno}: empty document or summary")
        if len(d_ids) > max_input_len - 1:
            d_ids = d_ids[: max_input_len - 1]
            truncated += 1
        pairs.append(CorpusPair([GLOBAL] + d_ids, s_ids[: max_summary_len - 1], lineno))
    if truncated:
        log.info("truncated %d document(s) to %d tokens", truncated, max_input_len)
    return pairs, vocab, truncated


@dataclass
class Batch:
    doc_ids: np.ndarray
    doc_mask: np.ndarray
    dec_in: np.ndarray
    target: np.ndarray
    target_mask: np.ndarray
    indices: np.ndarray


def _pad(seqs):
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
    return ids, ids != PAD


def collate(pairs, indices):
    docs, dmask = _pad([pairs[i].document for i in indices])
    dec_in, _ = _pad([[BOS] + pairs[i].summary for i in indices])
    target, tmask = _pad([pairs[i].summary + [EOS] for i in indices])
    return Batch(docs, dmask, dec_in, target, tmask, np.asarray(indices))


def epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(pairs, batch_size, seed, epoch=0):
    """Seeded shuffle into right-padded batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(pairs), seed, epoch)
    return [collate(pairs, order[i:i + batch_size]) for i in range(0, len(order), batch_size)]


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

_CONS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
TASKS = ("copy-first-k", "keyword-extract")


def _word_pools(n_filler=150, n_keywords=30):
    syll = [c + v for c in _CONS for v in _VOWELS]
    words = ["".join(p) for p in itertools.product(syll, repeat=2)]
    rng = np.random.default_rng(12345)
    pick = rng.choice(len(words), size=n_filler + n_keywords, replace=False)
    chosen = [words[i] for i in pick]
    return chosen[:n_filler], [w + "ase" for w in chosen[n_filler:]]


def synthetic_pairs(n_pairs, seed, task="copy-first-k", k=8, min_len=None, max_len=None):
    """Deterministic (document, summary) string pairs with known answers."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    filler, keywords = _word_pools()
    min_len = min_len or max(k + 4, 12)
    max_len = max_len or min_len + 24
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_pairs):
        length = int(rng.integers(min_len, max_len + 1))
        doc = [filler[i] for i in rng.integers(0, len(filler), size=length)]
        if task == "copy-first-k":
            summary = doc[:k]
        else:
            kws = [keywords[i] for i in rng.integers(0, len(keywords), size=k)]
            slots = np.sort(rng.choice(length, size=k, replace=False))
            for shift, (pos, kw) in enumerate(zip(slots, kws)):
                doc[pos + 2 * shift:pos + 2 * shift] = ["*", kw]
            summary = kws
        out.append({"document": " ".join(doc), "summary": " ".join(summary)})
    return out


def generate_synthetic_corpus(n_pairs, seed, task="copy-first-k", out=None, k=8, **kw):
    """Write a synthetic JSONL corpus to ``out`` and return its path."""
    rows = synthetic_pairs(n_pairs, seed, task=task, k=k, **kw)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=True) + "\n")
    return out
