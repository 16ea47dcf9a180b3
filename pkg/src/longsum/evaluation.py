"""ROUGE scoring, throughput measurement and summary-quality reports."""

from __future__ import annotations

import json
import os
import platform
import time
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .attention import dense_attention_reference, sparse_attention
from .decoding import DecodeConfig, summarize_ids
from .pattern import build_pattern
from .tensor import no_grad

WARMUP_DOCS = 3


@dataclass
class RougeScore:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0

    @classmethod
    def from_counts(cls, overlap, cand_total, ref_total):
        if cand_total == 0 or ref_total == 0:
            return cls()
        p, r = overlap / cand_total, overlap / ref_total
        f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        return cls(p, r, f)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate, reference, n=1):
    """Clipped n-gram overlap."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand, ref = _ngrams(list(candidate), n), _ngrams(list(reference), n)
    overlap = sum((cand & ref).values())
    return RougeScore.from_counts(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a, b):
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference):
    candidate, reference = list(candidate), list(reference)
    return RougeScore.from_counts(lcs_length(candidate, reference), len(candidate), len(reference))


def macro_average(scores):
    if not scores:
        return RougeScore()
    return RougeScore(
        float(np.mean([s.precision for s in scores])),
        float(np.mean([s.recall for s in scores])),
        float(np.mean([s.f1 for s in scores])),
    )


# ---------------------------------------------------------------------------
# throughput
# ---------------------------------------------------------------------------

def hardware_note():
    return f"{platform.machine()} {platform.processor() or 'cpu'}, {os.cpu_count()} cpu(s), python {platform.python_version()}, kernel={kernels.BACKEND}, single thread"


def fps_from(n_docs, seconds):
    if seconds <= 0:
        raise ValueError("elapsed time must be positive")
    return n_docs / seconds


@dataclass
class FpsResult:
    fps: float
    n_docs: int
    seconds: float
    note: str


def measure_fps(model, documents, decode_config=None, warmup=WARMUP_DOCS):
    """Documents per second for decoding; the first ``warmup`` docs are untimed.

    With ``warmup`` or fewer documents, the warm-up pass reuses them and the
    timed pass covers all documents.
    """
    if not documents:
        raise ValueError("measure_fps needs at least one document")
    cfg = decode_config or DecodeConfig()
    docs = list(documents)
    head, timed = (docs[:warmup], docs[warmup:]) if len(docs) > warmup else (docs, docs)
    for doc in head:
        summarize_ids(model, doc, cfg)
    t0 = time.perf_counter()
    for doc in timed:
        summarize_ids(model, doc, cfg)
    elapsed = time.perf_counter() - t0
    return FpsResult(fps_from(len(timed), elapsed), len(timed), elapsed, hardware_note())


# ---------------------------------------------------------------------------
# corpus evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    model: str
    rouge1: RougeScore
    rouge2: RougeScore
    rougeL: RougeScore
    fps: float
    token_capacity: int
    params: int
    corpus: str
    n_docs: int
    decode: dict = field(default_factory=dict)
    wall_seconds: float = 0.0
    hardware: str = ""

    SCORE_FIELDS = ("rouge1", "rouge2", "rougeL")

    @property
    def rouge(self):
        """Headline number: ROUGE-1 F1."""
        return self.rouge1.f1

    def to_dict(self):
        return asdict(self)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def table(self):
        head = f"{'Model':<16}{'Rouge':>8}{'R-1':>8}{'R-2':>8}{'R-L':>8}{'Fps':>10}{'Token':>8}{'Params(M)':>11}"
        row = (
            f"{self.model:<16}{self.rouge:>8.3f}{self.rouge1.f1:>8.3f}{self.rouge2.f1:>8.3f}"
            f"{self.rougeL.f1:>8.3f}{self.fps:>10.2f}{self.token_capacity:>8d}{self.params / 1e6:>11.3f}"
        )
        return head + "\n" + row


def evaluate_corpus(model, pairs, decode_config=None, name="longsum", corpus_id=""):
    """Decode every document and macro-average ROUGE over pairs."""
    if not pairs:
        raise ValueError("evaluate_corpus: corpus is empty")
    cfg = decode_config or DecodeConfig()
    V = model.config.vocab_size
    for p in pairs:
        if max(p.document) >= V or max(p.summary) >= V:
            raise ValueError(f"corpus line {p.line}: token id outside the model vocabulary ({V})")
    r1, r2, rl, times = [], [], [], []
    start = time.perf_counter()
    with no_grad():
        for p in pairs:
            t0 = time.perf_counter()
            cand = summarize_ids(model, p.document, cfg)
            times.append(time.perf_counter() - t0)
            r1.append(rouge_n(cand, p.summary, 1))
            r2.append(rouge_n(cand, p.summary, 2))
            rl.append(rouge_l(cand, p.summary))
    wall = time.perf_counter() - start
    timed = times[WARMUP_DOCS:] if len(times) > WARMUP_DOCS else times
    return EvalReport(
        model=name,
        rouge1=macro_average(r1),
        rouge2=macro_average(r2),
        rougeL=macro_average(rl),
        fps=fps_from(len(timed), max(sum(timed), 1e-12)),
        token_capacity=model.config.max_input_len,
        params=model.count_params(),
        corpus=corpus_id,
        n_docs=len(pairs),
        decode=asdict(cfg),
        wall_seconds=wall,
        hardware=hardware_note(),
    )


# ---------------------------------------------------------------------------
# attention scaling benchmark
# ---------------------------------------------------------------------------

def _best_time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def time_attention(n, kind="sparse", w=16, n_globals=1, d=64, repeats=3, seed=0, backend=None):
    """Best-of-``repeats`` seconds for one attention forward at length ``n``."""
    rng = np.random.default_rng(seed)
    Q, K, V = (rng.standard_normal((n, d)).astype(np.float32) for _ in range(3))
    pattern = build_pattern(n, w, range(n_globals))
    with no_grad():
        if kind == "sparse":
            return _best_time(lambda: sparse_attention(Q, K, V, pattern, backend=backend), repeats)
        if kind == "dense":
            mask = pattern.to_mask()
            return _best_time(lambda: dense_attention_reference(Q, K, V, mask), repeats)
    raise ValueError(f"unknown attention kind {kind!r}")


def scaling_table(ns=(128, 256, 512, 1024, 2048), w=16, n_globals=1, d=64, repeats=3, backends=None):
    """Rows of (kind, n, seconds) for every sparse backend and the dense reference."""
    backends = backends or sorted(kernels.BACKENDS)
    rows = []
    for n in ns:
        for be in backends:
            rows.append({"kind": f"sparse[{be}]", "n": n, "seconds": time_attention(n, "sparse", w, n_globals, d, repeats, backend=be)})
        rows.append({"kind": "dense", "n": n, "seconds": time_attention(n, "dense", w, n_globals, d, repeats)})
    return rows


def format_scaling(rows):
    kinds = list(dict.fromkeys(r["kind"] for r in rows))
    ns = sorted({r["n"] for r in rows})
    lookup = {(r["kind"], r["n"]): r["seconds"] for r in rows}
    lines = [f"{'n':>6}" + "".join(f"{k:>18}" for k in kinds)]
    for n in ns:
        lines.append(f"{n:>6}" + "".join(f"{lookup[(k, n)] * 1e3:>16.3f}ms" for k in kinds))
    if len(ns) > 1:
        a, b = ns[-2], ns[-1]
        lines.append(f"{'ratio':>6}" + "".join(f"{lookup[(k, b)] / lookup[(k, a)]:>18.2f}" for k in kinds) + f"   (t({b})/t({a}))")
    return "\n".join(lines)
