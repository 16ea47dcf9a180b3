"""Greedy and beam-search summary generation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import BOS, EOS, PAD
from .tensor import no_grad

# never valid as generated tokens
BLOCKED = (PAD, BOS)


@dataclass
class DecodeConfig:
    beam_width: int = 4
    length_penalty: float = 0.6
    max_len: int = 64

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass
class Beam:
    """Finished hypotheses, best first. Each entry is ``(tokens, log_prob, score)``."""

    width: int
    hypotheses: list = field(default_factory=list)

    def best(self):
        return self.hypotheses[0] if self.hypotheses else ([BOS], 0.0, 0.0)


def _encode(model, document_ids):
    with no_grad():
        return model.encode(document_ids)


def next_log_probs(model, prefixes, H):
    """Step log-probabilities with PAD and BOS ruled out."""
    if model.config.vocab_size <= EOS:
        raise ValueError("decoding needs a vocabulary that contains EOS")
    lp = model.step_log_probs_batch(prefixes, H)
    lp[:, list(BLOCKED)] = -np.inf
    return lp


def _step_budget(model, max_len):
    # the prefix fed to the decoder (BOS + generated) must stay below max_summary_len
    return min(max_len, model.config.max_summary_len - 1)


def greedy_decode(model, document_ids, max_len=64, H=None):
    """Argmax decoding; ties go to the lowest id. BOS/EOS are not returned."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    H = _encode(model, document_ids) if H is None else H
    seq = [BOS]
    for _ in range(_step_budget(model, max_len)):
        tok = int(np.argmax(next_log_probs(model, [seq], H)[0]))
        if tok == EOS:
            break
        seq.append(tok)
    return seq[1:]


def _length(tokens):
    return len(tokens) - 1  # generated tokens, EOS included


def beam_search(model, document_ids, width=4, max_len=64, length_penalty=0.6, H=None):
    """Beam search where finished hypotheses take up beam slots.

    At every step all extensions of the live hypotheses are ranked by raw
    log-probability (ties: earlier hypothesis, then lower token id); the top
    ``width`` minus the number already finished survive. Extensions ending in EOS, or reaching ``max_len``,
    are finished and ranked by ``logP / length**length_penalty``.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    H = _encode(model, document_ids) if H is None else H
    steps = _step_budget(model, max_len)
    live = [([BOS], 0.0)]
    finished = []
    for step in range(steps):
        lp = next_log_probs(model, [seq for seq, _ in live], H)
        scores = np.array([s for _, s in live])[:, None] + lp
        flat = scores.reshape(-1)
        # stable sort on -score keeps (hypothesis, token) order for ties
        order = np.argsort(-flat, kind="stable")
        order = order[np.isfinite(flat[order])][: width - len(finished)]
        last = step == steps - 1
        nxt = []
        for idx in order:
            h, tok = divmod(int(idx), lp.shape[1])
            seq = live[h][0] + [tok]
            if tok == EOS or last:
                finished.append((seq, float(flat[idx])))
            else:
                nxt.append((seq, float(flat[idx])))
        live = nxt
        if not live:
            break

    ranked = []
    for rank, (seq, lp_total) in enumerate(finished):
        norm = lp_total / (_length(seq) ** length_penalty) if length_penalty else lp_total
        ranked.append((-norm, rank, seq, lp_total, norm))
    ranked.sort(key=lambda r: (r[0], r[1]))
    return Beam(width, [(seq, lp_total, norm) for _, _, seq, lp_total, norm in ranked])


def strip_specials(seq):
    """Drop the leading BOS and a terminal EOS."""
    out = list(seq[1:]) if seq and seq[0] == BOS else list(seq)
    if out and out[-1] == EOS:
        out = out[:-1]
    return out


def beam_decode(model, document_ids, width=4, max_len=64, length_penalty=0.6, H=None):
    """Best beam-search summary ids, BOS/EOS stripped."""
    beam = beam_search(model, document_ids, width, max_len, length_penalty, H=H)
    return strip_specials(beam.best()[0])


def summarize_ids(model, document_ids, config=None):
    """Decode one document with ``config`` (beam width 1 means greedy)."""
    config = config or DecodeConfig()
    if config.beam_width == 1:
        return greedy_decode(model, document_ids, config.max_len)
    return beam_decode(model, document_ids, config.beam_width, config.max_len, config.length_penalty)
