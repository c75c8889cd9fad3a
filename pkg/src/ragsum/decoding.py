"""Beam-search generation with length penalty and trigram-repetition blocking.

Finished hypotheses are ranked by ``log P / len**length_penalty`` where len
counts generated tokens (everything after [BOS], including [EOS]). Any
continuation that would repeat a trigram already present in the hypothesis
is assigned log-probability -inf. Ties break toward the lower token id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import (BOS_ID, EOS_ID, ExampleRecord, TokenSequence, Vocabulary,
                   detokenize, encode_query, sequence_from_ids)
from .errors import ContractError
from .generator import decode_step
from .index import MemoryIndex, RetrievedCandidate, retrieve_candidates
from .model import SummarizerModel

_NEG_INF = float("-inf")


@dataclass
class BeamHypothesis:
    tokens: list[int]
    log_prob: float
    finished: bool = False
    trigrams: set = field(default_factory=set)
    forced: bool = False

    def generated_length(self) -> int:
        return max(len(self.tokens) - 1, 1)

    def score(self, length_penalty: float) -> float:
        return self.log_prob / (self.generated_length() ** length_penalty)

    def extended(self, token: int, logp: float) -> "BeamHypothesis":
        toks = self.tokens + [token]
        grams = set(self.trigrams)
        if len(toks) >= 3:
            grams.add(tuple(toks[-3:]))
        return BeamHypothesis(tokens=toks, log_prob=self.log_prob + logp,
                              finished=token == EOS_ID, trigrams=grams)


@dataclass
class GenerationResult:
    token_ids: list[int]
    log_prob: float
    score: float
    forced_finish: bool

    def text(self, vocab: Vocabulary) -> str:
        return detokenize(self.token_ids, vocab)


def beam_search_states(model: SummarizerModel, src_states,
                       candidates: Sequence[RetrievedCandidate],
                       beam: int = 4, length_penalty: float = 1.0,
                       no_repeat_ngram: int = 3, max_len: int = 256,
                       min_len: int = 8) -> GenerationResult:
    """Core beam loop over ``decode_step`` given encoded source states."""
    if beam < 1:
        raise ContractError(f"beam must be >= 1, got {beam}")
    if no_repeat_ngram not in (None, 0, 3):
        raise ContractError("repetition blocking supports trigrams (3) or disabled (0)")
    block = no_repeat_ngram == 3
    live = [BeamHypothesis(tokens=[BOS_ID], log_prob=0.0)]
    finished: list[BeamHypothesis] = []
    candidates = list(candidates)
    for _ in range(max_len):
        if not live:
            break
        expansions: list[tuple[float, int, int, BeamHypothesis]] = []
        for h_idx, hyp in enumerate(live):
            dist = decode_step(model, sequence_from_ids(hyp.tokens), src_states,
                               candidates)
            logp = np.log(np.maximum(dist.probs.data, 1e-300))
            if len(hyp.tokens) - 1 < min_len:
                logp[EOS_ID] = _NEG_INF
            if block and len(hyp.tokens) >= 2:
                stem = (hyp.tokens[-2], hyp.tokens[-1])
                for gram in hyp.trigrams:
                    if gram[:2] == stem:
                        logp[gram[2]] = _NEG_INF
            order = np.argsort(-logp, kind="stable")[:beam]
            for tok in order:
                lp = float(logp[tok])
                if lp == _NEG_INF:
                    continue
                expansions.append((hyp.log_prob + lp, int(tok), h_idx, hyp))
        if not expansions:
            # Every continuation is blocked; force-finish the best live one.
            best = min(live, key=lambda h: (-h.score(length_penalty), h.tokens))
            best.forced = True
            best.finished = True
            finished.append(best)
            break
        expansions.sort(key=lambda e: (-e[0], e[1], e[2]))
        new_live: list[BeamHypothesis] = []
        finished_this_step = 0
        for total_lp, tok, _, parent in expansions:
            child = parent.extended(tok, total_lp - parent.log_prob)
            if child.finished:
                if finished_this_step < beam:
                    finished.append(child)
                    finished_this_step += 1
            elif len(new_live) < beam:
                new_live.append(child)
            if len(new_live) >= beam and finished_this_step >= beam:
                break
        live = new_live
        if finished and not live:
            break
    if not finished:
        # Ran out of length; flag the best live hypothesis as force-finished.
        best = min(live, key=lambda h: (-h.score(length_penalty), h.tokens))
        best.forced = True
        finished = [best]
    best = min(finished, key=lambda h: (-h.score(length_penalty), h.tokens))
    return GenerationResult(token_ids=list(best.tokens), log_prob=best.log_prob,
                            score=best.score(length_penalty),
                            forced_finish=best.forced)


def beam_search(model: SummarizerModel, vocab: Vocabulary, record: ExampleRecord,
                index: Optional[MemoryIndex] = None, top_k: int = 5,
                beam: int = 4, length_penalty: float = 1.0,
                no_repeat_ngram: int = 3, max_len: int = 256, min_len: int = 8,
                exclusions: frozenset[str] | set[str] = frozenset()) -> GenerationResult:
    """Full generation pipeline for one record.

    Without an index the decoder runs in zero-candidate mode (plain seq2seq).
    """
    query_seq = encode_query(record, vocab, model.config.max_len)
    candidates: list[RetrievedCandidate] = []
    if index is not None:
        query_doc = model.query_encoder.encode(query_seq)
        candidates = retrieve_candidates(index, query_doc, top_k,
                                         model.memory_encoder,
                                         model.retrieved_encoder,
                                         exclusions=exclusions)
    src = model.source_encoder.encode(query_seq)
    return beam_search_states(model, src.hidden, candidates, beam=beam,
                              length_penalty=length_penalty,
                              no_repeat_ngram=no_repeat_ngram,
                              max_len=max_len, min_len=min_len)
