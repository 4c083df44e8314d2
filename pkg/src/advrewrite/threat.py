"""Sentence-level threat model and the k-word-substitution comparator.

A rewrite u of x is admissible when ppl(u) <= lambda * ppl(x) and the
cosine between the word-embedding sums of u and x is at least epsilon.
Similarity is always computed on whitespace words with a word-level table;
word-piece embeddings belong to the sampler only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lexicon import EmbeddingTable, StopwordSet, cosine_similarity, sentence_representation
from .models import CausalScorer


@dataclass
class ThreatModelConfig:
    lam: float
    epsilon: float
    scorer: CausalScorer
    word_table: EmbeddingTable
    stop: StopwordSet

    def __post_init__(self):
        if self.lam < 1.0:
            raise ValueError("lambda must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    @property
    def label(self) -> str:
        return f"lambda={self.lam:g},epsilon={self.epsilon:g}"


@dataclass
class WordSubConfig:
    k: int
    epsilon_word: float
    word_table: EmbeddingTable

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if not 0.0 <= self.epsilon_word <= 1.0:
            raise ValueError("epsilon_word must lie in [0, 1]")


@dataclass
class ThreatVerdict:
    ok: bool
    ppl_ratio: float
    similarity: float

    def __bool__(self) -> bool:
        return self.ok


@dataclass
class WordSubVerdict:
    ok: bool
    substitutions: int
    length_mismatch: bool = False

    def __bool__(self) -> bool:
        return self.ok


def perplexity_ratio(x: str, u: str, scorer: CausalScorer) -> float:
    if not x.strip() or not u.strip():
        raise ValueError("perplexity ratio needs two non-empty texts")
    return scorer.perplexity(u) / scorer.perplexity(x)


def word_similarity(x: str, u: str, word_table: EmbeddingTable, stop: StopwordSet) -> float:
    rx = sentence_representation(x.split(), word_table, stop)
    ru = sentence_representation(u.split(), word_table, stop)
    return cosine_similarity(ru, rx)


def scores_pass(ppl_ratio: float, similarity: float, lam: float, epsilon: float) -> bool:
    """Threshold check; the verdict depends on (x, u) only through these scores."""
    return ppl_ratio <= lam and similarity >= epsilon


def in_threat_model(x: str, u: str, cfg: ThreatModelConfig) -> ThreatVerdict:
    ratio = perplexity_ratio(x, u, cfg.scorer)
    similarity = word_similarity(x, u, cfg.word_table, cfg.stop)
    return ThreatVerdict(scores_pass(ratio, similarity, cfg.lam, cfg.epsilon),
                         ratio, similarity)


def in_word_substitution_model(x: str, u: str, cfg: WordSubConfig) -> WordSubVerdict:
    """At most k substituted words, each with word-embedding cosine >= epsilon_word.

    Sentences of different word counts are outside the model by definition;
    the verdict flags that case distinctly.
    """
    xs, us = x.split(), u.split()
    if len(xs) != len(us):
        return WordSubVerdict(False, 0, length_mismatch=True)
    diff = [(a, b) for a, b in zip(xs, us) if a != b]
    if len(diff) > cfg.k:
        return WordSubVerdict(False, len(diff))
    zero = np.zeros(cfg.word_table.dimension)
    for a, b in diff:
        va = cfg.word_table.get(a)
        vb = cfg.word_table.get(b)
        va = zero if va is None else va
        vb = zero if vb is None else vb
        if cosine_similarity(va, vb) < cfg.epsilon_word:
            return WordSubVerdict(False, len(diff))
    return WordSubVerdict(True, len(diff))


def filter_adversarials(records, cfg: ThreatModelConfig):
    """Mark candidates and records that both flip the classifier and pass the
    threat model. Scores are computed once and cached on the candidates, so
    re-filtering with other (lambda, epsilon) setups reuses them."""
    label = cfg.label
    for record in records:
        any_success = False
        for cand in record.candidates:
            if cand.ppl_ratio is None or cand.similarity is None:
                cand.ppl_ratio = perplexity_ratio(record.original, cand.text, cfg.scorer)
                cand.similarity = word_similarity(record.original, cand.text,
                                                  cfg.word_table, cfg.stop)
            passes = scores_pass(cand.ppl_ratio, cand.similarity, cfg.lam, cfg.epsilon)
            cand.threat_ok[label] = passes
            flips = cand.predicted is not None and cand.predicted != record.label
            if passes and flips:
                any_success = True
        record.success[label] = any_success and not record.originally_misclassified
    return records


class SentenceEncoder:
    """Hook for neural sentence-encoder threat models; none is bundled."""

    def encode(self, text: str) -> np.ndarray:
        raise NotImplementedError


@dataclass
class EncoderVerdict:
    ok: bool
    similarity: float

    def __bool__(self) -> bool:
        return self.ok


def in_encoder_threat_model(x: str, u: str, encoder: SentenceEncoder,
                            epsilon: float) -> EncoderVerdict:
    similarity = cosine_similarity(encoder.encode(u), encoder.encode(x))
    return EncoderVerdict(similarity >= epsilon, similarity)
