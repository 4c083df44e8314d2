"""Model backends: toy masked/causal language models, a softmax text
classifier over embedding-sum features, and dictionary entity recognition.

The toy models are count-based and deterministic so that every sampler and
threat-model code path can be exercised at desk scale. Real pretrained
backends plug in through the wire adapter (see ``adapter``)."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

import numpy as np

from .lexicon import (
    MASK,
    PAD,
    UNK,
    EmbeddingTable,
    StopwordSet,
    TokenSequence,
    WordPieceVocab,
    sentence_representation,
)

logger = logging.getLogger(__name__)


class MaskedLanguageModel:
    """Per-position log-distributions over the word-piece vocabulary.

    ``log_rows(piece_ids, mask_positions)`` returns one normalized log-prob
    row per masked position; reserved pieces carry probability zero.
    """

    vocab_size: int

    def log_rows(self, piece_ids, mask_positions) -> np.ndarray:
        raise NotImplementedError


class CausalScorer:
    """Sentence perplexity: inverse sentence probability, length-normalized."""

    def perplexity(self, text: str) -> float:
        raise NotImplementedError


class Classifier:
    """Probability vector over classes for a text or a (premise, hypothesis) pair."""

    num_classes: int

    def predict_proba(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def predict_proba_pair(self, premise: str, hypothesis: str) -> np.ndarray:
        raise NotImplementedError

    def predict(self, text: str) -> int:
        return int(np.argmax(self.predict_proba(text)))

    def predict_pair(self, premise: str, hypothesis: str) -> int:
        return int(np.argmax(self.predict_proba_pair(premise, hypothesis)))


class EntityRecognizer:
    """Entity phrases occurring verbatim in a text."""

    def entities(self, text: str) -> list[str]:
        raise NotImplementedError


def _sequence_ids(item) -> list[int]:
    if isinstance(item, TokenSequence):
        return item.piece_ids
    return list(item)


@dataclass
class MlmConfig:
    smoothing: float = 0.1
    # mixture weights for the (left-bigram, right-bigram, unigram) components
    mixture: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)


class ToyMaskedLM(MaskedLanguageModel):
    """Neighbor-bigram mixture: p(z | left, right) averages a left-bigram,
    a right-bigram, and a unigram component, each add-k smoothed over the
    non-reserved vocabulary. Masked or missing neighbors back off to the
    unigram component."""

    def __init__(self, vocab: WordPieceVocab, unigram_counts, left_counts,
                 right_counts, smoothing: float = 0.1,
                 mixture=(1 / 3, 1 / 3, 1 / 3)):
        if smoothing <= 0:
            raise ValueError("smoothing must be positive")
        mixture = tuple(float(w) for w in mixture)
        if len(mixture) != 3 or any(w < 0 for w in mixture) or sum(mixture) <= 0:
            raise ValueError("mixture must be three non-negative weights")
        self.mixture = tuple(w / sum(mixture) for w in mixture)
        self.vocab = vocab
        self.vocab_size = len(vocab)
        self.smoothing = float(smoothing)
        self.unigram_counts = np.asarray(unigram_counts, dtype=float)
        self.left_counts = np.asarray(left_counts, dtype=float)
        self.right_counts = np.asarray(right_counts, dtype=float)
        self.support = np.ones(self.vocab_size, dtype=bool)
        for sid in vocab.special_ids:
            self.support[sid] = False
        self._support_size = int(self.support.sum())
        if self._support_size == 0:
            raise ValueError("vocabulary has no non-reserved pieces")
        self._uni = self._normalize(self.unigram_counts)

    def _normalize(self, counts: np.ndarray) -> np.ndarray:
        probs = np.zeros(self.vocab_size)
        smoothed = counts[self.support] + self.smoothing
        probs[self.support] = smoothed / smoothed.sum()
        return probs

    def _neighbor(self, ids, pos: int):
        if pos < 0 or pos >= len(ids):
            return None
        nid = ids[pos]
        if nid in (self.vocab.mask_id, self.vocab.pad_id):
            return None
        return nid

    def row(self, left_id, right_id) -> np.ndarray:
        """Probability row for a masked position with the given neighbors."""
        wl, wr, wu = self.mixture
        p_left = self._normalize(self.left_counts[left_id]) if left_id is not None else self._uni
        p_right = self._normalize(self.right_counts[right_id]) if right_id is not None else self._uni
        return wl * p_left + wr * p_right + wu * self._uni

    def log_rows(self, piece_ids, mask_positions) -> np.ndarray:
        ids = _sequence_ids(piece_ids)
        out = np.full((len(mask_positions), self.vocab_size), -np.inf)
        for k, pos in enumerate(mask_positions):
            if pos < 0 or pos >= len(ids):
                raise ValueError(f"mask position {pos} out of range")
            probs = self.row(self._neighbor(ids, pos - 1), self._neighbor(ids, pos + 1))
            out[k, self.support] = np.log(probs[self.support])
        return out

    def to_dict(self) -> dict:
        return {
            "kind": "toy_mlm",
            "pieces": self.vocab.pieces,
            "smoothing": self.smoothing,
            "mixture": list(self.mixture),
            "unigram": self.unigram_counts.tolist(),
            "left": self.left_counts.tolist(),
            "right": self.right_counts.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ToyMaskedLM":
        vocab = WordPieceVocab(data["pieces"])
        return cls(vocab, data["unigram"], data["left"], data["right"],
                   data["smoothing"], data.get("mixture", (1 / 3, 1 / 3, 1 / 3)))


class UniformMaskedLM(MaskedLanguageModel):
    """Uniform rows over non-reserved pieces; handy as a neutral proposal."""

    def __init__(self, vocab: WordPieceVocab):
        self.vocab = vocab
        self.vocab_size = len(vocab)
        self.support = np.ones(self.vocab_size, dtype=bool)
        for sid in vocab.special_ids:
            self.support[sid] = False

    def log_rows(self, piece_ids, mask_positions) -> np.ndarray:
        row = np.full(self.vocab_size, -np.inf)
        row[self.support] = -np.log(self.support.sum())
        return np.tile(row, (len(mask_positions), 1))


def train_toy_mlm(corpus, vocab: WordPieceVocab, config: MlmConfig | None = None) -> ToyMaskedLM:
    """Count neighbor statistics over tokenized sequences."""
    cfg = config or MlmConfig()
    size = len(vocab)
    unigram = np.zeros(size)
    left = np.zeros((size, size))
    right = np.zeros((size, size))
    seen = False
    for item in corpus:
        ids = _sequence_ids(item)
        if not ids:
            continue
        seen = True
        np.add.at(unigram, ids, 1.0)
        for prev, cur in zip(ids, ids[1:]):
            left[prev, cur] += 1.0
            right[cur, prev] += 1.0
    if not seen:
        raise ValueError("corpus must be non-empty")
    return ToyMaskedLM(vocab, unigram, left, right, cfg.smoothing, cfg.mixture)


def train_class_excluded_mlms(examples, num_classes: int, vocab: WordPieceVocab,
                              config: MlmConfig | None = None) -> list[ToyMaskedLM]:
    """One model per class, each trained with that class's documents removed.

    Attacking an example of class y then uses model y, the one that never
    saw class-y text.
    """
    if num_classes < 2:
        raise ValueError("class-excluded training needs at least 2 classes")
    examples = list(examples)
    for _, label in examples:
        if not 0 <= label < num_classes:
            raise ValueError(f"label {label} outside [0, {num_classes})")
    if not examples:
        raise ValueError("corpus must be non-empty")
    models = []
    for cls_id in range(num_classes):
        subset = [seq for seq, label in examples if label != cls_id]
        if not subset:
            logger.warning(
                "class %d holds the entire corpus; its excluded model falls back "
                "to the full corpus", cls_id,
            )
            subset = [seq for seq, _ in examples]
        models.append(train_toy_mlm(subset, vocab, config))
    return models


@dataclass
class CausalConfig:
    smoothing: float = 0.1


class ToyCausalScorer(CausalScorer):
    """Add-k smoothed bigram model over whitespace tokens.

    ppl(x) = [prod_i p(x_i | x_{i-1})]^(-1/l); the first token uses the
    unigram distribution. Unknown tokens map to <unk> when present,
    otherwise they are scored as zero-count events.
    """

    def __init__(self, tokens, unigram_counts, bigram_counts, smoothing: float = 0.1):
        if smoothing <= 0:
            raise ValueError("smoothing must be positive")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.smoothing = float(smoothing)
        self.unigram_counts = np.asarray(unigram_counts, dtype=float)
        self.bigram_counts = np.asarray(bigram_counts, dtype=float)
        self.total = float(self.unigram_counts.sum())
        self.context_totals = self.bigram_counts.sum(axis=1)
        self._unk = self.index.get(UNK)

    def _tid(self, token: str):
        tid = self.index.get(token)
        if tid is None:
            return self._unk
        return tid

    def _p_first(self, tid) -> float:
        size = len(self.tokens)
        count = self.unigram_counts[tid] if tid is not None else 0.0
        return (count + self.smoothing) / (self.total + self.smoothing * size)

    def _p_next(self, prev, tid) -> float:
        size = len(self.tokens)
        if prev is None:
            return self.smoothing / (self.smoothing * size)
        count = self.bigram_counts[prev, tid] if tid is not None else 0.0
        return (count + self.smoothing) / (self.context_totals[prev] + self.smoothing * size)

    def score_tokens(self, tokens) -> float:
        tokens = list(tokens)
        if not tokens:
            raise ValueError("cannot score an empty token list")
        ids = [self._tid(t) for t in tokens]
        logp = np.log(self._p_first(ids[0]))
        for prev, cur in zip(ids, ids[1:]):
            logp += np.log(self._p_next(prev, cur))
        return float(np.exp(-logp / len(tokens)))

    def perplexity(self, text: str) -> float:
        return self.score_tokens(text.split())

    def to_dict(self) -> dict:
        return {
            "kind": "toy_causal",
            "tokens": self.tokens,
            "smoothing": self.smoothing,
            "unigram": self.unigram_counts.tolist(),
            "bigram": self.bigram_counts.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ToyCausalScorer":
        return cls(data["tokens"], data["unigram"], data["bigram"], data["smoothing"])


def train_toy_causal(corpus, vocab=None, config: CausalConfig | None = None) -> ToyCausalScorer:
    """Count unigram/bigram statistics over whitespace-tokenized texts."""
    cfg = config or CausalConfig()
    sentences = []
    for item in corpus:
        tokens = item.split() if isinstance(item, str) else list(item)
        if tokens:
            sentences.append(tokens)
    if not sentences:
        raise ValueError("corpus must be non-empty")
    if vocab is None:
        vocab = sorted({t for sent in sentences for t in sent})
    tokens = list(vocab)
    index = {t: i for i, t in enumerate(tokens)}
    unigram = np.zeros(len(tokens))
    bigram = np.zeros((len(tokens), len(tokens)))
    for sent in sentences:
        ids = [index[t] for t in sent if t in index]
        np.add.at(unigram, ids, 1.0)
        for prev, cur in zip(ids, ids[1:]):
            bigram[prev, cur] += 1.0
    return ToyCausalScorer(tokens, unigram, bigram, cfg.smoothing)


@dataclass
class ClassifierConfig:
    epochs: int = 300
    learning_rate: float = 0.5
    task: str = "classification"  # or "nli"


class ToyTextClassifier(Classifier):
    """Multinomial logistic regression over sentence-representation features.

    Classification inputs use R(text); NLI pairs use the concatenation of
    premise and hypothesis representations.
    """

    def __init__(self, weights, bias, word_table: EmbeddingTable, stop: StopwordSet,
                 task: str = "classification"):
        self.weights = np.asarray(weights, dtype=float)
        self.bias = np.asarray(bias, dtype=float)
        self.word_table = word_table
        self.stop = stop
        self.task = task
        self.num_classes = self.weights.shape[0]

    def _repr(self, text: str) -> np.ndarray:
        return sentence_representation(text.split(), self.word_table, self.stop)

    def features(self, item) -> np.ndarray:
        if isinstance(item, tuple):
            premise, hypothesis = item
            return np.concatenate([self._repr(premise), self._repr(hypothesis)])
        return self._repr(item)

    def _proba(self, feats: np.ndarray) -> np.ndarray:
        logits = self.weights @ feats + self.bias
        logits -= logits.max()
        probs = np.exp(logits)
        return probs / probs.sum()

    def predict_proba(self, text: str) -> np.ndarray:
        if self.task != "classification":
            raise ValueError("pair classifier requires premise and hypothesis")
        return self._proba(self.features(text))

    def predict_proba_pair(self, premise: str, hypothesis: str) -> np.ndarray:
        if self.task != "nli":
            raise ValueError("text classifier takes a single input")
        return self._proba(self.features((premise, hypothesis)))

    def to_dict(self) -> dict:
        return {
            "kind": "toy_classifier",
            "task": self.task,
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict, word_table: EmbeddingTable, stop: StopwordSet) -> "ToyTextClassifier":
        return cls(data["weights"], data["bias"], word_table, stop, data["task"])


def train_toy_classifier(examples, word_table: EmbeddingTable, stop: StopwordSet,
                         config: ClassifierConfig | None = None) -> ToyTextClassifier:
    """Full-batch gradient descent on softmax cross-entropy.

    ``examples`` yields (text, label) pairs, or ((premise, hypothesis), label)
    for NLI. Zero epochs leaves the zero weights, i.e. uniform predictions.
    """
    cfg = config or ClassifierConfig()
    examples = list(examples)
    if not examples:
        raise ValueError("training set is empty")
    labels = sorted({label for _, label in examples})
    if len(labels) < 2:
        raise ValueError("training set must contain at least 2 classes")
    num_classes = max(labels) + 1

    model = ToyTextClassifier(
        np.zeros((num_classes, 0)), np.zeros(num_classes), word_table, stop, cfg.task
    )
    feats = np.stack([model.features(item) for item, _ in examples])
    dim = feats.shape[1]
    onehot = np.zeros((len(examples), num_classes))
    for i, (_, label) in enumerate(examples):
        onehot[i, label] = 1.0

    weights = np.zeros((num_classes, dim))
    bias = np.zeros(num_classes)
    n = len(examples)
    for _ in range(cfg.epochs):
        logits = feats @ weights.T + bias
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        delta = probs - onehot
        weights -= cfg.learning_rate * (delta.T @ feats) / n
        bias -= cfg.learning_rate * delta.mean(axis=0)

    return ToyTextClassifier(weights, bias, word_table, stop, cfg.task)


class DictionaryEntityRecognizer(EntityRecognizer):
    """Case-sensitive, word-boundary phrase matching against a fixed lexicon."""

    def __init__(self, phrases):
        self.phrases = sorted({p.strip() for p in phrases if p.strip()})
        self._patterns = [
            (p, re.compile(r"(?<!\w)" + re.escape(p) + r"(?!\w)")) for p in self.phrases
        ]

    def entities(self, text: str) -> list[str]:
        found = []
        for phrase, pattern in self._patterns:
            match = pattern.search(text)
            if match:
                found.append((match.start(), phrase))
        found.sort()
        return [phrase for _, phrase in found]


def dictionary_ner(lexicon) -> DictionaryEntityRecognizer:
    return DictionaryEntityRecognizer(lexicon)
