"""Word and word-piece lexicon: embedding tables, tokenization, sentence
representations, and word-piece embedding training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

UNK = "<unk>"
MASK = "<mask>"
PAD = "<pad>"
RESERVED = (UNK, MASK, PAD)
CONTINUATION = "##"
MAX_WORD_CHARS = 100


class EmbeddingFormatError(ValueError):
    """Malformed embedding file; the message carries the offending line number."""


class EmbeddingTable:
    """Immutable token -> d-vector mapping.

    ``level`` records whether entries are surface words or word-pieces: the
    threat model filters with a word-level table while the sampler fast path
    uses a word-piece-level one. Tables never mutate after construction and
    are safe for concurrent reads.
    """

    def __init__(self, dimension: int, entries: dict, level: str = "word"):
        if int(dimension) <= 0:
            raise ValueError("embedding dimension must be positive")
        if level not in ("word", "word-piece"):
            raise ValueError(f"unknown embedding level {level!r}")
        self._dim = int(dimension)
        self._level = level
        store = {}
        for token, vec in entries.items():
            arr = np.asarray(vec, dtype=float)
            if arr.shape != (self._dim,):
                raise ValueError(
                    f"vector for {token!r} has shape {arr.shape}, expected ({self._dim},)"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"vector for {token!r} has non-finite components")
            store[token] = arr
        self._entries = store

    @property
    def dimension(self) -> int:
        return self._dim

    @property
    def level(self) -> str:
        return self._level

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, token: str) -> bool:
        return token in self._entries

    def tokens(self) -> list[str]:
        return list(self._entries)

    def get(self, token: str):
        """Vector for ``token`` or None when absent."""
        return self._entries.get(token)

    def matrix(self, tokens) -> np.ndarray:
        """Stack vectors for ``tokens``; absent tokens become zero rows."""
        out = np.zeros((len(tokens), self._dim))
        for i, tok in enumerate(tokens):
            vec = self._entries.get(tok)
            if vec is not None:
                out[i] = vec
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token, vec in self._entries.items():
                fh.write(token + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def load_word_embeddings(path, level: str = "word") -> EmbeddingTable:
    """Parse the plain-text word-vector format: one token plus d reals per line."""
    entries: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            token, values = parts[0], parts[1:]
            if dim is None:
                if not values:
                    raise EmbeddingFormatError(f"line {lineno}: no vector components")
                dim = len(values)
            if len(values) != dim:
                raise EmbeddingFormatError(
                    f"line {lineno}: expected {dim} components, got {len(values)}"
                )
            try:
                vec = np.array([float(v) for v in values])
            except ValueError as exc:
                raise EmbeddingFormatError(f"line {lineno}: non-numeric component") from exc
            if not np.all(np.isfinite(vec)):
                raise EmbeddingFormatError(f"line {lineno}: non-finite component")
            if token in entries:
                raise EmbeddingFormatError(f"line {lineno}: duplicate token {token!r}")
            entries[token] = vec
    if not entries:
        raise EmbeddingFormatError("empty embedding file")
    return EmbeddingTable(dim, entries, level=level)


class StopwordSet:
    """Case-insensitive stopword membership."""

    def __init__(self, words=()):
        self._words = {w.strip().lower() for w in words if w.strip()}

    def __contains__(self, token: str) -> bool:
        return token.lower() in self._words

    def __len__(self) -> int:
        return len(self._words)

    def __iter__(self):
        return iter(sorted(self._words))

    @classmethod
    def from_file(cls, path) -> "StopwordSet":
        with open(path, encoding="utf-8") as fh:
            return cls(fh.read().split())

    @classmethod
    def default(cls) -> "StopwordSet":
        return cls.from_file(Path(__file__).parent / "resources" / "stopwords.txt")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for w in sorted(self._words):
                fh.write(w + "\n")


@dataclass
class TokenSequence:
    """Fixed-length word-piece sequence; length never changes during sampling.

    ``word_spans`` records the piece ranges of the whitespace words the text
    was tokenized from. ``protected`` marks positions the sampler must never
    rewrite (e.g. an NLI premise).
    """

    pieces: list[str]
    piece_ids: list[int]
    word_spans: list[tuple[int, int]]
    protected: list[bool]

    def __len__(self) -> int:
        return len(self.pieces)

    def copy(self) -> "TokenSequence":
        return TokenSequence(
            list(self.pieces),
            list(self.piece_ids),
            list(self.word_spans),
            list(self.protected),
        )

    def text(self) -> str:
        return detokenize(self)


def word_groups(pieces, strict: bool = True) -> list[tuple[str, int, int]]:
    """Glue continuation pieces onto their predecessors.

    Returns (word, start, end) triples covering the sequence. With
    ``strict`` a leading continuation piece is an error; otherwise it opens
    its own group (useful on transient sampler states).
    """
    groups: list[tuple[str, int, int]] = []
    for i, piece in enumerate(pieces):
        if piece.startswith(CONTINUATION) and groups:
            word, start, _ = groups[-1]
            groups[-1] = (word + piece[len(CONTINUATION):], start, i + 1)
        elif piece.startswith(CONTINUATION):
            if strict:
                raise ValueError("sequence starts with a continuation piece")
            groups.append((piece[len(CONTINUATION):], i, i + 1))
        else:
            groups.append((piece, i, i + 1))
    return groups


def detokenize(seq: TokenSequence) -> str:
    """Join pieces back into surface text; ``##`` pieces glue to the left."""
    return " ".join(word for word, _, _ in word_groups(seq.pieces, strict=True))


class WordPieceVocab:
    """Word-piece vocabulary with greedy longest-match-first segmentation."""

    def __init__(self, pieces):
        pieces = list(pieces)
        if len(set(pieces)) != len(pieces):
            raise ValueError("duplicate pieces in vocabulary")
        for tok in RESERVED:
            if tok not in pieces:
                raise ValueError(f"vocabulary is missing reserved entry {tok!r}")
        self.pieces: list[str] = pieces
        self.index: dict[str, int] = {p: i for i, p in enumerate(pieces)}
        self.unk_id = self.index[UNK]
        self.mask_id = self.index[MASK]
        self.pad_id = self.index[PAD]
        self.special_ids = (self.unk_id, self.mask_id, self.pad_id)
        self.continuation_ids = tuple(
            i for i, p in enumerate(pieces) if p.startswith(CONTINUATION)
        )

    def __len__(self) -> int:
        return len(self.pieces)

    def __contains__(self, piece: str) -> bool:
        return piece in self.index

    @classmethod
    def build(cls, pieces) -> "WordPieceVocab":
        """Construct from arbitrary pieces, prepending missing reserved entries."""
        pieces = list(pieces)
        head = [t for t in RESERVED if t not in pieces]
        return cls(head + pieces)

    @classmethod
    def from_file(cls, path) -> "WordPieceVocab":
        with open(path, encoding="utf-8") as fh:
            pieces = [line.strip() for line in fh if line.strip()]
        return cls(pieces)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for p in self.pieces:
                fh.write(p + "\n")

    def _segment(self, word: str):
        """Greedy longest-match pieces for one word, or None if unsegmentable."""
        if len(word) > MAX_WORD_CHARS:
            return None
        out = []
        start = 0
        while start < len(word):
            end = len(word)
            found = None
            while start < end:
                cand = word[start:end]
                if start > 0:
                    cand = CONTINUATION + cand
                if cand in self.index:
                    found = cand
                    break
                end -= 1
            if found is None:
                return None
            out.append(found)
            start = end
        return out

    def tokenize(self, text: str) -> TokenSequence:
        words = text.split()
        if not words:
            raise ValueError("cannot tokenize empty text")
        pieces: list[str] = []
        ids: list[int] = []
        spans: list[tuple[int, int]] = []
        for word in words:
            sub = self._segment(word)
            if sub is None:
                sub = [UNK]
            start = len(pieces)
            pieces.extend(sub)
            ids.extend(self.index[p] for p in sub)
            spans.append((start, len(pieces)))
        return TokenSequence(pieces, ids, spans, [False] * len(pieces))


def tokenize(text: str, vocab: WordPieceVocab) -> TokenSequence:
    return vocab.tokenize(text)


def sentence_representation(tokens, table: EmbeddingTable, stop=None) -> np.ndarray:
    """Sum of embeddings of non-stopword tokens; absent tokens contribute zero."""
    vec = np.zeros(table.dimension)
    for tok in tokens:
        if stop is not None and tok in stop:
            continue
        v = table.get(tok)
        if v is not None:
            vec = vec + v
    return vec


def cosine_similarity(a, b) -> float:
    """Cosine in [-1, 1]; two zero vectors compare as 1.0, one zero as 0.0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


@dataclass
class WordPieceTrainConfig:
    steps: int = 2000
    batch_words: int = 5000
    learning_rate: float = 0.1
    # "word": copy the identically spelled word's vector; "zeros": all zero;
    # "residual": word init, then assign each corpus word's leftover vector to
    # its last unassigned piece (exact when those pieces are unique)
    init: str = "word"
    seed: int = 0


@dataclass
class WordPieceTraining:
    """Trained word-piece table plus the full-batch objective trace."""

    table: EmbeddingTable
    epoch_objectives: list[float]  # mean L1 error per corpus word, one per epoch
    skipped_words: int = 0


def train_wordpiece_embeddings(
    corpus,
    word_table: EmbeddingTable,
    vocab: WordPieceVocab,
    config: WordPieceTrainConfig | None = None,
) -> WordPieceTraining:
    """Fit piece vectors so piece sums approximate word vectors in L1 norm.

    Stochastic subgradient descent: each step samples ``batch_words`` words
    (with replacement) from the corpus stream and nudges the rows touched by
    their tokenizations along sign(residual). The step size decays as
    lr/sqrt(t). The full-batch objective is evaluated at epoch boundaries
    and tracks the best iterate seen so far, which is also what the returned
    table holds; the reported per-epoch objective therefore never increases.
    """
    cfg = config or WordPieceTrainConfig()
    if cfg.init not in ("word", "zeros", "residual"):
        raise ValueError(f"unknown init {cfg.init!r}")
    dim = word_table.dimension

    kept: list[str] = []
    skipped = 0
    for word in corpus:
        if word in word_table:
            kept.append(word)
        else:
            skipped += 1
    if skipped:
        logger.warning("skipping %d corpus words without word embeddings", skipped)

    weights = np.zeros((len(vocab), dim))
    assigned = set()
    if cfg.init in ("word", "residual"):
        for pid, piece in enumerate(vocab.pieces):
            if piece in RESERVED:
                continue
            vec = word_table.get(piece)
            if vec is not None:
                weights[pid] = vec
                assigned.add(pid)
    if cfg.init == "residual":
        for word in sorted(set(kept)):
            sub = vocab._segment(word)
            if sub is None:
                continue
            pids = [vocab.index[p] for p in sub]
            open_pids = [pid for pid in pids if pid not in assigned]
            if not open_pids:
                continue
            target = word_table.get(word)
            residual = target - weights[pids].sum(axis=0)
            weights[open_pids[-1]] = residual
            assigned.update(open_pids[-1:])

    def finish(objectives):
        entries = {}
        for pid, piece in enumerate(vocab.pieces):
            if piece in (MASK, PAD):
                continue
            entries[piece] = weights[pid]
        table = EmbeddingTable(dim, entries, level="word-piece")
        return WordPieceTraining(table, objectives, skipped)

    if not kept:
        return finish([])

    unique = sorted(set(kept))
    uindex = {w: i for i, w in enumerate(unique)}
    piece_rows = []
    for w in unique:
        sub = vocab._segment(w)
        if sub is None:
            sub = [UNK]
        piece_rows.append(np.array([vocab.index[p] for p in sub]))
    targets = word_table.matrix(unique)
    corpus_idx = np.array([uindex[w] for w in kept])
    n = len(corpus_idx)

    def objective(mat):
        total = 0.0
        counts = np.bincount(corpus_idx, minlength=len(unique))
        for u, cnt in enumerate(counts):
            if cnt == 0:
                continue
            resid = targets[u] - mat[piece_rows[u]].sum(axis=0)
            total += cnt * float(np.abs(resid).sum())
        return total / n

    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_words))
    best_weights = weights.copy()
    best_obj = objective(weights)
    objectives: list[float] = []

    for t in range(1, cfg.steps + 1):
        batch = corpus_idx[rng.integers(0, n, size=cfg.batch_words)]
        uniq, counts = np.unique(batch, return_counts=True)
        lr_t = cfg.learning_rate / math.sqrt(t)
        for u, cnt in zip(uniq, counts):
            rows = piece_rows[u]
            resid = targets[u] - weights[rows].sum(axis=0)
            step = (lr_t * cnt / cfg.batch_words) * np.sign(resid)
            np.add.at(weights, rows, step)
        if t % steps_per_epoch == 0 or t == cfg.steps:
            obj = objective(weights)
            if obj < best_obj:
                best_obj = obj
                best_weights = weights.copy()
            objectives.append(best_obj)

    weights = best_weights
    return finish(objectives)
