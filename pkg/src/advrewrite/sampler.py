"""Conditional Gibbs rewriting over word-piece sequences.

Each step masks a block of positions and refills them left to right. The
proposal for a position multiplies the masked-LM conditional with a soft
semantic weight exp(-kappa * max(0, sigma - similarity)), computed for every
vocabulary candidate at once from trained word-piece embeddings: summing the
unmasked context once into a vector c reduces the 30k-candidate similarity
scan to one matrix row-add. Entity phrases recognized on the original text
are never sampled out of their last remaining occurrence.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .lexicon import (
    MASK,
    PAD,
    EmbeddingTable,
    StopwordSet,
    TokenSequence,
    WordPieceVocab,
    word_groups,
)
from .models import MaskedLanguageModel


def candidate_contributions(vocab: WordPieceVocab, table: EmbeddingTable,
                            stop: StopwordSet | None = None) -> np.ndarray:
    """Per-piece representation contributions, one row per vocabulary entry.

    Stopword pieces, reserved mask/pad entries, and pieces without an
    embedding contribute zero, mirroring the stopword indicator in the
    sentence representation.
    """
    out = np.zeros((len(vocab), table.dimension))
    for pid, piece in enumerate(vocab.pieces):
        if piece in (MASK, PAD):
            continue
        if stop is not None and piece in stop:
            continue
        vec = table.get(piece)
        if vec is not None:
            out[pid] = vec
    return out


@dataclass
class EnforcingConfig:
    """Soft semantic constraint toward a fixed target representation."""

    sigma: float
    kappa: float
    wp_table: EmbeddingTable
    target_repr: np.ndarray
    vocab: WordPieceVocab
    stop: StopwordSet | None = None
    contributions: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError("sigma must lie in [0, 1]")
        if self.kappa < 0.0:
            raise ValueError("kappa must be non-negative")
        self.target_repr = np.asarray(self.target_repr, dtype=float)
        if self.contributions is None:
            self.contributions = candidate_contributions(self.vocab, self.wp_table, self.stop)


@dataclass
class SamplerConfig:
    iterations: int = 10
    block_size: int = 1
    position_policy: str = "sweep"  # or "random"
    snapshot_every: int = 10
    seed: int = 0
    # optional acceptance predicate (old_piece, new_piece, scores) -> bool;
    # None means always accept the proposed piece
    decision: object = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if self.position_policy not in ("sweep", "random"):
            raise ValueError(f"unknown position policy {self.position_policy!r}")


@dataclass
class ChainState:
    current: TokenSequence
    step_count: int = 0
    snapshots: list[TokenSequence] = field(default_factory=list)
    snapshot_steps: list[int] = field(default_factory=list)
    rng: np.random.Generator | None = None

    def take_snapshot(self) -> None:
        if self.snapshot_steps and self.snapshot_steps[-1] == self.step_count:
            return
        self.snapshots.append(self.current.copy())
        self.snapshot_steps.append(self.step_count)


def candidate_similarities(state: TokenSequence, masked_positions, cfg: EnforcingConfig) -> np.ndarray:
    """Cosine between the target and the sentence with each candidate filled in.

    c sums the contributions of unmasked positions; the candidate row add
    c + E'[z] then scores all vocabulary entries in one pass. Masked
    positions contribute zero.
    """
    masked = list(masked_positions)
    if not masked:
        raise ValueError("masked_positions must be non-empty")
    ids = np.asarray(state.piece_ids)
    keep = np.ones(len(ids), dtype=bool)
    keep[masked] = False
    if keep.any():
        context = cfg.contributions[ids[keep]].sum(axis=0)
    else:
        context = np.zeros(cfg.contributions.shape[1])
    rows = cfg.contributions + context
    target = cfg.target_repr
    dots = rows @ target
    row_norms = np.linalg.norm(rows, axis=1)
    target_norm = float(np.linalg.norm(target))
    denom = row_norms * target_norm
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = np.where(denom > 0.0, dots / np.where(denom > 0.0, denom, 1.0), 0.0)
    if target_norm == 0.0:
        sims = np.where(row_norms == 0.0, 1.0, 0.0)
    else:
        sims = np.where(row_norms == 0.0, 0.0, sims)
    return np.clip(sims, -1.0, 1.0)


def log_enforcing_weights(similarities, sigma: float, kappa: float) -> np.ndarray:
    return -kappa * np.maximum(0.0, sigma - np.asarray(similarities, dtype=float))


def enforcing_distribution(similarities, sigma: float, kappa: float) -> np.ndarray:
    """Unnormalized weights exp(-kappa * max(0, sigma - sim)); kappa=0 ignores
    the constraint entirely."""
    return np.exp(log_enforcing_weights(similarities, sigma, kappa))


def proposal_distribution(lm_logrow, enforce_weights=None, *, log_weights=None,
                          exclude_ids=()) -> np.ndarray:
    """Normalized product of the LM row and the enforcing weights, combined in
    log space so that penalties as large as kappa*sigma ~ 1e4 stay finite."""
    logits = np.asarray(lm_logrow, dtype=float).copy()
    if log_weights is not None:
        logits = logits + np.asarray(log_weights, dtype=float)
    elif enforce_weights is not None:
        weights = np.asarray(enforce_weights, dtype=float)
        if weights.shape != logits.shape:
            raise ValueError("enforcing weights and LM row differ in length")
        with np.errstate(divide="ignore"):
            logits = logits + np.log(weights)
    exclude = list(exclude_ids)
    if exclude:
        logits[exclude] = -np.inf
    peak = logits.max()
    if not np.isfinite(peak):
        raise ValueError("proposal distribution has no admissible tokens")
    probs = np.exp(logits - peak)
    return probs / probs.sum()


def _phrase_present(pieces, phrase_words) -> bool:
    words = [word for word, _, _ in word_groups(pieces, strict=False)]
    n = len(phrase_words)
    return any(words[i:i + n] == phrase_words
               for i in range(len(words) - n + 1))


def protected_positions(state: TokenSequence, entities) -> set[int]:
    """Positions inside the only remaining occurrence of some entity phrase.

    Entities with two or more current occurrences protect nothing; with
    overlapping occurrences a position is protected iff every occurrence of
    the phrase covers it (so a fill can never erase the phrase entirely).
    """
    protected: set[int] = set()
    if not entities:
        return protected
    groups = word_groups(state.pieces, strict=False)
    words = [word for word, _, _ in groups]
    for phrase in entities:
        phrase_words = phrase.split()
        n = len(phrase_words)
        if n == 0 or n > len(words):
            continue
        occurrences = []
        for i in range(len(words) - n + 1):
            if words[i:i + n] == phrase_words:
                start = groups[i][1]
                end = groups[i + n - 1][2]
                occurrences.append(set(range(start, end)))
        if occurrences:
            protected |= set.intersection(*occurrences)
    return protected


def sample_step(state: ChainState, positions, mlm: MaskedLanguageModel,
                cfg: EnforcingConfig, rng: np.random.Generator, *,
                entities=(), decision=None) -> ChainState:
    """One blocked Gibbs step: mask the block, then refill left to right.

    The entity guard works on the view in which still-masked positions keep
    their previous tokens: positions inside an entity's only occurrence are
    skipped outright, and any draw whose placement would erase the last
    occurrence of an entity (for example a continuation piece gluing onto
    the phrase's final word) is rejected and the previous token restored.
    Statically protected positions are never touched. ``decision`` may veto
    a proposal, keeping the previous token.
    """
    seq = state.current
    length = len(seq)
    positions = sorted(set(int(p) for p in positions))
    if not positions:
        raise ValueError("sample_step needs at least one position")
    if positions[0] < 0 or positions[-1] >= length:
        raise ValueError(f"positions {positions} out of range for length {length}")

    previous = {p: (seq.pieces[p], seq.piece_ids[p]) for p in positions}
    fill = [p for p in positions if not seq.protected[p]]
    for p in fill:
        seq.pieces[p] = MASK
        seq.piece_ids[p] = cfg.vocab.mask_id

    remaining = set(fill)
    for pos in fill:
        view = None
        if entities:
            view = seq.copy()
            for q in remaining:
                view.pieces[q], view.piece_ids[q] = previous[q]
            if pos in protected_positions(view, entities):
                seq.pieces[pos], seq.piece_ids[pos] = previous[pos]
                remaining.discard(pos)
                continue
        row = mlm.log_rows(seq.piece_ids, [pos])[0]
        sims = candidate_similarities(seq, sorted(remaining), cfg)
        logw = log_enforcing_weights(sims, cfg.sigma, cfg.kappa)
        exclude = list(cfg.vocab.special_ids)
        if pos == 0:
            exclude.extend(cfg.vocab.continuation_ids)
        probs = proposal_distribution(row, log_weights=logw, exclude_ids=exclude)
        new_id = int(rng.choice(len(probs), p=probs))
        old_piece, old_id = previous[pos]
        if decision is not None:
            scores = {"similarity": float(sims[new_id]), "proposal": float(probs[new_id])}
            if not decision(old_piece, cfg.vocab.pieces[new_id], scores):
                new_id = old_id
        if entities and new_id != old_id:
            view.pieces[pos] = cfg.vocab.pieces[new_id]
            view.piece_ids[pos] = new_id
            for phrase in entities:
                words = phrase.split()
                if not _phrase_present(view.pieces, words):
                    view.pieces[pos], view.piece_ids[pos] = previous[pos]
                    if _phrase_present(view.pieces, words):
                        new_id = old_id
                        break
                    view.pieces[pos] = cfg.vocab.pieces[new_id]
                    view.piece_ids[pos] = new_id
        seq.piece_ids[pos] = new_id
        seq.pieces[pos] = cfg.vocab.pieces[new_id]
        remaining.discard(pos)

    state.step_count += 1
    return state


def run_chain(seed_seq: TokenSequence, mlm: MaskedLanguageModel,
              enforce_cfg: EnforcingConfig, sampler_cfg: SamplerConfig,
              entities=(), rng: np.random.Generator | None = None) -> ChainState:
    """Run N iterations of blocked Gibbs sampling from ``seed_seq``.

    Under the sweep policy an iteration visits positions 0..l-1 in blocks of
    ``block_size``; under the random policy each iteration is a single block
    step at a random start. Snapshots are taken at step 0, every
    ``snapshot_every`` steps, and at iteration ends.
    """
    if len(seed_seq) < 1:
        raise ValueError("seed sequence must be non-empty")
    if rng is None:
        rng = np.random.default_rng(sampler_cfg.seed)
    state = ChainState(seed_seq.copy(), rng=rng)
    state.take_snapshot()
    length = len(seed_seq)
    block = min(sampler_cfg.block_size, length)
    decision = sampler_cfg.decision

    def step(positions):
        sample_step(state, positions, mlm, enforce_cfg, rng,
                    entities=entities, decision=decision)
        if state.step_count % sampler_cfg.snapshot_every == 0:
            state.take_snapshot()

    if sampler_cfg.position_policy == "sweep":
        starts = list(range(0, length, block))
        for _ in range(sampler_cfg.iterations):
            for start in starts:
                step(list(range(start, min(start + block, length))))
            state.take_snapshot()
    else:
        for _ in range(sampler_cfg.iterations):
            start = int(rng.integers(0, length - block + 1)) if length > block else 0
            step(list(range(start, start + block)))
            state.take_snapshot()
    return state


def batch_sample(seeds, mlm: MaskedLanguageModel, enforce_cfgs, sampler_cfg: SamplerConfig,
                 *, entities=None, base_seed: int = 0, workers: int = 1) -> list[ChainState]:
    """Run one chain per seed with independent RNG streams derived from
    (base_seed, index); results are identical whether chains run
    sequentially or on a thread pool."""
    seeds = list(seeds)
    if isinstance(enforce_cfgs, EnforcingConfig):
        enforce_cfgs = [enforce_cfgs] * len(seeds)
    if entities is None:
        entities = [()] * len(seeds)
    elif entities and isinstance(entities[0], str):
        entities = [entities] * len(seeds)
    if not (len(seeds) == len(enforce_cfgs) == len(entities)):
        raise ValueError("seeds, enforcing configs, and entities differ in length")

    streams = np.random.SeedSequence(base_seed).spawn(len(seeds))

    def run(idx: int) -> ChainState:
        rng = np.random.default_rng(streams[idx])
        return run_chain(seeds[idx], mlm, enforce_cfgs[idx], sampler_cfg,
                         entities[idx], rng=rng)

    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, range(len(seeds))))
    return [run(i) for i in range(len(seeds))]
