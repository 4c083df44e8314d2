"""Chain-level behavior: snapshots, determinism, sweeps, entity
preservation, the hard-constraint feasible set, and batch execution."""

import itertools

import numpy as np
import pytest

from advrewrite.lexicon import StopwordSet, TokenSequence, WordPieceVocab, detokenize
from advrewrite.models import MaskedLanguageModel, UniformMaskedLM, dictionary_ner
from advrewrite.sampler import (
    EnforcingConfig,
    SamplerConfig,
    batch_sample,
    run_chain,
)

from conftest import make_table


def simple_setup(sigma=0.0, kappa=0.0, pieces=("p", "q", "r"), entries=None,
                 target=None):
    vocab = WordPieceVocab.build(list(pieces))
    entries = entries or {p: [1.0, 0.0] for p in pieces}
    table = make_table(entries, level="word-piece")
    target = np.asarray(target if target is not None else [1.0, 0.0], float)
    cfg = EnforcingConfig(sigma=sigma, kappa=kappa, wp_table=table,
                          target_repr=target, vocab=vocab, stop=StopwordSet())
    return vocab, UniformMaskedLM(vocab), cfg


class RecordingMLM(MaskedLanguageModel):
    """Uniform rows that remember which positions were queried."""

    def __init__(self, vocab):
        self.inner = UniformMaskedLM(vocab)
        self.vocab_size = len(vocab)
        self.queries = []

    def log_rows(self, piece_ids, mask_positions):
        self.queries.extend(mask_positions)
        return self.inner.log_rows(piece_ids, mask_positions)


class TestRunChain:
    def test_zero_iterations_single_snapshot(self):
        vocab, mlm, cfg = simple_setup()
        seed = vocab.tokenize("p q")
        state = run_chain(seed, mlm, cfg, SamplerConfig(iterations=0))
        assert len(state.snapshots) == 1
        assert state.snapshots[0].pieces == seed.pieces
        assert detokenize(state.current) == "p q"

    def test_fixed_seed_reproducible(self):
        vocab, mlm, cfg = simple_setup()
        seed = vocab.tokenize("p q r p")
        runs = []
        for _ in range(2):
            state = run_chain(seed, mlm, cfg,
                              SamplerConfig(iterations=5, seed=123, snapshot_every=2))
            runs.append([tuple(s.pieces) for s in state.snapshots])
        assert runs[0] == runs[1]

    def test_sweep_block_one_visits_positions_in_order(self):
        vocab = WordPieceVocab.build(["p", "q", "r"])
        mlm = RecordingMLM(vocab)
        table = make_table({"p": [1.0]}, level="word-piece")
        cfg = EnforcingConfig(sigma=0.0, kappa=0.0, wp_table=table,
                              target_repr=np.array([1.0]), vocab=vocab,
                              stop=StopwordSet())
        seed = vocab.tokenize("p q r")
        run_chain(seed, mlm, cfg, SamplerConfig(iterations=2, block_size=1, seed=0))
        assert mlm.queries == [0, 1, 2, 0, 1, 2]

    def test_sequence_length_invariant(self):
        vocab, mlm, cfg = simple_setup()
        seed = vocab.tokenize("p q r p q")
        state = run_chain(seed, mlm, cfg,
                          SamplerConfig(iterations=4, block_size=2, seed=5))
        assert len(state.current) == len(seed)
        for snap in state.snapshots:
            assert len(snap) == len(seed)

    def test_snapshot_cadence(self):
        vocab, mlm, cfg = simple_setup()
        seed = vocab.tokenize("p q r p")  # 4 steps per iteration at block 1
        state = run_chain(seed, mlm, cfg,
                          SamplerConfig(iterations=2, snapshot_every=3, seed=1))
        # step 0, every 3rd step, and iteration ends (4, 8), deduplicated
        assert state.snapshot_steps == [0, 3, 4, 6, 8]

    def test_random_policy_runs_n_steps(self):
        vocab, mlm, cfg = simple_setup()
        seed = vocab.tokenize("p q r p q r")
        state = run_chain(seed, mlm, cfg,
                          SamplerConfig(iterations=7, position_policy="random",
                                        block_size=2, seed=2))
        assert state.step_count == 7
        assert state.snapshot_steps == list(range(8))


class TestHardConstraintFeasibleSet:
    def enumerate_feasible(self, vocab, table, target, length=2):
        def rep(pieces):
            total = np.zeros(len(target))
            for piece in pieces:
                vec = table.get(piece)
                if vec is not None:
                    total += vec
            return total

        real = [p for p in vocab.pieces if not p.startswith("<")]
        return {
            tup for tup in itertools.product(real, repeat=length)
            if np.allclose(rep(tup), target)
        }

    def test_injective_table_chain_never_leaves_feasible_set(self):
        """With kappa=1e6 and sigma=1.0 the chain must stay inside the set of
        sequences whose representation equals the target exactly; the set is
        enumerated by brute force over all |V|^2 sequences."""
        entries = {"p": [1.0, 0.0], "q": [0.0, 1.0], "c": [1.0, 1.0], "d": [0.0, 0.0]}
        vocab, mlm, cfg = simple_setup(sigma=1.0, kappa=1e6,
                                       pieces=("p", "q", "c", "d"),
                                       entries=entries, target=[1.0, 1.0])
        feasible = self.enumerate_feasible(vocab, cfg.wp_table, [1.0, 1.0])
        assert ("p", "q") in feasible and ("c", "d") in feasible

        state = run_chain(vocab.tokenize("p q"), mlm, cfg,
                          SamplerConfig(iterations=500, seed=3, snapshot_every=1))
        assert state.step_count == 1000
        visited = {tuple(s.pieces) for s in state.snapshots}
        assert visited <= feasible

    def test_synonym_pair_walks_inside_feasible_set(self):
        """A synonym pair (two pieces with one embedding) makes part of the
        feasible set reachable by single-position moves; the chain must visit
        only feasible states and does move between the synonyms."""
        entries = {"p": [1.0, 0.0], "c": [1.0, 0.0], "q": [0.0, 1.0], "d": [5.0, 5.0]}
        vocab, mlm, cfg = simple_setup(sigma=1.0, kappa=1e6,
                                       pieces=("p", "q", "c", "d"),
                                       entries=entries, target=[1.0, 1.0])
        feasible = self.enumerate_feasible(vocab, cfg.wp_table, [1.0, 1.0])
        assert {("p", "q"), ("c", "q")} <= feasible

        state = run_chain(vocab.tokenize("p q"), mlm, cfg,
                          SamplerConfig(iterations=500, seed=3, snapshot_every=1))
        visited = {tuple(s.pieces) for s in state.snapshots}
        assert visited <= feasible
        assert {("p", "q"), ("c", "q")} <= visited


class TestEntityPreservation:
    def test_entities_survive_every_snapshot(self):
        vocab = WordPieceVocab.build(["p", "q", "r", "Nokor", "Karm", "Group"])
        table = make_table({p: [1.0, 0.0] for p in ["p", "q", "r"]},
                           level="word-piece")
        cfg = EnforcingConfig(sigma=0.0, kappa=0.0, wp_table=table,
                              target_repr=np.array([1.0, 0.0]), vocab=vocab,
                              stop=StopwordSet())
        mlm = UniformMaskedLM(vocab)
        ner = dictionary_ner({"Nokor", "Karm Group"})
        text = "p Nokor q Karm Group r"
        entities = ner.entities(text)
        assert set(entities) == {"Nokor", "Karm Group"}
        for block in (1, 2, 3):
            for seed in range(5):
                state = run_chain(vocab.tokenize(text), mlm, cfg,
                                  SamplerConfig(iterations=6, block_size=block,
                                                seed=seed, snapshot_every=1),
                                  entities=entities)
                for snap in state.snapshots:
                    surface = detokenize(snap)
                    for phrase in entities:
                        assert phrase in surface

    def test_statically_protected_positions_untouched(self):
        vocab, mlm, cfg = simple_setup()
        seed = vocab.tokenize("p q r")
        seed.protected[0] = True
        state = run_chain(seed, mlm, cfg, SamplerConfig(iterations=10, seed=4))
        assert state.current.pieces[0] == "p"


class TestBatchSample:
    def test_batch_of_one_equals_run_chain(self):
        vocab, mlm, cfg = simple_setup()
        seed = vocab.tokenize("p q r")
        scfg = SamplerConfig(iterations=3, seed=0)
        single = run_chain(seed, mlm, cfg, scfg,
                           rng=np.random.default_rng(np.random.SeedSequence(9).spawn(1)[0]))
        batch = batch_sample([seed], mlm, cfg, scfg, base_seed=9)
        assert [s.pieces for s in batch[0].snapshots] == [s.pieces for s in single.snapshots]

    def test_identical_seeds_distinct_streams(self):
        vocab, mlm, cfg = simple_setup()
        seed = vocab.tokenize("p q r p q r")
        states = batch_sample([seed, seed], mlm, cfg,
                              SamplerConfig(iterations=5), base_seed=10)
        assert states[0].current.pieces != states[1].current.pieces

    def test_parallel_equals_sequential(self):
        vocab, mlm, cfg = simple_setup()
        seeds = [vocab.tokenize(t) for t in ("p q", "q r p", "r r")]
        scfg = SamplerConfig(iterations=6, snapshot_every=2)
        sequential = batch_sample(seeds, mlm, cfg, scfg, base_seed=11, workers=1)
        parallel = batch_sample(seeds, mlm, cfg, scfg, base_seed=11, workers=3)
        for a, b in zip(sequential, parallel):
            assert [s.pieces for s in a.snapshots] == [s.pieces for s in b.snapshots]
            assert a.snapshot_steps == b.snapshot_steps
