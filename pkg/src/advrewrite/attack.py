"""Multi-round attack orchestration, success metrics, and report export.

An attack reruns the rewriting chain over a schedule of decreasing sigma
values, checks the classifier at every iteration end and snapshot, and skips
the remaining rounds once any candidate flips the prediction. Success is
decided post hoc by the threat model; records keep all scores so reports can
be regenerated without the models.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .lexicon import (
    EmbeddingTable,
    StopwordSet,
    TokenSequence,
    WordPieceVocab,
    detokenize,
)
from .models import Classifier, CausalScorer, EntityRecognizer, MaskedLanguageModel
from .sampler import (
    EnforcingConfig,
    SamplerConfig,
    candidate_contributions,
    run_chain,
)
from .threat import ThreatModelConfig, filter_adversarials, perplexity_ratio, word_similarity

logger = logging.getLogger(__name__)

# Published AG-news after-attack accuracies at (lambda=2, epsilon=0.95),
# embedded for report context only; desk-scale runs do not reproduce them.
REFERENCE_AFTER_ATTACK = {"textfooler": 84.0, "rewriting_block1": 76.8}

SCATTER_HEADER = ["id", "ppl_ratio", "similarity", "change_rate", "success"]


@dataclass
class RoundSchedule:
    """Per-round (sigma, iterations) pairs; sigmas must not increase."""

    rounds: list[tuple[float, int]]

    def __post_init__(self):
        sigmas = [s for s, _ in self.rounds]
        if any(a < b for a, b in zip(sigmas, sigmas[1:])):
            raise ValueError("round sigmas must be non-increasing")

    @classmethod
    def classification(cls) -> "RoundSchedule":
        return cls([(0.98, 50), (0.95, 50)])

    @classmethod
    def nli(cls) -> "RoundSchedule":
        return cls([(0.95, 10), (0.90, 10)])

    @classmethod
    def long_text(cls) -> "RoundSchedule":
        return cls([(0.98, 3), (0.95, 3)])

    @classmethod
    def preset(cls, name: str) -> "RoundSchedule":
        presets = {
            "classification": cls.classification,
            "nli": cls.nli,
            "long": cls.long_text,
        }
        if name not in presets:
            raise ValueError(f"unknown schedule preset {name!r}")
        return presets[name]()

    @classmethod
    def parse(cls, spec: str) -> "RoundSchedule":
        """Parse "0.98:50,0.95:50" into a schedule, or look up a preset name."""
        if ":" not in spec:
            return cls.preset(spec)
        rounds = []
        for part in spec.split(","):
            sigma, iters = part.split(":")
            rounds.append((float(sigma), int(iters)))
        return cls(rounds)


@dataclass
class Candidate:
    text: str
    step: int
    round_index: int
    predicted: int | None
    change_rate: float
    ppl_ratio: float | None = None
    similarity: float | None = None
    threat_ok: dict = field(default_factory=dict)

    def flips(self, label: int) -> bool:
        return self.predicted is not None and self.predicted != label

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "step": self.step,
            "round": self.round_index,
            "predicted": self.predicted,
            "change_rate": self.change_rate,
            "ppl_ratio": self.ppl_ratio,
            "similarity": self.similarity,
            "threat_ok": dict(sorted(self.threat_ok.items())),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Candidate":
        return cls(
            text=data["text"],
            step=data["step"],
            round_index=data["round"],
            predicted=data["predicted"],
            change_rate=data["change_rate"],
            ppl_ratio=data["ppl_ratio"],
            similarity=data["similarity"],
            threat_ok=dict(data.get("threat_ok", {})),
        )


@dataclass
class AttackRecord:
    id: object
    original: str
    label: int
    clean_prediction: int | None = None
    originally_misclassified: bool = False
    premise: str | None = None
    candidates: list[Candidate] = field(default_factory=list)
    success: dict = field(default_factory=dict)
    rounds_used: int = 0
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "original": self.original,
            "label": self.label,
            "clean_prediction": self.clean_prediction,
            "originally_misclassified": self.originally_misclassified,
            "premise": self.premise,
            "candidates": [c.to_dict() for c in self.candidates],
            "success": dict(sorted(self.success.items())),
            "rounds_used": self.rounds_used,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AttackRecord":
        return cls(
            id=data["id"],
            original=data["original"],
            label=data["label"],
            clean_prediction=data["clean_prediction"],
            originally_misclassified=data["originally_misclassified"],
            premise=data.get("premise"),
            candidates=[Candidate.from_dict(c) for c in data.get("candidates", [])],
            success=dict(data.get("success", {})),
            rounds_used=data.get("rounds_used", 0),
            error=data.get("error"),
        )


@dataclass
class AttackStack:
    """Model and lexicon bindings shared across one attack run."""

    vocab: WordPieceVocab
    wp_table: EmbeddingTable
    word_table: EmbeddingTable
    stop: StopwordSet
    mlms: list[MaskedLanguageModel]
    classifier: Classifier
    scorer: CausalScorer
    ner: EntityRecognizer | None = None
    contributions: np.ndarray = None

    def __post_init__(self):
        if self.contributions is None:
            self.contributions = candidate_contributions(self.vocab, self.wp_table, self.stop)

    def mlm_for_label(self, label: int) -> MaskedLanguageModel:
        if len(self.mlms) == 1:
            return self.mlms[0]
        if not 0 <= label < len(self.mlms):
            raise ValueError(f"no masked LM for label {label}")
        return self.mlms[label]


@dataclass
class AttackConfig:
    block_size: int = 1
    snapshot_every: int = 10
    kappa: float = 1000.0
    position_policy: str = "sweep"
    seed: int = 0
    include_premise: bool = False
    cased: bool = True
    decision: object = None


def change_rate(x: TokenSequence, u: TokenSequence) -> float:
    """Fraction of word-piece positions whose pieces differ."""
    if len(x) != len(u):
        raise ValueError(f"change_rate needs equal lengths, got {len(x)} vs {len(u)}")
    diff = sum(1 for a, b in zip(x.pieces, u.pieces) if a != b)
    return diff / len(x)


def _concat_protected(premise_seq: TokenSequence, hyp_seq: TokenSequence) -> TokenSequence:
    offset = len(premise_seq)
    spans = list(premise_seq.word_spans) + [
        (s + offset, e + offset) for s, e in hyp_seq.word_spans
    ]
    return TokenSequence(
        premise_seq.pieces + hyp_seq.pieces,
        premise_seq.piece_ids + hyp_seq.piece_ids,
        spans,
        [True] * offset + [False] * len(hyp_seq),
    )


def _tail(seq: TokenSequence, start: int) -> TokenSequence:
    pieces = seq.pieces[start:]
    return TokenSequence(
        pieces,
        seq.piece_ids[start:],
        [(i, i + 1) for i in range(len(pieces))],
        seq.protected[start:],
    )


def attack_example(example, stack: AttackStack, schedule: RoundSchedule,
                   cfg: AttackConfig, rng: np.random.Generator | None = None) -> AttackRecord:
    """Attack one labeled example through the round schedule.

    The classifier is queried for every snapshot (iteration ends plus the
    snapshot cadence); flip candidates and each round's final snapshot are
    recorded with their scores. A flip anywhere in a round skips the
    remaining rounds. Examples the classifier already gets wrong are skipped
    and marked. NLI examples rewrite only the hypothesis.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    is_pair = getattr(example, "premise", None) is not None
    norm = (lambda s: s) if cfg.cased else (lambda s: s.lower())
    if is_pair:
        premise = norm(example.premise)
        original = norm(example.hypothesis)
    else:
        premise = None
        original = norm(example.text)
    label = example.label

    record = AttackRecord(id=example.id, original=original, label=label, premise=premise)
    if is_pair:
        clean_probs = stack.classifier.predict_proba_pair(premise, original)
    else:
        clean_probs = stack.classifier.predict_proba(original)
    record.clean_prediction = int(np.argmax(clean_probs))
    if record.clean_prediction != label:
        record.originally_misclassified = True
        return record

    entities = stack.ner.entities(original) if stack.ner is not None else []
    hyp_seq = stack.vocab.tokenize(original)
    if is_pair and cfg.include_premise:
        seed_seq = _concat_protected(stack.vocab.tokenize(premise), hyp_seq)
        hyp_start = len(seed_seq) - len(hyp_seq)
    else:
        seed_seq = hyp_seq
        hyp_start = 0
    target = stack.contributions[np.asarray(seed_seq.piece_ids)].sum(axis=0)
    mlm = stack.mlm_for_label(label)

    seen: set[str] = set()
    flip_found = False
    for round_index, (sigma, iterations) in enumerate(schedule.rounds):
        enforce = EnforcingConfig(
            sigma=sigma, kappa=cfg.kappa, wp_table=stack.wp_table,
            target_repr=target, vocab=stack.vocab, stop=stack.stop,
            contributions=stack.contributions,
        )
        sampler_cfg = SamplerConfig(
            iterations=iterations, block_size=cfg.block_size,
            position_policy=cfg.position_policy,
            snapshot_every=cfg.snapshot_every, decision=cfg.decision,
        )
        chain = run_chain(seed_seq, mlm, enforce, sampler_cfg, entities, rng=rng)
        record.rounds_used = round_index + 1

        final_index = len(chain.snapshots) - 1
        for si in range(1, len(chain.snapshots)):
            snap = chain.snapshots[si]
            hyp_snap = _tail(snap, hyp_start) if hyp_start else snap
            text = detokenize(hyp_snap)
            if text in seen:
                continue
            if is_pair:
                predicted = int(np.argmax(stack.classifier.predict_proba_pair(premise, text)))
            else:
                predicted = int(np.argmax(stack.classifier.predict_proba(text)))
            flips = predicted != label
            if flips or si == final_index:
                seen.add(text)
                record.candidates.append(Candidate(
                    text=text,
                    step=chain.snapshot_steps[si],
                    round_index=round_index,
                    predicted=predicted,
                    change_rate=change_rate(hyp_seq, hyp_snap),
                ))
                if flips:
                    flip_found = True
        if flip_found:
            break

    for cand in record.candidates:
        cand.ppl_ratio = perplexity_ratio(original, cand.text, stack.scorer)
        cand.similarity = word_similarity(original, cand.text, stack.word_table, stack.stop)
    return record


def attack_dataset(dataset, stack: AttackStack, schedule: RoundSchedule,
                   setups, cfg: AttackConfig):
    """Attack every example, then filter per threat setup.

    Returns (records, summary). Per-example failures are logged and kept as
    failed attacks so they stay in the denominator.
    """
    examples = list(dataset.examples)
    streams = np.random.SeedSequence(cfg.seed).spawn(max(1, len(examples)))
    records: list[AttackRecord] = []
    for example, stream in zip(examples, streams):
        try:
            record = attack_example(example, stack, schedule, cfg,
                                    rng=np.random.default_rng(stream))
        except Exception as exc:
            logger.exception("attack failed on example %r", example.id)
            text = example.text if getattr(example, "text", None) else example.hypothesis
            record = AttackRecord(id=example.id, original=text, label=example.label,
                                  error=f"{type(exc).__name__}: {exc}")
        records.append(record)
    for setup in setups:
        filter_adversarials(records, setup)
    return records, summarize(records, setups)


def _scored(record: AttackRecord) -> bool:
    return bool(record.candidates)


def best_candidate(record: AttackRecord, label: str) -> Candidate | None:
    """Successful candidate with the highest similarity, else the best flip,
    else the final snapshot."""
    if not record.candidates:
        return None
    successes = [c for c in record.candidates
                 if c.flips(record.label) and c.threat_ok.get(label)]
    if successes:
        return max(successes, key=lambda c: c.similarity)
    flips = [c for c in record.candidates if c.flips(record.label)]
    if flips:
        return max(flips, key=lambda c: c.similarity)
    return record.candidates[-1]


def after_attack_accuracy(records, label: str) -> float:
    correct = sum(
        1 for r in records
        if not r.originally_misclassified and not r.success.get(label, False)
    )
    return correct / len(records)


def summarize(records, setups) -> dict:
    """Per-setup after-attack accuracy plus score and change-rate aggregates."""
    records = list(records)
    if not records:
        return {"examples": 0, "undefined": True}
    clean_correct = sum(1 for r in records if not r.originally_misclassified and r.error is None)
    summary = {
        "examples": len(records),
        "clean_accuracy": clean_correct / len(records),
        "errors": sum(1 for r in records if r.error is not None),
        "setups": {},
        "rounds_histogram": {},
        "reference_after_attack": dict(REFERENCE_AFTER_ATTACK),
    }
    rounds = Counter(r.rounds_used for r in records if not r.originally_misclassified)
    summary["rounds_histogram"] = {str(k): rounds[k] for k in sorted(rounds)}
    for setup in setups:
        label = setup if isinstance(setup, str) else setup.label
        best = [best_candidate(r, label) for r in records if _scored(r)]
        best = [b for b in best if b is not None]
        entry = {
            "after_attack_accuracy": after_attack_accuracy(records, label),
            "successes": sum(1 for r in records if r.success.get(label, False)),
        }
        for key, values in (
            ("mean_change_rate", [b.change_rate for b in best]),
            ("mean_ppl_ratio", [b.ppl_ratio for b in best if b.ppl_ratio is not None]),
            ("mean_similarity", [b.similarity for b in best if b.similarity is not None]),
        ):
            entry[key] = float(np.mean(values)) if values else None
        summary["setups"][label] = entry
    return summary


def export_scatter(records, label: str, path) -> tuple[int, int]:
    """One row per (original, best candidate); returns (rows, omitted).

    Records without candidates are omitted and counted in the footer line.
    """
    rows = 0
    omitted = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCATTER_HEADER)
        for record in records:
            cand = best_candidate(record, label)
            if cand is None:
                omitted += 1
                continue
            success = bool(record.success.get(label, False)
                           and cand.flips(record.label) and cand.threat_ok.get(label))
            writer.writerow([
                record.id,
                repr(float(cand.ppl_ratio)),
                repr(float(cand.similarity)),
                repr(float(cand.change_rate)),
                int(success),
            ])
            rows += 1
        fh.write(f"# rows={rows} omitted={omitted}\n")
    return rows, omitted


def read_scatter(path) -> list[dict]:
    """Parse a scatter export back into dicts (footer comment skipped)."""
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        for row in reader:
            entry = dict(zip(header, row))
            entry["ppl_ratio"] = float(entry["ppl_ratio"])
            entry["similarity"] = float(entry["similarity"])
            entry["change_rate"] = float(entry["change_rate"])
            entry["success"] = bool(int(entry["success"]))
            out.append(entry)
    return out


def save_records(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


def load_records(path) -> list[AttackRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(AttackRecord.from_dict(json.loads(line)))
    return records


def save_summary(summary: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
