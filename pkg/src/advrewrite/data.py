"""Dataset ingestion and deterministic toy-corpus generation.

The toy generator builds a synthetic topic corpus whose class-indicative
words carry class-clustered embeddings on top of a shared base direction, so
a linear classifier separates the classes while class-word swaps keep the
sentence representation close enough to pass the threat model. It emits
every file the pipeline needs: dataset JSONL, word and word-piece embedding
files, a word-piece vocabulary, stopwords, and an entity lexicon.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lexicon import (
    CONTINUATION,
    EmbeddingTable,
    StopwordSet,
    WordPieceVocab,
    train_wordpiece_embeddings,
    WordPieceTrainConfig,
)


@dataclass
class Example:
    id: object
    label: int
    text: str | None = None
    premise: str | None = None
    hypothesis: str | None = None

    def to_dict(self) -> dict:
        out = {"id": self.id, "label": self.label}
        if self.text is not None:
            out["text"] = self.text
        else:
            out["premise"] = self.premise
            out["hypothesis"] = self.hypothesis
        return out


@dataclass
class Dataset:
    examples: list[Example]
    num_classes: int
    task: str = "classification"
    cased: bool = True


def load_dataset(path, task: str = "classification", num_classes: int | None = None,
                 cased: bool = True) -> Dataset:
    """Read a JSONL dataset; classification rows need "text", NLI rows need
    "premise" and "hypothesis". Missing ids are assigned from the row index."""
    if task not in ("classification", "nli"):
        raise ValueError(f"unknown task {task!r}")
    examples: list[Example] = []
    with open(path, encoding="utf-8") as fh:
        for index, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"record {index}: invalid JSON") from exc
            if "label" not in row:
                raise ValueError(f"record {index}: missing 'label'")
            label = row["label"]
            if not isinstance(label, int) or label < 0:
                raise ValueError(f"record {index}: label must be a non-negative integer")
            if num_classes is not None and label >= num_classes:
                raise ValueError(
                    f"record {index}: label {label} outside [0, {num_classes})"
                )
            rid = row.get("id", index)
            if task == "classification":
                if "text" not in row or not isinstance(row["text"], str):
                    raise ValueError(f"record {index}: missing 'text'")
                examples.append(Example(id=rid, label=label, text=row["text"]))
            else:
                for key in ("premise", "hypothesis"):
                    if key not in row or not isinstance(row[key], str):
                        raise ValueError(f"record {index}: missing {key!r}")
                examples.append(Example(id=rid, label=label, premise=row["premise"],
                                        hypothesis=row["hypothesis"]))
    inferred = num_classes if num_classes is not None else (
        max((ex.label for ex in examples), default=-1) + 1
    )
    return Dataset(examples, num_classes=inferred, task=task, cased=cased)


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for example in dataset.examples:
            fh.write(json.dumps(example.to_dict(), sort_keys=True) + "\n")


TOY_STOPWORDS = ["the", "a", "is", "of", "on", "and", "to", "in", "it", "as"]
TOY_ENTITIES = ["Nokor", "Vexim", "Karm Group"]
_CLASS_PREFIXES = ["zor", "mek", "tav", "rul", "pon", "gex", "lud", "vab"]
_SHARED_PREFIX = "mun"


@dataclass
class ToyCorpusConfig:
    classes: int = 2
    class_vocab: int = 8
    shared_vocab: int = 8
    train_per_class: int = 250
    test_per_class: int = 50
    class_words_per_example: int = 3
    shared_words_per_example: int = 3
    stopwords_per_example: int = 3
    split_words_per_class: int = 2
    split_words_shared: int = 3
    entity_rate: float = 0.5
    dim: int = 12
    class_scale: float = 0.6
    noise_scale: float = 0.05
    anchor_scale: float = 2.4
    seed: int = 0
    task: str = "classification"

    def __post_init__(self):
        if not 1 <= self.classes <= len(_CLASS_PREFIXES):
            raise ValueError(f"classes must lie in [1, {len(_CLASS_PREFIXES)}]")
        if self.dim < self.classes + self.split_words_shared + 2:
            raise ValueError("dim too small for class and anchor axes")
        if self.split_words_per_class > self.class_vocab:
            raise ValueError("more split words than class words")
        if self.split_words_shared > self.shared_vocab:
            raise ValueError("more split words than shared words")


@dataclass
class ToyCorpus:
    train: Dataset
    test: Dataset
    word_table: EmbeddingTable
    wp_table: EmbeddingTable
    vocab: WordPieceVocab
    stopwords: list[str]
    entities: list[str]
    paths: dict = field(default_factory=dict)


def _toy_words(cfg: ToyCorpusConfig):
    """Class and shared word lists.

    The tail of each class list is two-piece: the base doubled, so each
    split word tokenizes to (base, ##base) with a continuation piece unique
    to that word. The halves are strongly correlated under a neighbor-count
    LM, which is what blocked sampling is meant to overcome.
    """
    letters = string.ascii_lowercase

    def build(prefix: str, size: int, split: int) -> list[str]:
        words = []
        for j in range(size):
            base = f"{prefix}{letters[j]}"
            words.append(base + base if j >= size - split else base)
        return words

    class_words = [
        build(_CLASS_PREFIXES[c], cfg.class_vocab, cfg.split_words_per_class)
        for c in range(cfg.classes)
    ]
    shared_words = build(_SHARED_PREFIX, cfg.shared_vocab, cfg.split_words_shared)
    return class_words, shared_words


def generate_toy_corpus(cfg: ToyCorpusConfig | None = None, out_dir=None) -> ToyCorpus:
    """Deterministic synthetic corpus plus all pipeline input files."""
    cfg = cfg or ToyCorpusConfig()
    rng = np.random.default_rng(cfg.seed)
    class_words, shared_words = _toy_words(cfg)
    stop_list = list(TOY_STOPWORDS)
    entity_phrases = list(TOY_ENTITIES)
    entity_words = sorted({w for phrase in entity_phrases for w in phrase.split()})

    base = np.zeros(cfg.dim)
    base[0] = 1.0
    entries: dict[str, np.ndarray] = {}

    def add_word(word: str, center: np.ndarray) -> None:
        entries[word] = center + cfg.noise_scale * rng.normal(size=cfg.dim)

    for c, words in enumerate(class_words):
        axis = np.zeros(cfg.dim)
        axis[1 + c] = cfg.class_scale
        for word in words:
            add_word(word, base + axis)
    for word in shared_words:
        add_word(word, base)
    for word in stop_list:
        add_word(word, base)
    for word in entity_words:
        add_word(word, base)
    # The base half of each shared split word doubles as a standalone lexicon
    # word with a large vector along its own spare axis. Its trained piece
    # embedding and the suffix's then cancel inside the split word, so
    # replacing either half alone wrecks the similarity; only a block that
    # masks the pair jointly can rewrite it.
    spare_axes = iter(range(cfg.dim - 1, cfg.classes, -1))
    for word in shared_words:
        if len(word) % 2 == 0 and word[:len(word) // 2] == word[len(word) // 2:]:
            axis = np.zeros(cfg.dim)
            axis[next(spare_axes)] = cfg.anchor_scale
            add_word(word[:len(word) // 2], base + axis)
    word_table = EmbeddingTable(cfg.dim, entries, level="word")

    pieces = set(stop_list) | set(entity_words)
    for words in class_words + [shared_words]:
        for word in words:
            if len(word) % 2 == 0 and word[:len(word) // 2] == word[len(word) // 2:]:
                base = word[:len(word) // 2]
                pieces.add(base)
                pieces.add(CONTINUATION + base)
            else:
                pieces.add(word)
    vocab = WordPieceVocab.build(sorted(pieces))

    def draw(pool, count: int) -> list[str]:
        if not pool or count <= 0:
            return []
        return [pool[int(rng.integers(len(pool)))] for _ in range(count)]

    def sentence(label: int | None) -> str:
        words: list[str] = []
        if label is not None:
            words += draw(class_words[label], cfg.class_words_per_example)
        words += draw(shared_words, cfg.shared_words_per_example)
        words += draw(stop_list, cfg.stopwords_per_example)
        order = rng.permutation(len(words))
        words = [words[i] for i in order]
        if entity_phrases and rng.random() < cfg.entity_rate:
            phrase = entity_phrases[int(rng.integers(len(entity_phrases)))]
            where = int(rng.integers(len(words) + 1))
            words[where:where] = phrase.split()
        return " ".join(words)

    def build_split(count_per_class: int, start_id: int) -> Dataset:
        examples = []
        next_id = start_id
        for c in range(cfg.classes):
            for _ in range(count_per_class):
                if cfg.task == "nli":
                    examples.append(Example(id=next_id, label=c,
                                            premise=sentence(None),
                                            hypothesis=sentence(c)))
                else:
                    examples.append(Example(id=next_id, label=c, text=sentence(c)))
                next_id += 1
        return Dataset(examples, num_classes=cfg.classes, task=cfg.task, cased=True)

    train = build_split(cfg.train_per_class, 0)
    test = build_split(cfg.test_per_class, len(train.examples))

    corpus_words = []
    for example in train.examples:
        for text in (example.text, example.premise, example.hypothesis):
            if text:
                corpus_words.extend(text.split())
    wp_cfg = WordPieceTrainConfig(steps=600, batch_words=512, learning_rate=0.1,
                                  init="residual", seed=cfg.seed)
    wp_table = train_wordpiece_embeddings(corpus_words, word_table, vocab, wp_cfg).table

    corpus = ToyCorpus(train=train, test=test, word_table=word_table,
                       wp_table=wp_table, vocab=vocab, stopwords=stop_list,
                       entities=entity_phrases)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "train": out / "train.jsonl",
            "test": out / "test.jsonl",
            "word_embeddings": out / "words.vec",
            "wp_embeddings": out / "wordpieces.vec",
            "vocab": out / "wordpieces.txt",
            "stopwords": out / "stopwords.txt",
            "entities": out / "entities.txt",
        }
        save_dataset(train, paths["train"])
        save_dataset(test, paths["test"])
        word_table.save(paths["word_embeddings"])
        wp_table.save(paths["wp_embeddings"])
        vocab.save(paths["vocab"])
        with open(paths["stopwords"], "w", encoding="utf-8") as fh:
            fh.write("\n".join(stop_list) + "\n")
        with open(paths["entities"], "w", encoding="utf-8") as fh:
            fh.write("\n".join(entity_phrases) + "\n")
        corpus.paths = {k: str(v) for k, v in paths.items()}

    return corpus


def toy_stopword_set(corpus: ToyCorpus) -> StopwordSet:
    return StopwordSet(corpus.stopwords)
