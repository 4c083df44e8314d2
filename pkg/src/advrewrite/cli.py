"""Command-line interface: toy-corpus generation, model training, sampling,
attacks, threat filtering, and report regeneration.

Configuration precedence per flag: CLI value, then --config JSON (keys mirror
flag names with dashes replaced by underscores), then the built-in default.
The CBS_SEED environment variable overrides the default seed."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import data as data_mod
from .adapter import connect_external_model
from .lexicon import (
    StopwordSet,
    WordPieceTrainConfig,
    WordPieceVocab,
    load_word_embeddings,
    train_wordpiece_embeddings,
)
from .models import (
    CausalConfig,
    ClassifierConfig,
    MlmConfig,
    ToyCausalScorer,
    ToyMaskedLM,
    ToyTextClassifier,
    dictionary_ner,
    train_class_excluded_mlms,
    train_toy_causal,
    train_toy_classifier,
)
from .sampler import EnforcingConfig, SamplerConfig, run_chain
from .threat import ThreatModelConfig, in_threat_model
from .lexicon import sentence_representation


def _load_config(path):
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


class _Resolver:
    """flag > config file > default, with CBS_SEED backing the seed default."""

    def __init__(self, args):
        self.args = vars(args)
        self.config = _load_config(self.args.get("config"))

    def get(self, key, default=None):
        value = self.args.get(key)
        if value is not None:
            return value
        if key in self.config:
            return self.config[key]
        return default

    def seed(self):
        value = self.get("seed")
        if value is not None:
            return int(value)
        return int(os.environ.get("CBS_SEED", "0"))


def _is_endpoint(spec: str) -> bool:
    return spec.startswith(("tcp:", "pipe:")) or (
        ":" in spec and not Path(spec).exists()
    )


def _load_scorer(spec: str):
    if _is_endpoint(spec):
        return connect_external_model(spec, "scorer")
    with open(spec, encoding="utf-8") as fh:
        return ToyCausalScorer.from_dict(json.load(fh))


def _load_mlm(spec: str):
    if _is_endpoint(spec):
        return connect_external_model(spec, "mlm")
    with open(spec, encoding="utf-8") as fh:
        return ToyMaskedLM.from_dict(json.load(fh))


def _load_mlms(spec: str) -> list:
    """A directory of class-excluded model files, one model file, or a
    comma-separated list of files/endpoints."""
    path = Path(spec)
    if path.is_dir():
        files = sorted(path.glob("mlm_excluded_*.json"))
        if not files:
            raise FileNotFoundError(f"no mlm_excluded_*.json files in {spec}")
        return [_load_mlm(str(f)) for f in files]
    return [_load_mlm(part) for part in spec.split(",")]


def _parse_setups(spec: str, scorer, word_table, stop) -> list[ThreatModelConfig]:
    setups = []
    for part in spec.split(","):
        lam, eps = part.split(":")
        setups.append(ThreatModelConfig(float(lam), float(eps), scorer, word_table, stop))
    return setups


def _read_jsonl(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def _write_jsonl(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _cmd_gen_toy(args) -> int:
    res = _Resolver(args)
    cfg = data_mod.ToyCorpusConfig(
        classes=int(res.get("classes", 2)),
        class_vocab=int(res.get("class_vocab", 8)),
        shared_vocab=int(res.get("shared_vocab", 8)),
        train_per_class=int(res.get("train_per_class", 250)),
        test_per_class=int(res.get("test_per_class", 50)),
        entity_rate=float(res.get("entity_rate", 0.5)),
        dim=int(res.get("dim", 12)),
        seed=res.seed(),
        task=res.get("task", "classification"),
    )
    corpus = data_mod.generate_toy_corpus(cfg, out_dir=args.out)
    print(json.dumps(corpus.paths, indent=2, sort_keys=True))
    return 0


def _cmd_train_wp_emb(args) -> int:
    res = _Resolver(args)
    word_table = load_word_embeddings(args.word_embeddings, level="word")
    vocab = WordPieceVocab.from_file(args.vocab)
    dataset = data_mod.load_dataset(args.dataset, task=res.get("task", "classification"))
    words = []
    for example in dataset.examples:
        for text in (example.text, example.premise, example.hypothesis):
            if text:
                words.extend(text.split())
    cfg = WordPieceTrainConfig(
        steps=int(res.get("steps", 2000)),
        batch_words=int(res.get("batch_words", 5000)),
        learning_rate=float(res.get("learning_rate", 0.1)),
        init=res.get("init", "word"),
        seed=res.seed(),
    )
    result = train_wordpiece_embeddings(words, word_table, vocab, cfg)
    result.table.save(args.out)
    final = result.epoch_objectives[-1] if result.epoch_objectives else 0.0
    print(f"trained {len(result.table)} piece vectors; final objective {final:.6f} per word")
    return 0


def _cmd_train_lm(args) -> int:
    res = _Resolver(args)
    dataset = data_mod.load_dataset(args.dataset, task=res.get("task", "classification"))
    smoothing = float(res.get("smoothing", 0.1))
    texts = []
    for example in dataset.examples:
        parts = [t for t in (example.text, example.premise, example.hypothesis) if t]
        texts.append((" ".join(parts), example.label))
    if args.kind == "causal":
        scorer = train_toy_causal([t for t, _ in texts], config=CausalConfig(smoothing))
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(scorer.to_dict(), fh)
        print(f"causal scorer over {len(scorer.tokens)} tokens -> {args.out}")
        return 0
    vocab = WordPieceVocab.from_file(args.vocab)
    tokenized = [(vocab.tokenize(text), label) for text, label in texts]
    models = train_class_excluded_mlms(tokenized, dataset.num_classes, vocab,
                                       MlmConfig(smoothing))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cls_id, model in enumerate(models):
        with open(out / f"mlm_excluded_{cls_id}.json", "w", encoding="utf-8") as fh:
            json.dump(model.to_dict(), fh)
    print(f"{len(models)} class-excluded masked LMs -> {out}")
    return 0


def _cmd_train_classifier(args) -> int:
    res = _Resolver(args)
    task = res.get("task", "classification")
    dataset = data_mod.load_dataset(args.dataset, task=task)
    word_table = load_word_embeddings(args.word_embeddings, level="word")
    stop = StopwordSet.from_file(args.stopwords) if args.stopwords else StopwordSet.default()
    items = []
    for example in dataset.examples:
        if task == "nli":
            items.append(((example.premise, example.hypothesis), example.label))
        else:
            items.append((example.text, example.label))
    cfg = ClassifierConfig(epochs=int(res.get("epochs", 300)),
                           learning_rate=float(res.get("learning_rate", 0.5)),
                           task=task)
    model = train_toy_classifier(items, word_table, stop, cfg)
    correct = 0
    for item, label in items:
        probs = (model.predict_proba_pair(*item) if task == "nli"
                 else model.predict_proba(item))
        correct += int(np.argmax(probs)) == label
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh)
    print(f"classifier trained; accuracy {correct / len(items):.3f} on {len(items)} examples")
    return 0


def _cmd_sample(args) -> int:
    res = _Resolver(args)
    vocab = WordPieceVocab.from_file(args.vocab)
    wp_table = load_word_embeddings(args.wp_embeddings, level="word-piece")
    stop = StopwordSet.from_file(args.stopwords) if args.stopwords else StopwordSet.default()
    mlm = _load_mlm(args.mlm)
    ner = None
    if args.entities:
        with open(args.entities, encoding="utf-8") as fh:
            ner = dictionary_ner([line.strip() for line in fh if line.strip()])
    sampler_cfg = SamplerConfig(
        iterations=int(res.get("iterations", 10)),
        block_size=int(res.get("block", 1)),
        snapshot_every=int(res.get("snapshot_every", 10)),
        position_policy=res.get("position_policy", "sweep"),
    )
    sigma = float(res.get("sigma", 0.95))
    kappa = float(res.get("kappa", 1000.0))
    base_seed = res.seed()
    rows = _read_jsonl(args.input)
    out_rows = []
    streams = np.random.SeedSequence(base_seed).spawn(max(1, len(rows)))
    for row, stream in zip(rows, streams):
        seq = vocab.tokenize(row["text"])
        target = sentence_representation(seq.pieces, wp_table, stop)
        enforce = EnforcingConfig(sigma=sigma, kappa=kappa, wp_table=wp_table,
                                  target_repr=target, vocab=vocab, stop=stop)
        entities = ner.entities(row["text"]) if ner else []
        chain = run_chain(seq, mlm, enforce, sampler_cfg, entities,
                          rng=np.random.default_rng(stream))
        out_rows.append({
            "id": row.get("id"),
            "snapshots": [snap.text() for snap in chain.snapshots],
            "steps": chain.snapshot_steps,
        })
    if args.out:
        _write_jsonl(out_rows, args.out)
    else:
        for row in out_rows:
            print(json.dumps(row, sort_keys=True))
    return 0


def _cmd_attack(args) -> int:
    res = _Resolver(args)
    task = res.get("task", "classification")
    dataset = data_mod.load_dataset(args.dataset, task=task)
    word_table = load_word_embeddings(args.word_embeddings, level="word")
    wp_table = load_word_embeddings(args.wp_embeddings, level="word-piece")
    vocab = WordPieceVocab.from_file(args.vocab)
    stop = StopwordSet.from_file(args.stopwords) if args.stopwords else StopwordSet.default()
    scorer = _load_scorer(args.scorer)
    mlms = _load_mlms(args.mlms)
    ner = None
    if args.entities:
        with open(args.entities, encoding="utf-8") as fh:
            ner = dictionary_ner([line.strip() for line in fh if line.strip()])
    if _is_endpoint(args.classifier):
        classifier = connect_external_model(args.classifier, "classifier")
    else:
        with open(args.classifier, encoding="utf-8") as fh:
            classifier = ToyTextClassifier.from_dict(json.load(fh), word_table, stop)

    stack = attack_mod.AttackStack(vocab=vocab, wp_table=wp_table, word_table=word_table,
                                   stop=stop, mlms=mlms, classifier=classifier,
                                   scorer=scorer, ner=ner)
    schedule = attack_mod.RoundSchedule.parse(res.get("schedule", "classification"))
    setups = _parse_setups(res.get("setups", "2:0.95,5:0.90"), scorer, word_table, stop)
    cfg = attack_mod.AttackConfig(
        block_size=int(res.get("block", 1)),
        snapshot_every=int(res.get("snapshot_every", 10)),
        kappa=float(res.get("kappa", 1000.0)),
        position_policy=res.get("position_policy", "sweep"),
        seed=res.seed(),
        include_premise=bool(res.get("include_premise", False)),
        cased=bool(res.get("cased", True)),
    )
    records, summary = attack_mod.attack_dataset(dataset, stack, schedule, setups, cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    attack_mod.save_records(records, out / "records.jsonl")
    attack_mod.save_summary(summary, out / "summary.json")
    attack_mod.export_scatter(records, setups[0].label, out / "scatter.csv")
    print(json.dumps({label: entry["after_attack_accuracy"]
                      for label, entry in summary.get("setups", {}).items()},
                     sort_keys=True))
    return 0


def _cmd_filter(args) -> int:
    res = _Resolver(args)
    scorer = _load_scorer(args.scorer)
    word_table = load_word_embeddings(args.embeddings, level="word")
    stop = StopwordSet.from_file(args.stopwords) if args.stopwords else StopwordSet.default()
    cfg = ThreatModelConfig(float(res.get("lam", 2.0)), float(res.get("epsilon", 0.95)),
                            scorer, word_table, stop)
    out_rows = []
    for row in _read_jsonl(args.input):
        verdict = in_threat_model(row["original"], row["candidate"], cfg)
        out_rows.append({
            "id": row.get("id"),
            "ppl_ratio": verdict.ppl_ratio,
            "similarity": verdict.similarity,
            "in_threat_model": verdict.ok,
        })
    if args.out:
        _write_jsonl(out_rows, args.out)
    else:
        for row in out_rows:
            print(json.dumps(row, sort_keys=True))
    return 0


def _cmd_report(args) -> int:
    res = _Resolver(args)
    records = attack_mod.load_records(args.records)
    labels = []
    for part in res.get("setups", "2:0.95,5:0.90").split(","):
        lam, eps = part.split(":")
        label = f"lambda={float(lam):g},epsilon={float(eps):g}"
        labels.append((label, float(lam), float(eps)))
    from .threat import scores_pass

    for label, lam, eps in labels:
        for record in records:
            any_success = False
            for cand in record.candidates:
                if cand.ppl_ratio is None or cand.similarity is None:
                    raise ValueError(
                        f"record {record.id}: candidate lacks cached scores; rerun attack"
                    )
                passes = scores_pass(cand.ppl_ratio, cand.similarity, lam, eps)
                cand.threat_ok[label] = passes
                if passes and cand.flips(record.label):
                    any_success = True
            record.success[label] = any_success and not record.originally_misclassified
    summary = attack_mod.summarize(records, [label for label, _, _ in labels])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    attack_mod.save_summary(summary, out / "summary.json")
    attack_mod.export_scatter(records, labels[0][0], out / "scatter.csv")
    print(json.dumps({label: entry["after_attack_accuracy"]
                      for label, entry in summary.get("setups", {}).items()},
                     sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advrewrite",
        description="Sentence-rewriting adversarial attacks with a "
                    "perplexity/similarity threat model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="generate a deterministic toy corpus and input files")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--class-vocab", type=int, dest="class_vocab")
    p.add_argument("--shared-vocab", type=int, dest="shared_vocab")
    p.add_argument("--train-per-class", type=int, dest="train_per_class")
    p.add_argument("--test-per-class", type=int, dest="test_per_class")
    p.add_argument("--entity-rate", type=float, dest="entity_rate")
    p.add_argument("--dim", type=int)
    p.add_argument("--task", choices=["classification", "nli"])
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_gen_toy)

    p = sub.add_parser("train-wp-emb", help="fit word-piece embeddings to word vectors")
    p.add_argument("--dataset", required=True)
    p.add_argument("--word-embeddings", required=True, dest="word_embeddings")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=["classification", "nli"])
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-words", type=int, dest="batch_words")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--init", choices=["word", "zeros", "residual"])
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_train_wp_emb)

    p = sub.add_parser("train-lm", help="train class-excluded masked LMs or a causal scorer")
    p.add_argument("--dataset", required=True)
    p.add_argument("--kind", choices=["masked", "causal"], default="masked")
    p.add_argument("--vocab")
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=["classification", "nli"])
    p.add_argument("--smoothing", type=float)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_train_lm)

    p = sub.add_parser("train-classifier", help="train the toy softmax classifier")
    p.add_argument("--dataset", required=True)
    p.add_argument("--word-embeddings", required=True, dest="word_embeddings")
    p.add_argument("--stopwords")
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=["classification", "nli"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_train_classifier)

    p = sub.add_parser("sample", help="rewrite input texts and emit snapshot trajectories")
    p.add_argument("--input", required=True)
    p.add_argument("--mlm", required=True)
    p.add_argument("--wp-embeddings", required=True, dest="wp_embeddings")
    p.add_argument("--vocab", required=True)
    p.add_argument("--stopwords")
    p.add_argument("--entities")
    p.add_argument("--sigma", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--block", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--snapshot-every", type=int, dest="snapshot_every")
    p.add_argument("--position-policy", choices=["sweep", "random"], dest="position_policy")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("attack", help="attack a dataset and write records/summary/scatter")
    p.add_argument("--dataset", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--mlms", required=True)
    p.add_argument("--scorer", required=True)
    p.add_argument("--word-embeddings", required=True, dest="word_embeddings")
    p.add_argument("--wp-embeddings", required=True, dest="wp_embeddings")
    p.add_argument("--vocab", required=True)
    p.add_argument("--stopwords")
    p.add_argument("--entities")
    p.add_argument("--task", choices=["classification", "nli"])
    p.add_argument("--schedule")
    p.add_argument("--block", type=int)
    p.add_argument("--snapshot-every", type=int, dest="snapshot_every")
    p.add_argument("--kappa", type=float)
    p.add_argument("--setups")
    p.add_argument("--include-premise", action="store_true", default=None,
                   dest="include_premise")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("filter", help="apply the threat model to candidate pairs")
    p.add_argument("--input", required=True)
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--scorer", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--stopwords")
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("report", help="regenerate summary and scatter from stored records")
    p.add_argument("--records", required=True)
    p.add_argument("--setups")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_report)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
