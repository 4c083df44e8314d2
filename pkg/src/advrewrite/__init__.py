"""Sentence-level adversarial rewriting toolkit.

Rewrites whole sentences by Gibbs sampling word-pieces from a masked
language model under a soft semantic constraint, then validates candidate
attacks with a sentence-level threat model that bounds the perplexity ratio
and the embedding-cosine similarity.
"""

from .lexicon import (
    EmbeddingTable,
    StopwordSet,
    TokenSequence,
    WordPieceTrainConfig,
    WordPieceVocab,
    cosine_similarity,
    detokenize,
    load_word_embeddings,
    sentence_representation,
    tokenize,
    train_wordpiece_embeddings,
)
from .models import (
    CausalScorer,
    Classifier,
    EntityRecognizer,
    MaskedLanguageModel,
    dictionary_ner,
    train_class_excluded_mlms,
    train_toy_causal,
    train_toy_classifier,
    train_toy_mlm,
)
from .adapter import (
    ModelServer,
    ProtocolError,
    RemoteModelError,
    TransportError,
    build_handlers,
    connect_external_model,
)
from .sampler import (
    ChainState,
    EnforcingConfig,
    SamplerConfig,
    batch_sample,
    candidate_similarities,
    enforcing_distribution,
    proposal_distribution,
    protected_positions,
    run_chain,
    sample_step,
)
from .threat import (
    ThreatModelConfig,
    WordSubConfig,
    filter_adversarials,
    in_threat_model,
    in_word_substitution_model,
    perplexity_ratio,
)
from .attack import (
    AttackConfig,
    AttackRecord,
    AttackStack,
    RoundSchedule,
    attack_dataset,
    attack_example,
    change_rate,
    export_scatter,
    summarize,
)
from .data import Dataset, Example, ToyCorpusConfig, generate_toy_corpus, load_dataset

__version__ = "0.1.0"
