"""Wire-protocol adapter against a threaded mock server."""

import json
import shlex
import sys

import numpy as np
import pytest

from advrewrite.adapter import (
    ModelServer,
    ProtocolError,
    RemoteModelError,
    TransportError,
    build_handlers,
    connect_external_model,
)
from advrewrite.lexicon import StopwordSet, WordPieceVocab
from advrewrite.models import (
    ClassifierConfig,
    dictionary_ner,
    train_toy_causal,
    train_toy_classifier,
    train_toy_mlm,
)

from conftest import make_table


@pytest.fixture(scope="module")
def backend():
    vocab = WordPieceVocab.build(["a", "b", "c"])
    corpus = [[vocab.index[p] for p in ["a", "b", "c", "a"]]]
    mlm = train_toy_mlm(corpus, vocab)
    scorer = train_toy_causal(["a b c a"])
    table = make_table({"a": [1.0, 0.0], "b": [0.0, 1.0]})
    classifier = train_toy_classifier(
        [("a", 0), ("a a", 0), ("b", 1), ("b b", 1)], table, StopwordSet(),
        ClassifierConfig(epochs=50),
    )
    ner = dictionary_ner({"Nokor"})
    server = ModelServer(build_handlers(mlm=mlm, scorer=scorer,
                                        classifier=classifier, ner=ner)).start()
    yield {"server": server, "vocab": vocab, "mlm": mlm, "scorer": scorer,
           "classifier": classifier}
    server.stop()


class TestRemoteRoundtrips:
    def test_mlm_rows_match_local(self, backend):
        remote = connect_external_model(backend["server"].endpoint, "mlm")
        vocab = backend["vocab"]
        ids = [vocab.index["a"], vocab.mask_id, vocab.index["c"]]
        local = backend["mlm"].log_rows(ids, [1])
        got = remote.log_rows(ids, [1])
        finite = np.isfinite(local)
        assert np.allclose(got[finite], local[finite], atol=1e-9)
        assert np.all(got[~finite] <= -1e29)
        assert remote.vocab_size == len(vocab)

    def test_ppl_roundtrip(self, backend):
        remote = connect_external_model(backend["server"].endpoint, "scorer")
        assert remote.perplexity("a b") == pytest.approx(
            backend["scorer"].perplexity("a b"), rel=1e-9)

    def test_classify_roundtrip(self, backend):
        remote = connect_external_model(backend["server"].endpoint, "classifier")
        probs = remote.predict_proba("a a")
        assert np.allclose(probs, backend["classifier"].predict_proba("a a"), atol=1e-9)
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)

    def test_ner_roundtrip(self, backend):
        remote = connect_external_model(backend["server"].endpoint, "ner")
        assert remote.entities("Nokor expands") == ["Nokor"]

    def test_unknown_op_surfaces_remote_error(self, backend):
        remote = connect_external_model(backend["server"].endpoint, "scorer")
        with pytest.raises(RemoteModelError):
            remote.connection.request({"op": "frobnicate"})

    def test_server_side_exception_surfaces(self, backend):
        remote = connect_external_model(backend["server"].endpoint, "scorer")
        with pytest.raises(RemoteModelError):
            remote.perplexity("   ")  # empty token list fails server-side


class _Rigged:
    """Handler set returning canned payloads regardless of the request."""

    def __init__(self, response):
        self.response = response

    def handlers(self):
        return {op: (lambda request, r=self.response: r)
                for op in ("mask_logprobs", "ppl", "classify", "ner")}


class TestValidation:
    def run_rigged(self, response, role, call):
        server = ModelServer(_Rigged(response).handlers()).start()
        try:
            remote = connect_external_model(server.endpoint, role)
            return call(remote)
        finally:
            server.stop()

    def test_uniform_rows_pass_and_renormalize(self):
        row = [np.log(1 / 3)] * 3
        got = self.run_rigged({"logprobs": [row]}, "mlm",
                              lambda m: m.log_rows([0, 1], [0]))
        assert abs(np.logaddexp.reduce(got[0])) < 1e-12

    def test_row_mass_half_rejected(self):
        row = [np.log(1 / 6)] * 3  # mass 0.5
        with pytest.raises(ProtocolError, match="mass"):
            self.run_rigged({"logprobs": [row]}, "mlm",
                            lambda m: m.log_rows([0, 1], [0]))

    def test_slightly_off_probs_renormalized(self):
        probs = [0.500004, 0.499999]  # off by ~3e-6, inside tolerance
        got = self.run_rigged({"probs": probs}, "classifier",
                              lambda c: c.predict_proba("x"))
        assert got.sum() == pytest.approx(1.0, abs=1e-12)

    def test_bad_prob_sum_rejected(self):
        with pytest.raises(ProtocolError, match="sum"):
            self.run_rigged({"probs": [0.2, 0.2]}, "classifier",
                            lambda c: c.predict_proba("x"))

    def test_negative_ppl_rejected(self):
        with pytest.raises(ProtocolError):
            self.run_rigged({"ppl": -2.0}, "scorer", lambda s: s.perplexity("x"))

    def test_hallucinated_entity_rejected(self):
        with pytest.raises(ProtocolError, match="occur"):
            self.run_rigged({"entities": ["Ghost"]}, "ner",
                            lambda n: n.entities("no such thing here"))

    def test_missing_key_rejected(self):
        with pytest.raises(ProtocolError, match="missing"):
            self.run_rigged({"nonsense": 1}, "scorer", lambda s: s.perplexity("x"))


class TestTransport:
    def test_server_down_raises_transport_error_after_retries(self):
        remote = connect_external_model("tcp:127.0.0.1:9", "scorer",
                                        retries=2, retry_wait=0.01, timeout=0.2)
        with pytest.raises(TransportError, match="2 attempts"):
            remote.perplexity("a")

    def test_unknown_role_rejected(self):
        with pytest.raises(ValueError):
            connect_external_model("tcp:127.0.0.1:9", "oracle")

    def test_bad_endpoint_rejected(self):
        with pytest.raises(ValueError):
            connect_external_model("nonsense", "scorer")

    def test_pipe_transport(self):
        script = (
            "import json,sys\n"
            "for line in sys.stdin:\n"
            "    req=json.loads(line)\n"
            "    print(json.dumps({'id':req['id'],'ppl':4.0}),flush=True)\n"
        )
        endpoint = f"pipe:{sys.executable} -u -c {shlex.quote(script)}"
        remote = connect_external_model(endpoint, "scorer")
        assert remote.perplexity("anything") == 4.0
        remote.connection.close()
