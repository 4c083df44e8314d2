"""Wire adapter for external model backends.

Protocol: newline-delimited JSON over a byte stream (TCP or a subprocess
pipe). Every request carries an ``id`` which the response must echo.

    {"op": "mask_logprobs", "tokens": [...], "mask_positions": [...]}
        -> {"logprobs": [[row per masked position]]}
    {"op": "ppl", "text": "..."}                  -> {"ppl": real}
    {"op": "classify", "text": "..."}             -> {"probs": [...]}
    {"op": "classify", "premise": "...", "hypothesis": "..."}
                                                  -> {"probs": [...]}
    {"op": "ner", "text": "..."}                  -> {"entities": [...]}

Server-side failures come back as {"id": ..., "error": "message"}.
Responses are validated against the model interface invariants and
renormalized within a small tolerance; anything worse is rejected.
"""

from __future__ import annotations

import json
import shlex
import socket
import socketserver
import subprocess
import threading
import time

import numpy as np

from .models import CausalScorer, Classifier, EntityRecognizer, MaskedLanguageModel

PROB_TOLERANCE = 1e-4
NEG_INF_WIRE = -1e30  # stands in for -inf, which strict JSON cannot carry


class TransportError(RuntimeError):
    """Connection could not be established or broke mid-request; retriable."""


class ProtocolError(RuntimeError):
    """Response violated the wire contract or an interface invariant."""


class RemoteModelError(RuntimeError):
    """The server reported an application-level error."""


class _TcpTransport:
    def __init__(self, host: str, port: int, timeout: float):
        self.host, self.port, self.timeout = host, port, timeout
        self._sock = None
        self.reader = None
        self.writer = None

    def open(self):
        self.close()
        sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        self._sock = sock
        self.reader = sock.makefile("rb")
        self.writer = sock.makefile("wb")

    def close(self):
        for item in (self.reader, self.writer, self._sock):
            if item is not None:
                try:
                    item.close()
                except OSError:
                    pass
        self._sock = self.reader = self.writer = None


class _PipeTransport:
    def __init__(self, command: str):
        self.command = command
        self._proc = None
        self.reader = None
        self.writer = None

    def open(self):
        self.close()
        self._proc = subprocess.Popen(
            shlex.split(self.command), stdin=subprocess.PIPE, stdout=subprocess.PIPE
        )
        self.reader = self._proc.stdout
        self.writer = self._proc.stdin

    def close(self):
        if self._proc is not None:
            try:
                self._proc.kill()
                self._proc.wait(timeout=5)
            except OSError:
                pass
        self._proc = self.reader = self.writer = None


def _parse_endpoint(endpoint: str, timeout: float):
    if endpoint.startswith("pipe:"):
        return _PipeTransport(endpoint[len("pipe:"):])
    addr = endpoint[len("tcp:"):] if endpoint.startswith("tcp:") else endpoint
    if ":" not in addr:
        raise ValueError(f"cannot parse endpoint {endpoint!r}")
    host, port = addr.rsplit(":", 1)
    return _TcpTransport(host, int(port), timeout)


class ModelConnection:
    """One serialized request/response channel to an adapter endpoint."""

    def __init__(self, endpoint: str, retries: int = 3, retry_wait: float = 0.05,
                 timeout: float = 10.0):
        self.endpoint = endpoint
        self.retries = max(1, int(retries))
        self.retry_wait = retry_wait
        self._transport = _parse_endpoint(endpoint, timeout)
        self._lock = threading.Lock()
        self._next_id = 0
        self._connected = False

    def close(self):
        with self._lock:
            self._transport.close()
            self._connected = False

    def request(self, payload: dict) -> dict:
        with self._lock:
            last_exc = None
            for attempt in range(self.retries):
                if attempt:
                    time.sleep(self.retry_wait)
                try:
                    return self._request_once(payload)
                except (OSError, EOFError, ConnectionError) as exc:
                    last_exc = exc
                    self._transport.close()
                    self._connected = False
            raise TransportError(
                f"endpoint {self.endpoint!r} failed after {self.retries} attempts: {last_exc}"
            ) from last_exc

    def _request_once(self, payload: dict) -> dict:
        if not self._connected:
            self._transport.open()
            self._connected = True
        self._next_id += 1
        rid = self._next_id
        message = dict(payload)
        message["id"] = rid
        self._transport.writer.write(json.dumps(message).encode("utf-8") + b"\n")
        self._transport.writer.flush()
        line = self._transport.reader.readline()
        if not line:
            raise EOFError("connection closed by peer")
        try:
            response = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"unparseable response: {line[:200]!r}") from exc
        if response.get("id") != rid:
            raise ProtocolError(f"response id {response.get('id')!r} does not echo {rid}")
        if "error" in response:
            raise RemoteModelError(str(response["error"]))
        return response


def _require(response: dict, key: str):
    if key not in response:
        raise ProtocolError(f"response is missing {key!r}")
    return response[key]


class RemoteMaskedLM(MaskedLanguageModel):
    def __init__(self, connection: ModelConnection, vocab_size: int | None = None):
        self.connection = connection
        self.vocab_size = vocab_size

    def log_rows(self, piece_ids, mask_positions) -> np.ndarray:
        from .models import _sequence_ids

        response = self.connection.request({
            "op": "mask_logprobs",
            "tokens": [int(i) for i in _sequence_ids(piece_ids)],
            "mask_positions": [int(p) for p in mask_positions],
        })
        rows = np.asarray(_require(response, "logprobs"), dtype=float)
        if rows.ndim != 2 or rows.shape[0] != len(mask_positions):
            raise ProtocolError(f"expected {len(mask_positions)} log-prob rows")
        if self.vocab_size is None:
            self.vocab_size = rows.shape[1]
        elif rows.shape[1] != self.vocab_size:
            raise ProtocolError(
                f"row width {rows.shape[1]} does not match vocab size {self.vocab_size}"
            )
        out = np.empty_like(rows)
        for k, row in enumerate(rows):
            mass = float(np.exp(row).sum())
            if abs(mass - 1.0) > PROB_TOLERANCE:
                raise ProtocolError(f"log-prob row has mass {mass:.6f}")
            out[k] = row - np.log(mass)
        return out


class RemoteCausalScorer(CausalScorer):
    def __init__(self, connection: ModelConnection):
        self.connection = connection

    def perplexity(self, text: str) -> float:
        response = self.connection.request({"op": "ppl", "text": text})
        value = _require(response, "ppl")
        if not isinstance(value, (int, float)) or not np.isfinite(value) or value <= 0:
            raise ProtocolError(f"invalid perplexity {value!r}")
        return float(value)


class RemoteClassifier(Classifier):
    def __init__(self, connection: ModelConnection, num_classes: int | None = None):
        self.connection = connection
        self.num_classes = num_classes

    def _validate(self, response: dict) -> np.ndarray:
        probs = np.asarray(_require(response, "probs"), dtype=float)
        if probs.ndim != 1 or probs.size == 0:
            raise ProtocolError("probs must be a non-empty vector")
        if np.any(probs < -PROB_TOLERANCE):
            raise ProtocolError("negative class probability")
        total = float(probs.sum())
        if abs(total - 1.0) > PROB_TOLERANCE:
            raise ProtocolError(f"class probabilities sum to {total:.6f}")
        if self.num_classes is None:
            self.num_classes = probs.size
        elif probs.size != self.num_classes:
            raise ProtocolError(f"expected {self.num_classes} classes, got {probs.size}")
        probs = np.clip(probs, 0.0, None)
        return probs / probs.sum()

    def predict_proba(self, text: str) -> np.ndarray:
        return self._validate(self.connection.request({"op": "classify", "text": text}))

    def predict_proba_pair(self, premise: str, hypothesis: str) -> np.ndarray:
        return self._validate(self.connection.request(
            {"op": "classify", "premise": premise, "hypothesis": hypothesis}
        ))


class RemoteEntityRecognizer(EntityRecognizer):
    def __init__(self, connection: ModelConnection):
        self.connection = connection

    def entities(self, text: str) -> list[str]:
        response = self.connection.request({"op": "ner", "text": text})
        phrases = _require(response, "entities")
        if not isinstance(phrases, list):
            raise ProtocolError("entities must be a list")
        for phrase in phrases:
            if not isinstance(phrase, str) or phrase not in text:
                raise ProtocolError(f"entity {phrase!r} does not occur in the text")
        return list(phrases)


_ROLES = {
    "mlm": RemoteMaskedLM,
    "scorer": RemoteCausalScorer,
    "classifier": RemoteClassifier,
    "ner": RemoteEntityRecognizer,
}


def connect_external_model(endpoint: str, role: str, *, retries: int = 3,
                           retry_wait: float = 0.05, timeout: float = 10.0):
    """Bind an adapter endpoint to the requested model interface."""
    if role not in _ROLES:
        raise ValueError(f"unknown role {role!r}; expected one of {sorted(_ROLES)}")
    connection = ModelConnection(endpoint, retries=retries, retry_wait=retry_wait,
                                 timeout=timeout)
    return _ROLES[role](connection)


# --- server side -----------------------------------------------------------

def build_handlers(mlm=None, scorer=None, classifier=None, ner=None) -> dict:
    """Request handlers that expose local models over the wire protocol."""
    handlers = {}
    if mlm is not None:
        def mask_logprobs(request):
            rows = mlm.log_rows(request["tokens"], request["mask_positions"])
            wire = np.where(np.isfinite(rows), rows, NEG_INF_WIRE)
            return {"logprobs": wire.tolist()}
        handlers["mask_logprobs"] = mask_logprobs
    if scorer is not None:
        handlers["ppl"] = lambda request: {"ppl": float(scorer.perplexity(request["text"]))}
    if classifier is not None:
        def classify(request):
            if "premise" in request:
                probs = classifier.predict_proba_pair(request["premise"], request["hypothesis"])
            else:
                probs = classifier.predict_proba(request["text"])
            return {"probs": np.asarray(probs, dtype=float).tolist()}
        handlers["classify"] = classify
    if ner is not None:
        handlers["ner"] = lambda request: {"entities": list(ner.entities(request["text"]))}
    return handlers


def serve_stream(reader, writer, handlers) -> None:
    """Answer newline-delimited JSON requests until the stream closes."""
    while True:
        line = reader.readline()
        if not line:
            return
        try:
            request = json.loads(line)
        except json.JSONDecodeError:
            writer.write(json.dumps({"id": None, "error": "unparseable request"}).encode() + b"\n")
            writer.flush()
            continue
        rid = request.get("id")
        op = request.get("op")
        try:
            handler = handlers[op]
        except KeyError:
            response = {"id": rid, "error": f"unknown op {op!r}"}
        else:
            try:
                response = {"id": rid, **handler(request)}
            except Exception as exc:  # surfaced to the client as a remote error
                response = {"id": rid, "error": f"{type(exc).__name__}: {exc}"}
        writer.write(json.dumps(response).encode("utf-8") + b"\n")
        writer.flush()


class ModelServer:
    """Threaded TCP server exposing local models; used in tests and demos."""

    def __init__(self, handlers, host: str = "127.0.0.1", port: int = 0):
        outer_handlers = handlers

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                serve_stream(self.rfile, self.wfile, outer_handlers)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"tcp:{host}:{port}"

    def start(self) -> "ModelServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
