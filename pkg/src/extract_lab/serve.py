"""Victim behind an HTTP API (hard labels, per-key budget, optional flip defense) and
the attack-side client.

Protocol (JSON over HTTP/1.1)::

    GET  /v1/meta   -> {"num_classes", "depth", "budget_remaining"}
    POST /v1/query  (header X-Api-Key)
         {"request_id", "nodes": [{"id", "features"}], "edges": [[u, v]], "query_ids": [...]}
      -> 200 {"labels", "budget_remaining"}
       | 400 malformed | 401 unknown key | 429 {"error": "budget_exceeded", "budget_remaining"}

Ids in a request are local to the submitted subgraph. A request that would exceed the
remaining budget is rejected whole. A request id is remembered for ten minutes per key:
replays return the recorded answer and are charged once.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import requests

from .attack import DefenseConfig, QueryResponse, apply_flip_defense
from .errors import BudgetError, ConfigError, LoadError, ProtocolError, TransportError
from .gnn import VictimParams, load_model, victim_predict
from .graphcore import Graph, induced_subgraph, k_hop_nodes

log = logging.getLogger(__name__)

DEDUP_TTL = 600.0
MAX_BODY = 256 * 1024 * 1024


@dataclass
class ServerConfig:
    model: VictimParams | str | Path
    budget: int = 100
    api_keys: tuple = ("test-key",)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    host: str = "127.0.0.1"
    port: int = 0  # 0 picks a free port
    seed: int = 0

    def __post_init__(self):
        if self.budget < 0:
            raise ConfigError("budget must be >= 0")
        if not self.api_keys:
            raise ConfigError("at least one API key is needed")


class BudgetLedger:
    """Per-key remaining budget plus the request-id replay cache, behind one lock.

    A request id is registered (as pending) in the same critical section that charges
    it, so a concurrent replay waits for the first answer instead of paying twice.
    """

    def __init__(self, keys, budget: int, ttl: float = DEDUP_TTL, clock=time.monotonic):
        self._remaining = {k: int(budget) for k in keys}
        self._seen: dict[tuple[str, str], list] = {}  # -> [time, body | None, done event]
        self._lock = threading.Lock()
        self._ttl = ttl
        self._clock = clock

    def known(self, key: str) -> bool:
        return key in self._remaining

    def remaining(self, key: str) -> int:
        with self._lock:
            return self._remaining[key]

    def reserve(self, key: str, request_id: str, count: int):
        """Atomic check-and-decrement.

        Returns ``("replay", body)``, ``("ok", remaining)`` or ``("over", remaining)``.
        """
        while True:
            with self._lock:
                now = self._clock()
                for k in [k for k, e in self._seen.items() if e[1] is not None and now - e[0] > self._ttl]:
                    del self._seen[k]
                entry = self._seen.get((key, request_id))
                if entry is None:
                    left = self._remaining[key]
                    if count > left:
                        return "over", left
                    self._remaining[key] = left - count
                    self._seen[(key, request_id)] = [now, None, threading.Event()]
                    return "ok", left - count
                if entry[1] is not None:
                    return "replay", entry[1]
                done = entry[2]
            done.wait()  # first copy still in flight

    def record(self, key: str, request_id: str, body: dict) -> None:
        with self._lock:
            entry = self._seen[(key, request_id)]
            entry[0], entry[1] = self._clock(), body
        entry[2].set()

    def refund(self, key: str, request_id: str, count: int) -> None:
        with self._lock:
            self._remaining[key] += count
            entry = self._seen.pop((key, request_id))
        entry[2].set()


class _BadRequest(Exception):
    pass


def parse_query(doc, d: int) -> tuple[str, Graph, np.ndarray]:
    """Validate a query body; returns ``(request_id, subgraph, local_query_ids)``."""
    if not isinstance(doc, dict):
        raise _BadRequest("body must be a JSON object")
    rid = doc.get("request_id")
    if not isinstance(rid, str) or not rid:
        raise _BadRequest("request_id must be a non-empty string")
    nodes, edges, qids = doc.get("nodes"), doc.get("edges", []), doc.get("query_ids")
    if not isinstance(nodes, list) or not nodes:
        raise _BadRequest("nodes must be a non-empty list")
    if not isinstance(qids, list) or not qids:
        raise _BadRequest("query_ids must be a non-empty list")
    if not isinstance(edges, list):
        raise _BadRequest("edges must be a list")
    index: dict[int, int] = {}
    x = np.empty((len(nodes), d))
    for pos, node in enumerate(nodes):
        if not isinstance(node, dict) or type(node.get("id")) is not int:
            raise _BadRequest("each node needs an integer id")
        feats = node.get("features")
        if not isinstance(feats, list) or len(feats) != d:
            raise _BadRequest(f"node {node['id']}: expected {d} features")
        if node["id"] in index:
            raise _BadRequest(f"duplicate node id {node['id']}")
        index[node["id"]] = pos
        try:
            x[pos] = np.array(feats, dtype=np.float64)
        except (TypeError, ValueError):
            raise _BadRequest(f"node {node['id']}: non-numeric feature") from None
    if not np.all(np.isfinite(x)):
        raise _BadRequest("non-finite feature value")

    def local(i) -> int:
        if type(i) is not int or i not in index:
            raise _BadRequest(f"unknown node id {i!r}")
        return index[i]

    e = []
    for pair in edges:
        if not isinstance(pair, list) or len(pair) != 2:
            raise _BadRequest("edges must be [u, v] pairs")
        e.append((local(pair[0]), local(pair[1])))
    q = np.array([local(i) for i in qids], dtype=np.int64)
    if np.unique(q).size != q.size:
        raise _BadRequest("duplicate query id")
    return rid, Graph(x, np.array(e, dtype=np.int64).reshape(-1, 2), None, 1), q


class VictimService:
    """Answers queries for one victim model; transport-independent core of the server."""

    def __init__(self, cfg: ServerConfig):
        model = cfg.model
        if not isinstance(model, VictimParams):
            model = load_model(model)
            if not isinstance(model, VictimParams):
                raise LoadError(f"{cfg.model} does not hold a victim model")
        if any(l.bn_scale is not None for l in model.layers()):
            log.warning("victim uses batch norm: answers depend on the whole submitted subgraph")
        self.model = model
        self.cfg = cfg
        self.ledger = BudgetLedger(cfg.api_keys, cfg.budget)
        self.defense = DefenseConfig(cfg.defense.p, cfg.seed)
        self.labels_served = 0

    def meta(self, key: str | None) -> tuple[int, dict]:
        if key is not None and not self.ledger.known(key):
            return 401, {"error": "unknown_api_key"}
        remaining = self.cfg.budget if key is None else self.ledger.remaining(key)
        return 200, {"num_classes": self.model.num_classes, "depth": self.model.depth,
                     "budget_remaining": remaining}

    def query(self, key: str | None, doc) -> tuple[int, dict]:
        if key is None or not self.ledger.known(key):
            return 401, {"error": "unknown_api_key"}
        try:
            rid, sub, q = parse_query(doc, self.model.encoder.in_dim)
        except _BadRequest as e:
            return 400, {"error": "bad_request", "detail": str(e)}
        state, value = self.ledger.reserve(key, rid, q.size)
        if state == "replay":
            return 200, value
        if state == "over":
            return 429, {"error": "budget_exceeded", "budget_remaining": value}
        try:
            labels = victim_predict(self.model, sub, q)
            labels = apply_flip_defense(labels, self.defense, self.model.num_classes, (rid,))
        except Exception:
            self.ledger.refund(key, rid, q.size)
            raise
        body = {"labels": [int(v) for v in labels], "budget_remaining": value}
        self.ledger.record(key, rid, body)
        self.labels_served += q.size
        return 200, body


class _Handler(BaseHTTPRequestHandler):
    service: VictimService  # set on the subclass built per server
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route to logging instead of stderr
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status: int, body: dict) -> None:
        data = json.dumps(body, separators=(",", ":")).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        if self.path != "/v1/meta":
            return self._send(404, {"error": "not_found"})
        self._send(*self.service.meta(self.headers.get("X-Api-Key")))

    def do_POST(self):
        if self.path != "/v1/query":
            return self._send(404, {"error": "not_found"})
        try:
            length = int(self.headers.get("Content-Length", ""))
        except ValueError:
            return self._send(400, {"error": "bad_request", "detail": "missing Content-Length"})
        if not 0 < length <= MAX_BODY:
            return self._send(400, {"error": "bad_request", "detail": "bad body length"})
        raw = self.rfile.read(length)
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            return self._send(400, {"error": "bad_request", "detail": "body is not JSON"})
        try:
            status, body = self.service.query(self.headers.get("X-Api-Key"), doc)
        except Exception:
            log.exception("query failed")
            status, body = 500, {"error": "internal"}
        self._send(status, body)


class VictimServer:
    """Threaded HTTP server around a :class:`VictimService`."""

    def __init__(self, cfg: ServerConfig):
        self.service = VictimService(cfg)
        handler = type("Handler", (_Handler,), {"service": self.service})
        self.httpd = ThreadingHTTPServer((cfg.host, cfg.port), handler)
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "VictimServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def shutdown(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()


def serve_victim(cfg: ServerConfig) -> VictimServer:
    """Load the model, bind the port and start serving in a background thread."""
    return VictimServer(cfg).start()


# ------------------------------------------------------------------------- client


class VictimClient:
    def __init__(self, base_url: str, api_key: str, timeout: float = 60.0, attempts: int = 3,
                 backoff: float = 0.2):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.session = requests.Session()

    def _request(self, method: str, path: str, body: dict | None = None) -> requests.Response:
        last = None
        for attempt in range(self.attempts):
            try:
                resp = self.session.request(method, self.base_url + path, json=body, timeout=self.timeout,
                                            headers={"X-Api-Key": self.api_key})
                if resp.status_code < 500:
                    return resp
                last = f"HTTP {resp.status_code}"
            except requests.RequestException as e:
                last = str(e)
            log.warning("%s %s failed (%s), attempt %d/%d", method, path, last, attempt + 1, self.attempts)
            if attempt + 1 < self.attempts:
                time.sleep(self.backoff * 2**attempt)
        raise TransportError(f"{method} {path} failed after {self.attempts} attempts: {last}")

    def meta(self) -> dict:
        resp = self._request("GET", "/v1/meta")
        if resp.status_code != 200:
            raise ProtocolError(f"meta returned HTTP {resp.status_code}")
        return resp.json()

    def close(self) -> None:
        self.session.close()


def query_body(subgraph: Graph, query_local_ids, request_id: str | None = None) -> dict:
    return {
        "request_id": request_id or str(uuid.uuid4()),
        "nodes": [{"id": i, "features": row} for i, row in enumerate(subgraph.features.tolist())],
        "edges": subgraph.edges.tolist(),
        "query_ids": [int(i) for i in query_local_ids],
    }


def remote_query(client: VictimClient, subgraph: Graph, query_local_ids, api_key: str | None = None,
                 request_id: str | None = None) -> QueryResponse:
    """POST one query; retries reuse the request id, so the budget is charged once."""
    if api_key is not None and api_key != client.api_key:
        client = VictimClient(client.base_url, api_key, client.timeout, client.attempts, client.backoff)
    ids = np.asarray(query_local_ids, dtype=np.int64).reshape(-1)
    resp = client._request("POST", "/v1/query", query_body(subgraph, ids, request_id))
    try:
        doc = resp.json()
    except ValueError:
        raise ProtocolError(f"HTTP {resp.status_code} with a non-JSON body") from None
    if resp.status_code == 429:
        raise BudgetError(f"victim budget exceeded (remaining {doc.get('budget_remaining')})")
    if resp.status_code == 400:
        raise ProtocolError(f"victim rejected the query: {doc.get('detail', doc)}")
    if resp.status_code != 200:
        raise ProtocolError(f"unexpected HTTP {resp.status_code}: {doc}")
    if set(doc) != {"labels", "budget_remaining"} or len(doc["labels"]) != ids.size:
        raise ProtocolError(f"malformed answer: keys {sorted(doc)}")
    return QueryResponse(ids, doc["labels"], int(doc["budget_remaining"]))


class RemoteVictim:
    """Victim handle over HTTP.

    Each query ships the induced subgraph of every node within ``depth + 1`` hops of
    the query nodes; the extra hop makes GCN degree normalization at the outer ring
    match the full graph, so answers equal local inference exactly.
    """

    def __init__(self, client: VictimClient):
        self.client = client
        meta = client.meta()
        self.num_classes = int(meta["num_classes"])
        self.depth = int(meta["depth"])
        self.budget_remaining = int(meta["budget_remaining"])

    def query(self, g: Graph, ids) -> QueryResponse:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        nodes = k_hop_nodes(g, ids, self.depth + 1)
        sub, _ = induced_subgraph(g.without_labels() if g.labels is not None else g, nodes)
        resp = remote_query(self.client, sub, np.searchsorted(nodes, ids))
        self.budget_remaining = resp.budget_remaining
        return QueryResponse(ids, resp.labels, resp.budget_remaining)
