"""State-Action Knowledge Graph: validated transitions with vector retrieval.

Nodes are states keyed by normalized state text and carry a unit embedding.
Edges are executed actions between states with execution/success counts and a
reward EMA.  Retrieval returns one-hop fragments (node plus ranked outgoing
edges) for the nearest nodes above a similarity threshold.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .text import join_tokens, normalize_text


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """Seeded signed feature hashing over normalized tokens."""

    def __init__(self, dim: int = 256, seed: int = 42):
        self.dim = dim
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=True)

    def _slot(self, token: str) -> tuple[int, float]:
        h = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=self._key).digest()
        v = int.from_bytes(h, "little")
        return v % self.dim, 1.0 if (v >> 63) & 1 else -1.0

    def embed(self, text: str) -> np.ndarray:
        tokens = normalize_text(text)
        if not tokens:
            raise ValueError("cannot embed empty text")
        vec = np.zeros(self.dim)
        for tok, n in tokens.items():
            i, sign = self._slot(tok)
            vec[i] += sign * n
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            # Every token cancelled out; fall back to the first token's slot.
            i, sign = self._slot(next(iter(tokens)))
            vec[i] = sign
            norm = 1.0
        return vec / norm


class PrecomputedEmbedder:
    """Looks up externally computed vectors by normalized state text."""

    def __init__(self, table: dict[str, np.ndarray], fallback: Embedder | None = None):
        vecs = {node_key(k): np.asarray(v, dtype=float) for k, v in table.items()}
        dims = {v.shape[0] for v in vecs.values()}
        if fallback is not None:
            dims.add(fallback.dim)
        if len(dims) > 1:
            raise ValueError(f"inconsistent embedding dimensions {sorted(dims)}")
        self.dim = dims.pop() if dims else 0
        self._table = {k: v / np.linalg.norm(v) for k, v in vecs.items()}
        self.fallback = fallback

    def embed(self, text: str) -> np.ndarray:
        key = node_key(text)
        if key in self._table:
            return self._table[key]
        if self.fallback is None:
            raise KeyError(f"no embedding for {text!r}")
        return self.fallback.embed(text)


def node_key(text: str) -> str:
    return join_tokens(normalize_text(text))


@dataclass(frozen=True)
class KgConfig:
    tau_kg: float = 0.85
    top_k: int = 5
    beta_C: float = 0.6
    beta_P: float = 0.4
    max_entries: int = 10_000
    eta: float = 0.3


@dataclass
class StateNode:
    node_id: int
    state_text: str
    embedding: np.ndarray
    created_at: float = 0.0


@dataclass
class ActionEdge:
    from_node: int
    to_node: int
    action: str
    exec_count: int = 0
    success_count: int = 0
    reward_ema: float = 0.0

    @property
    def success_rate(self) -> float:
        return self.success_count / self.exec_count if self.exec_count else 0.0


@dataclass
class GraphFragment:
    node: StateNode
    best_edges: list[ActionEdge]
    similarity: float

    @property
    def best(self) -> ActionEdge | None:
        return self.best_edges[0] if self.best_edges else None


def edge_order_key(e: ActionEdge) -> tuple:
    # Highest success rate, then most executions, then smallest action id.
    return (-e.success_rate, -e.exec_count, e.action)


def best_action(edges: list[ActionEdge]) -> ActionEdge:
    if not edges:
        raise LookupError("node has no outgoing edges")
    return min(edges, key=edge_order_key)


def score_fragment(f: GraphFragment, cfg: KgConfig = KgConfig()) -> float:
    p = f.best.success_rate if f.best is not None else 0.0
    return cfg.beta_C * f.similarity + cfg.beta_P * p


def fragment_action_scores(fragments: list[GraphFragment], cfg: KgConfig = KgConfig()) -> dict[str, float]:
    """Per-action graph evidence: the largest fragment score proposing that action."""
    out: dict[str, float] = {}
    for f in fragments:
        for e in f.best_edges:
            s = cfg.beta_C * f.similarity + cfg.beta_P * e.success_rate
            out[e.action] = max(out.get(e.action, float("-inf")), s)
    return out


class KnowledgeGraph:
    def __init__(self, cfg: KgConfig | None = None, embedder: Embedder | None = None):
        self.cfg = cfg or KgConfig()
        self.embedder = embedder or HashingEmbedder()
        self._nodes: dict[int, StateNode] = {}
        self._by_key: dict[str, int] = {}
        self._edges: dict[tuple[int, str, int], ActionEdge] = {}
        self._out: dict[int, list[tuple[int, str, int]]] = {}
        self._node_exec: dict[int, int] = {}
        self._next_id = 0
        self._matrix: tuple[np.ndarray, list[int]] | None = None
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def nodes(self) -> list[StateNode]:
        return list(self._nodes.values())

    @property
    def edges(self) -> list[ActionEdge]:
        return list(self._edges.values())

    def find(self, state_text: str) -> StateNode | None:
        nid = self._by_key.get(node_key(state_text))
        return None if nid is None else self._nodes[nid]

    def outgoing(self, node_id: int) -> list[ActionEdge]:
        return [self._edges[k] for k in self._out.get(node_id, [])]

    def _exec_count(self, nid: int) -> int:
        # Executions of every transition touching the node, in either direction.
        return self._node_exec.get(nid, 0)

    def _evict_one(self, protect: set[int]) -> None:
        victims = [n for n in self._nodes.values() if n.node_id not in protect]
        victim = min(victims, key=lambda n: (self._exec_count(n.node_id), n.created_at, n.node_id))
        self._remove_node(victim.node_id)

    def _remove_node(self, nid: int) -> None:
        node = self._nodes.pop(nid)
        del self._by_key[node_key(node.state_text)]
        for key in [k for k in self._edges if k[0] == nid or k[2] == nid]:
            e = self._edges.pop(key)
            self._out[key[0]].remove(key)
            other = key[2] if key[0] == nid else key[0]
            if other != nid:
                self._node_exec[other] -= e.exec_count
        self._out.pop(nid, None)
        self._node_exec.pop(nid, None)
        self._matrix = None

    def add_node(self, state_text: str, now: float = 0.0, embedding: np.ndarray | None = None,
                 protect: set[int] | None = None) -> StateNode:
        with self._lock:
            existing = self.find(state_text)
            if existing is not None:
                return existing
            if embedding is None:
                embedding = self.embedder.embed(state_text)
            embedding = np.asarray(embedding, dtype=float)
            embedding = embedding / np.linalg.norm(embedding)
            if self._nodes and embedding.shape[0] != next(iter(self._nodes.values())).embedding.shape[0]:
                raise ValueError("embedding dimension does not match the graph")
            while len(self._nodes) >= self.cfg.max_entries:
                self._evict_one(protect or set())
            node = StateNode(self._next_id, state_text, embedding, created_at=now)
            self._next_id += 1
            self._nodes[node.node_id] = node
            self._by_key[node_key(state_text)] = node.node_id
            self._matrix = None
            return node

    def upsert_transition(self, s_text: str, action: str, s_next_text: str, success: bool,
                          reward: float, now: float = 0.0) -> ActionEdge:
        with self._lock:
            src = self.add_node(s_text, now)
            dst = self.add_node(s_next_text, now, protect={src.node_id})
            key = (src.node_id, action, dst.node_id)
            edge = self._edges.get(key)
            if edge is None:
                edge = ActionEdge(src.node_id, dst.node_id, action)
                self._edges[key] = edge
                self._out.setdefault(src.node_id, []).append(key)
            edge.exec_count += 1
            for nid in {src.node_id, dst.node_id}:
                self._node_exec[nid] = self._node_exec.get(nid, 0) + 1
            edge.success_count += int(bool(success))
            edge.reward_ema = (1.0 - self.cfg.eta) * edge.reward_ema + self.cfg.eta * reward
            return edge

    def _index(self) -> tuple[np.ndarray, list[int]]:
        if self._matrix is None:
            ids = sorted(self._nodes)
            mat = np.stack([self._nodes[i].embedding for i in ids]) if ids else np.zeros((0, 0))
            self._matrix = (mat, ids)
        return self._matrix

    def nearest(self, query_vec: np.ndarray, k: int) -> list[tuple[int, float]]:
        mat, ids = self._index()
        if not ids:
            return []
        sims = mat @ query_vec
        order = np.argsort(-sims, kind="stable")[:k]
        return [(ids[i], float(sims[i])) for i in order]

    def query_fragments(self, query_text: str, cfg: KgConfig | None = None,
                        query_vec: np.ndarray | None = None) -> list[GraphFragment]:
        cfg = cfg or self.cfg
        with self._lock:
            if not self._nodes:
                return []
            if query_vec is None:
                query_vec = self.embedder.embed(query_text)
            frags = []
            for nid, sim in self.nearest(np.asarray(query_vec, dtype=float), cfg.top_k):
                if sim < cfg.tau_kg:
                    continue
                edges = sorted(self.outgoing(nid), key=edge_order_key)
                frags.append(GraphFragment(self._nodes[nid], edges, min(1.0, sim)))
            return frags

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "nodes.jsonl", "w", encoding="utf-8") as fh:
            for n in sorted(self._nodes.values(), key=lambda n: n.node_id):
                fh.write(json.dumps({"node_id": n.node_id, "state_text": n.state_text,
                                     "created_at": n.created_at,
                                     "embedding": [float(x) for x in n.embedding]}) + "\n")
        with open(d / "edges.jsonl", "w", encoding="utf-8") as fh:
            for key in sorted(self._edges):
                fh.write(json.dumps(asdict(self._edges[key]), sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path, cfg: KgConfig | None = None,
             embedder: Embedder | None = None) -> KnowledgeGraph:
        d = Path(directory)
        g = cls(cfg, embedder)
        with open(d / "nodes.jsonl", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                node = StateNode(rec["node_id"], rec["state_text"], np.asarray(rec["embedding"]), rec["created_at"])
                g._nodes[node.node_id] = node
                g._by_key[node_key(node.state_text)] = node.node_id
                g._next_id = max(g._next_id, node.node_id + 1)
        edges_path = d / "edges.jsonl"
        if edges_path.exists():
            with open(edges_path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    e = ActionEdge(**json.loads(line))
                    key = (e.from_node, e.action, e.to_node)
                    g._edges[key] = e
                    g._out.setdefault(e.from_node, []).append(key)
                    for nid in {e.from_node, e.to_node}:
                        g._node_exec[nid] = g._node_exec.get(nid, 0) + e.exec_count
        return g

    def import_embeddings(self, records: list[dict], now: float = 0.0) -> int:
        """Add or re-embed nodes from ``{"state_text", "embedding"}`` records."""
        n = 0
        with self._lock:
            for rec in records:
                vec = np.asarray(rec["embedding"], dtype=float)
                node = self.find(rec["state_text"])
                if node is None:
                    self.add_node(rec["state_text"], now, embedding=vec)
                else:
                    if vec.shape != node.embedding.shape:
                        raise ValueError("embedding dimension does not match the graph")
                    node.embedding = vec / np.linalg.norm(vec)
                    self._matrix = None
                n += 1
        return n
