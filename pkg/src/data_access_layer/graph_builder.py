""" Vocabulary and HEWE graph construction, adjacency normalisation and the binary graph codec. """
from __future__ import annotations

import logging
import struct
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from data_object_model.corpus import Document, EntityLookup, Vocabulary
from data_object_model.errors import DegenerateDocumentError, EmptySetError, GraphParseError
from data_object_model.hewe import HeweGraph, NodeRole

logger = logging.getLogger(__name__)

_MAGIC = b"HEWE"
_VERSION = 1


# --- Vocabulary ------------------------------------------------------------------


def build_vocabulary(
        corpus: Sequence[Document],
        min_count: int = 2,
        max_words_per_doc: int = 128,
        gazetteer: Optional[EntityLookup] = None) -> Vocabulary:
    """
    Keep every word whose corpus frequency is at least ``min_count``.

    Word ids follow descending frequency, ties broken by first occurrence in the corpus.
    Entity ids follow the order in which entities are first reached while walking the
    words by id, so both id spaces are deterministic for a given corpus and gazetteer.
    """
    if not corpus:
        raise EmptySetError("cannot build a vocabulary from an empty corpus")
    if max_words_per_doc < 1:
        raise ValueError("max_words_per_doc must be >= 1")

    counts: Counter = Counter()
    first_seen: Dict[str, int] = {}
    for doc in corpus:
        for token in doc.tokens:
            counts[token] += 1
            first_seen.setdefault(token, len(first_seen))

    kept = [w for w in counts if counts[w] >= min_count]
    kept.sort(key=lambda w: (-counts[w], first_seen[w]))
    word_to_id = {w: i for i, w in enumerate(kept)}

    entity_to_id: Dict[str, int] = {}
    if gazetteer is not None:
        for word in kept:
            entity = gazetteer.lookup(word)
            if entity is not None and entity not in entity_to_id:
                entity_to_id[entity] = len(entity_to_id)

    vocab = Vocabulary(word_to_id=word_to_id, entity_to_id=entity_to_id, counts={w: counts[w] for w in kept})
    truncated = sum(1 for doc in corpus if len(_in_vocab_distinct(doc.tokens, vocab)) > max_words_per_doc)
    logger.info(
        "vocabulary: %d words (min_count=%d), %d entities, %d/%d documents capped at %d words",
        vocab.n_words, min_count, vocab.n_entities, truncated, len(corpus), max_words_per_doc,
    )
    return vocab


def _in_vocab_distinct(tokens: Iterable[str], vocab: Vocabulary) -> List[str]:
    seen: Dict[str, None] = {}
    for token in tokens:
        if token in vocab.word_to_id and token not in seen:
            seen[token] = None
    return list(seen)


def retained_words(doc: Document, vocab: Vocabulary, max_words_per_doc: int) -> List[str]:
    """The document's in-vocabulary words, capped to the most frequent ones, ordered by word id."""
    candidates = _in_vocab_distinct(doc.tokens, vocab)
    order = {w: i for i, w in enumerate(candidates)}
    candidates.sort(key=lambda w: (-vocab.counts[w], order[w]))
    kept = candidates[:max_words_per_doc]
    return sorted(kept, key=vocab.word_to_id.__getitem__)


# --- Graph construction ----------------------------------------------------------


def cooccurrence_pairs(tokens: Sequence[str], window_size: int, keep: Set[str]) -> Set[Tuple[str, str]]:
    """
    Unordered pairs of distinct kept words sharing at least one length-``window_size`` window.

    Two positions share a window exactly when they are fewer than ``window_size`` apart
    (a sequence shorter than the window is one window), so scanning forward offsets is
    equivalent to enumerating windows.
    """
    pairs: Set[Tuple[str, str]] = set()
    n = len(tokens)
    for i in range(n):
        a = tokens[i]
        if a not in keep:
            continue
        for j in range(i + 1, min(n, i + window_size)):
            b = tokens[j]
            if b in keep and b != a:
                pairs.add((a, b) if a < b else (b, a))
    return pairs


def build_hewe_graph(
        doc: Document,
        vocab: Vocabulary,
        window_size: int,
        gazetteer: EntityLookup,
        max_words_per_doc: int) -> HeweGraph:
    words = retained_words(doc, vocab, max_words_per_doc)
    if not words:
        raise DegenerateDocumentError(doc.doc_id)

    word_node = {w: 1 + i for i, w in enumerate(words)}
    roles: List[NodeRole] = [NodeRole.EHR] + [NodeRole.WORD] * len(words)
    feature_ids: List[int] = [Vocabulary.EHR_FEATURE] + [vocab.word_feature(w) for w in words]
    edges: Set[Tuple[int, int]] = {(0, word_node[w]) for w in words}

    for a, b in cooccurrence_pairs(doc.tokens, window_size, set(words)):
        i, j = word_node[a], word_node[b]
        edges.add((min(i, j), max(i, j)))

    linked: Dict[str, List[int]] = {}
    for w in words:
        entity = gazetteer.lookup(w)
        if entity is not None and entity in vocab.entity_to_id:
            linked.setdefault(entity, []).append(word_node[w])

    for entity in sorted(linked, key=vocab.entity_to_id.__getitem__):
        node = len(roles)
        roles.append(NodeRole.ENTITY)
        feature_ids.append(vocab.entity_feature(entity))
        for w_node in linked[entity]:
            edges.add((w_node, node))

    return HeweGraph(doc_id=doc.doc_id, roles=roles, feature_ids=feature_ids, edges=sorted(edges), central=0)


def _build_one(args) -> Tuple[str, Optional[HeweGraph]]:
    doc, vocab, window_size, gazetteer, max_words = args
    try:
        return doc.doc_id, build_hewe_graph(doc, vocab, window_size, gazetteer, max_words)
    except DegenerateDocumentError:
        return doc.doc_id, None


def build_graphs(
        corpus: Sequence[Document],
        vocab: Vocabulary,
        gazetteer: EntityLookup,
        window_size: int,
        max_words_per_doc: int,
        workers: int = 1) -> Dict[str, HeweGraph]:
    """
    Build a graph per document, skipping documents without retained words.

    Returns graphs keyed by doc_id, inserted in doc_id order regardless of ``workers``.
    """
    jobs = [(doc, vocab, window_size, gazetteer, max_words_per_doc) for doc in corpus]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_build_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_build_one(job) for job in jobs]

    graphs: Dict[str, HeweGraph] = {}
    skipped = []
    for doc_id, graph in sorted(results, key=lambda r: r[0]):
        if graph is None:
            skipped.append(doc_id)
        else:
            graphs[doc_id] = graph
    if skipped:
        logger.warning("skipped %d documents with no retained words: %s", len(skipped), ", ".join(skipped[:10]))
    logger.info("built %d graphs", len(graphs))
    return graphs


# --- Normalisation ---------------------------------------------------------------


def normalize_dense(adjacency: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a_hat = adjacency + np.eye(adjacency.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]


def normalize_adjacency(graph) -> np.ndarray:
    """Normalised adjacency of a HeweGraph or SubGraph (anything exposing ``dense_adjacency``)."""
    return normalize_dense(graph.dense_adjacency())


# --- Codec -----------------------------------------------------------------------


def serialize_graph(graph: HeweGraph) -> bytes:
    """
    Little-endian layout::

        "HEWE" u16 version | u16 len + utf-8 doc_id | u32 n | u32 central
        n x u8 roles | n x u32 feature ids | u32 edge count | count x (u32 i, u32 j)
    """
    doc_id = graph.doc_id.encode("utf-8")
    edges = np.asarray(graph.edges, dtype="<u4").reshape(-1, 2)
    parts = [
        _MAGIC,
        struct.pack("<H", _VERSION),
        struct.pack("<H", len(doc_id)),
        doc_id,
        struct.pack("<II", graph.n, graph.central),
        np.asarray([int(r) for r in graph.roles], dtype="<u1").tobytes(),
        np.asarray(graph.feature_ids, dtype="<u4").tobytes(),
        struct.pack("<I", len(edges)),
        edges.tobytes(),
    ]
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.payload):
            raise GraphParseError(f"truncated payload while reading {what}", self.offset)
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def deserialize_graph(payload: bytes) -> HeweGraph:
    reader = _Reader(payload)
    if reader.take(4, "magic") != _MAGIC:
        raise GraphParseError("not a HEWE graph payload", 0)
    (version,) = reader.unpack("<H", "version")
    if version != _VERSION:
        raise GraphParseError(f"unsupported graph format version {version}", reader.offset - 2)
    (id_len,) = reader.unpack("<H", "doc_id length")
    id_start = reader.offset
    try:
        doc_id = reader.take(id_len, "doc_id").decode("utf-8")
    except UnicodeDecodeError:
        raise GraphParseError("doc_id is not valid utf-8", id_start)
    n, central = reader.unpack("<II", "node count")

    roles_at = reader.offset
    raw_roles = np.frombuffer(reader.take(n, "roles"), dtype="<u1")
    if raw_roles.size and raw_roles.max() > max(NodeRole):
        raise GraphParseError("unknown node role", roles_at + int(np.argmax(raw_roles > max(NodeRole))))
    feature_ids = np.frombuffer(reader.take(4 * n, "feature ids"), dtype="<u4")
    (n_edges,) = reader.unpack("<I", "edge count")
    edges_at = reader.offset
    edges = np.frombuffer(reader.take(8 * n_edges, "edges"), dtype="<u4").reshape(-1, 2)
    if reader.offset != len(payload):
        raise GraphParseError("trailing bytes after graph", reader.offset)

    if central >= max(n, 1) or n == 0:
        raise GraphParseError(f"central node {central} outside graph of {n} nodes", 0)
    for k, (i, j) in enumerate(edges.tolist()):
        if not i < j < n:
            raise GraphParseError(f"invalid edge ({i}, {j})", edges_at + 8 * k)

    return HeweGraph(
        doc_id=doc_id,
        roles=[NodeRole(int(r)) for r in raw_roles],
        feature_ids=[int(f) for f in feature_ids],
        edges=[(int(i), int(j)) for i, j in edges.tolist()],
        central=int(central),
    )
