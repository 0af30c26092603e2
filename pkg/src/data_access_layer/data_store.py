# data_access_layer/data_store.py
"""All data persistence goes through this interface. This implementation uses plain files in a run directory."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence

import jsonpickle
import numpy as np

from data_access_layer.entity_linker import Gazetteer
from data_access_layer.graph_builder import deserialize_graph, serialize_graph
from data_object_model.corpus import Document, Vocabulary
from data_object_model.errors import GraphParseError, MissingInputError
from data_object_model.hewe import HeweGraph

logger = logging.getLogger(__name__)

_CHECKPOINT_MAGIC = b"CGCK"
_CHECKPOINT_VERSION = 1
GRAPH_SUFFIX = ".hewe"


# --- Run directory ---------------------------------------------------------------


@dataclass
class RunLayout:
    """Where every artifact of one run lives."""
    root: Path

    def __init__(self, root):
        self.root = Path(root)

    @property
    def config_snapshot(self) -> Path:
        return self.root / "config.snapshot"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def corpus(self) -> Path:
        return self.root / "data" / "corpus.jsonl"

    @property
    def gazetteer(self) -> Path:
        return self.root / "data" / "gazetteer.tsv"

    @property
    def graph_dir(self) -> Path:
        return self.root / "graphs"

    @property
    def vocabulary(self) -> Path:
        return self.root / "graphs" / "vocabulary.json"

    @property
    def pretrain_log(self) -> Path:
        return self.root / "logs" / "pretrain.jsonl"

    @property
    def fewshot_log(self) -> Path:
        return self.root / "logs" / "fewshot.jsonl"

    @property
    def metrics_dir(self) -> Path:
        return self.root / "metrics"

    @property
    def embeddings(self) -> Path:
        return self.root / "embeddings" / "test_embeddings.tsv"

    def resolve(self, relative: str) -> Path:
        path = Path(relative)
        return path if path.is_absolute() else self.root / path

    def require(self, path: Path, hint: str = "") -> Path:
        if not path.exists():
            raise MissingInputError(path, hint)
        return path


# --- Helpers ---------------------------------------------------------------------


@contextmanager
def _open_write(path: Path, mode: str = "w"):
    """Write to a sibling temp file and move it into place once the block succeeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    kwargs = {} if "b" in mode else {"encoding": "utf-8", "newline": ""}
    with open(tmp, mode, **kwargs) as fh:
        yield fh
    os.replace(tmp, path)


def _safe_json(obj: Any) -> Any:
    """Turn dataclasses and other objects into plain JSON-compatible structures."""
    return json.loads(jsonpickle.encode(obj, unpicklable=False))


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --- Corpus + gazetteer ----------------------------------------------------------


def read_corpus(path) -> List[Document]:
    """
    Read one JSON document per line::

        {"doc_id": str, "patient_id": str, "seq_index": int, "tokens": [str, ...], "labels": [str, ...]}
    """
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path, "corpus JSONL")
    docs: List[Document] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                docs.append(Document.from_primitive(json.loads(line)))
            except (KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}:{line_no}: malformed corpus record ({e})")
    seen = set()
    for doc in docs:
        key = (doc.patient_id, doc.seq_index)
        if key in seen:
            raise ValueError(f"{path}: duplicate seq_index {doc.seq_index} for patient {doc.patient_id!r}")
        seen.add(key)
    return docs


def write_corpus(path, docs: Iterable[Document]) -> None:
    with _open_write(path) as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_primitive(), ensure_ascii=False) + "\n")


def read_gazetteer(path) -> Gazetteer:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path, "gazetteer TSV")
    mapping: Dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{line_no}: expected word<TAB>entity")
            word, entity = parts
            if word in mapping and mapping[word] != entity:
                raise ValueError(f"{path}:{line_no}: word {word!r} mapped to more than one entity")
            mapping[word] = entity
    return Gazetteer(mapping)


def write_gazetteer(path, gazetteer: Gazetteer) -> None:
    with _open_write(path) as fh:
        for word in sorted(gazetteer.mapping):
            fh.write(f"{word}\t{gazetteer.mapping[word]}\n")


# --- Graph store -----------------------------------------------------------------


def save_graphs(graph_dir, graphs: Mapping[str, HeweGraph]) -> None:
    """
    One ``<doc_id>.hewe`` file per document. Graph files of an earlier build whose document
    is not in ``graphs`` are removed, so the directory always holds exactly this build.
    """
    graph_dir = Path(graph_dir)
    graph_dir.mkdir(parents=True, exist_ok=True)
    wanted = {f"{doc_id}{GRAPH_SUFFIX}" for doc_id in graphs}
    stale = [p for p in graph_dir.glob(f"*{GRAPH_SUFFIX}") if p.is_file() and p.name not in wanted]
    for path in stale:
        path.unlink()
    if stale:
        logger.info("removed %d graph files from an earlier build in %s", len(stale), graph_dir)
    for doc_id in sorted(graphs):
        with _open_write(graph_dir / f"{doc_id}{GRAPH_SUFFIX}", "wb") as fh:
            fh.write(serialize_graph(graphs[doc_id]))


def load_graphs(graph_dir) -> Dict[str, HeweGraph]:
    graph_dir = Path(graph_dir)
    if not graph_dir.is_dir():
        raise MissingInputError(graph_dir, "run build-graphs first")
    graphs: Dict[str, HeweGraph] = {}
    for path in sorted(graph_dir.iterdir()):
        if path.suffix != GRAPH_SUFFIX or not path.is_file():
            continue
        try:
            graph = deserialize_graph(path.read_bytes())
        except GraphParseError as e:
            raise GraphParseError(f"{path}: {e}", e.offset)
        graphs[graph.doc_id] = graph
    return graphs


def save_vocabulary(path, vocab: Vocabulary) -> None:
    with _open_write(path) as fh:
        fh.write(_dump_json(vocab.to_primitive()))


def load_vocabulary(path) -> Vocabulary:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path, "run build-graphs first")
    return Vocabulary.from_primitive(json.loads(path.read_text(encoding="utf-8")))


# --- Checkpoints -----------------------------------------------------------------


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    """
    Little-endian layout, entries in name order::

        "CGCK" u32 version u32 count
        per entry: u16 name length, utf-8 name, u8 rank, rank x u32 dims, float64 values (row-major)
    """
    parts = [_CHECKPOINT_MAGIC, struct.pack("<II", _CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


def decode_checkpoint(payload: bytes) -> Dict[str, np.ndarray]:
    offset = 0

    def take(size: int, what: str) -> bytes:
        nonlocal offset
        if offset + size > len(payload):
            raise GraphParseError(f"truncated checkpoint while reading {what}", offset)
        chunk = payload[offset:offset + size]
        offset += size
        return chunk

    if take(4, "magic") != _CHECKPOINT_MAGIC:
        raise GraphParseError("not a checkpoint file", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != _CHECKPOINT_VERSION:
        raise GraphParseError(f"unsupported checkpoint version {version}", 4)
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "shape"))
        size = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(take(8 * size, f"values of {name}"), dtype="<f8")
        tensors[name] = values.reshape(shape).astype(np.float64)
    if offset != len(payload):
        raise GraphParseError("trailing bytes after checkpoint", offset)
    return tensors


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    with _open_write(path, "wb") as fh:
        fh.write(encode_checkpoint(tensors))
    logger.info("checkpoint written: %s (%d tensors)", path, len(tensors))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path, "checkpoint")
    return decode_checkpoint(path.read_bytes())


def load_pretrained_vectors(path, dim: int) -> Dict[str, np.ndarray]:
    """word<TAB>space-separated floats, ``dim`` per line."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path, "pre-trained word vectors")
    vectors: Dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            word, _, rest = line.partition("\t")
            values = np.array(rest.split(), dtype=np.float64)
            if values.size != dim:
                raise ValueError(f"{path}:{line_no}: expected {dim} values, got {values.size}")
            vectors[word] = values
    return vectors


# --- Logs, metrics, manifest -----------------------------------------------------


def write_jsonl(path, records: Iterable[Mapping[str, Any]]) -> None:
    with _open_write(path) as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=False) + "\n")


def read_jsonl(path) -> List[dict]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path)
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_json(path, obj: Any) -> None:
    with _open_write(path) as fh:
        fh.write(_dump_json(_safe_json(obj)))


def read_json(path) -> Any:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path)
    return json.loads(path.read_text(encoding="utf-8"))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with _open_write(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def write_text(path, text: str) -> None:
    with _open_write(path) as fh:
        fh.write(text)


def write_embeddings(path, rows: Iterable[tuple]) -> None:
    """graph id<TAB>label<TAB>space-separated floats."""
    with _open_write(path) as fh:
        for graph_id, label, vector in rows:
            values = " ".join(repr(float(x)) for x in vector)
            fh.write(f"{graph_id}\t{label}\t{values}\n")


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def update_manifest(layout: RunLayout) -> Dict[str, str]:
    """Hash every file in the run directory (except the manifest itself)."""
    entries: Dict[str, str] = {}
    for path in sorted(layout.root.rglob("*")):
        if not path.is_file() or path == layout.manifest or path.name.endswith(".tmp"):
            continue
        entries[path.relative_to(layout.root).as_posix()] = sha256_file(path)
    with _open_write(layout.manifest) as fh:
        fh.write(_dump_json({"files": entries}))
    return entries

