"""Context-keyed store for datasets and fitted models.

A store is a directory: ``index.jsonl`` (one JSON record per line) plus a
``blobs/`` subdirectory addressed by record id.  Writes go through a temp
file and an atomic rename of the whole index so concurrent readers always
see a consistent snapshot.  Ranking favors exact context-tag matches,
then summary cosine similarity, then recency.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ExperimentContext",
    "DatasetCard",
    "ModelCard",
    "KnowledgeStore",
    "StorageError",
    "IntegrityError",
]


class StorageError(RuntimeError):
    """Durable write failed."""


class IntegrityError(ValueError):
    """Card violates store invariants (duplicate id, inconsistent shape)."""


@dataclass(frozen=True)
class ExperimentContext:
    """What was imaged and how; the reuse key."""

    object_class: str
    channel: str
    generator_id: str
    magnification: float = 1.0

    def __post_init__(self):
        for tag in (self.object_class, self.channel, self.generator_id):
            if not tag:
                raise ValueError("context tags must be non-empty")

    def tags(self):
        return {
            "object_class": self.object_class,
            "channel": self.channel,
            "generator_id": self.generator_id,
        }


@dataclass(frozen=True)
class DatasetCard:
    """Summary card for a stored fingerprint dataset."""

    id: int
    context: ExperimentContext
    n_samples: int
    summary_mean: tuple
    summary_std: tuple
    created_at: float
    path: str

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if len(self.summary_mean) != len(self.summary_std):
            raise IntegrityError("summary mean/std dimensions differ")


@dataclass(frozen=True)
class ModelCard:
    """Card for a stored fitted model blob."""

    id: int
    context: ExperimentContext
    circular_corr: float
    pair_consistency: float
    version: int
    created_at: float
    path: str

    def __post_init__(self):
        if self.version < 1:
            raise ValueError("version must be >= 1")
        if not (np.isfinite(self.circular_corr) and np.isfinite(self.pair_consistency)):
            raise ValueError("metrics must be finite")


def _card_to_record(kind, card):
    rec = {
        "kind": kind,
        "id": card.id,
        "context": dict(card.context.tags(), magnification=card.context.magnification),
        "created_at": card.created_at,
        "path": card.path,
    }
    if kind == "dataset":
        rec["n"] = card.n_samples
        rec["summary_mean"] = list(card.summary_mean)
        rec["summary_std"] = list(card.summary_std)
    else:
        rec["metrics"] = {
            "circular_corr": card.circular_corr,
            "pair_consistency": card.pair_consistency,
        }
        rec["version"] = card.version
    return rec


def _record_to_card(rec):
    ctx = ExperimentContext(
        object_class=rec["context"]["object_class"],
        channel=rec["context"]["channel"],
        generator_id=rec["context"]["generator_id"],
        magnification=rec["context"].get("magnification", 1.0),
    )
    if rec["kind"] == "dataset":
        return DatasetCard(
            id=rec["id"],
            context=ctx,
            n_samples=rec["n"],
            summary_mean=tuple(rec["summary_mean"]),
            summary_std=tuple(rec["summary_std"]),
            created_at=rec["created_at"],
            path=rec["path"],
        )
    return ModelCard(
        id=rec["id"],
        context=ctx,
        circular_corr=rec["metrics"]["circular_corr"],
        pair_consistency=rec["metrics"]["pair_consistency"],
        version=rec["version"],
        created_at=rec["created_at"],
        path=rec["path"],
    )


class KnowledgeStore:
    """Single-writer, multi-reader directory store."""

    def __init__(self, root):
        self.root = str(root)
        self.blob_dir = os.path.join(self.root, "blobs")
        self.index_path = os.path.join(self.root, "index.jsonl")
        os.makedirs(self.blob_dir, exist_ok=True)

    # -- reading ---------------------------------------------------------

    def records(self):
        if not os.path.exists(self.index_path):
            return []
        out = []
        with open(self.index_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(json.loads(line))
        return out

    def cards(self, kind=None):
        cards = [_record_to_card(r) for r in self.records()]
        if kind is not None:
            want = DatasetCard if kind == "dataset" else ModelCard
            cards = [c for c in cards if isinstance(c, want)]
        return cards

    def load_blob(self, card):
        with open(os.path.join(self.root, card.path), "rb") as fh:
            return fh.read()

    # -- writing ---------------------------------------------------------

    def next_id(self):
        recs = self.records()
        return 1 + max((r["id"] for r in recs), default=0)

    def _write_index(self, records):
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".index-", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                for rec in records:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            os.replace(tmp, self.index_path)
        except OSError as exc:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise StorageError(f"index write failed: {exc}") from exc

    def _put(self, kind, card, blob):
        records = self.records()
        if any(r["id"] == card.id for r in records):
            raise IntegrityError(f"duplicate id {card.id}")
        blob_path = os.path.join(self.root, card.path)
        os.makedirs(os.path.dirname(blob_path), exist_ok=True)
        try:
            fd, tmp = tempfile.mkstemp(dir=os.path.dirname(blob_path), prefix=".blob-")
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, blob_path)
        except OSError as exc:
            raise StorageError(f"blob write failed: {exc}") from exc
        records.append(_card_to_record(kind, card))
        self._write_index(records)
        return card.id

    def put_model(self, card, blob):
        """Durably store a serialized model; returns the card id."""
        return self._put("model", card, blob)

    def put_dataset(self, card, blob):
        """Durably store a dataset blob; returns the card id."""
        return self._put("dataset", card, blob)

    # -- querying --------------------------------------------------------

    def query(self, context, summary=None, kind=None):
        """Cards ranked by tag matches, then summary cosine, then recency.

        ``summary`` (optional) is compared against dataset cards' stored
        mean vectors by cosine similarity; cards without a comparable
        summary rank as similarity 0.
        """
        cards = self.cards(kind=kind)
        want = context.tags()

        def tag_matches(card):
            have = card.context.tags()
            return sum(1 for k, v in want.items() if have.get(k) == v)

        def cosine(card):
            if summary is None or not isinstance(card, DatasetCard):
                return 0.0
            a = np.asarray(summary, dtype=float)
            b = np.asarray(card.summary_mean, dtype=float)
            if a.shape != b.shape:
                return 0.0
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            if na < 1e-300 or nb < 1e-300:
                return 0.0
            return float(a @ b / (na * nb))

        return sorted(
            cards,
            key=lambda c: (-tag_matches(c), -cosine(c), -c.created_at, -c.id),
        )
