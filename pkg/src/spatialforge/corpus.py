"""Caption-record ingestion, canonical JSONL persistence, and image probing.

Records from the three supported description datasets (plus a custom shape)
are normalized into one canonical record type. Writing is deterministic:
records are sorted by id and serialized with a fixed key order, so the same
record set always produces the same bytes and the same content digest.
"""

from __future__ import annotations

import hashlib
import json
import time
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, IO, Iterable, Optional, Protocol, Sequence, Union

import requests

IMAGE_OK = "image_ok"
SPATIAL_OK = "spatial_ok"
VALID_FLAGS = frozenset({IMAGE_OK, SPATIAL_OK})


class SourceKind(str, Enum):
    DOCCI = "docci"
    LOCALIZED_NARRATIVES = "ln"
    PIXMO_CAP = "pixmo"
    CUSTOM = "custom"

    @classmethod
    def parse(cls, tag: str) -> "SourceKind":
        try:
            return cls(tag)
        except ValueError:
            raise ValueError(f"unknown source kind: {tag!r}") from None


# Native field names per source; first present alias wins. Custom requires
# exactly {id, image, text}.
_ADAPTERS: dict[SourceKind, dict[str, tuple[str, ...]]] = {
    SourceKind.DOCCI: {
        "id": ("example_id", "id"),
        "image": ("image_file", "image"),
        "text": ("description", "text"),
    },
    SourceKind.LOCALIZED_NARRATIVES: {
        "id": ("image_id", "id"),
        "image": ("image_url", "image"),
        "text": ("caption", "text"),
    },
    SourceKind.PIXMO_CAP: {
        "id": ("id", "image_url"),
        "image": ("image_url", "image"),
        "text": ("caption", "text"),
    },
    SourceKind.CUSTOM: {
        "id": ("id",),
        "image": ("image",),
        "text": ("text",),
    },
}


class CorpusError(Exception):
    pass


class DuplicateIdError(CorpusError):
    def __init__(self, ids: Sequence[str]):
        self.ids = list(ids)
        preview = ", ".join(self.ids[:5])
        super().__init__(f"duplicate record ids: {preview}" + ("..." if len(self.ids) > 5 else ""))


@dataclass(frozen=True)
class CaptionRecord:
    id: str
    source: SourceKind
    image_uri: str
    description: str
    word_count: int
    flags: frozenset[str] = frozenset()

    @classmethod
    def make(
        cls,
        id: str,
        source: SourceKind,
        image_uri: str,
        description: str,
        flags: Iterable[str] = (),
    ) -> "CaptionRecord":
        """Build a record, normalizing the description to NFC.

        Raises ValueError("empty_description") when the description is empty
        after trimming.
        """
        if not id:
            raise ValueError("missing_id")
        desc = unicodedata.normalize("NFC", description)
        if not desc.strip():
            raise ValueError("empty_description")
        flagset = frozenset(flags)
        unknown = flagset - VALID_FLAGS
        if unknown:
            raise ValueError(f"unknown flags: {sorted(unknown)}")
        return cls(
            id=id,
            source=source,
            image_uri=image_uri,
            description=desc,
            word_count=len(desc.split()),
            flags=flagset,
        )

    def with_flag(self, flag: str, present: bool = True) -> "CaptionRecord":
        if flag not in VALID_FLAGS:
            raise ValueError(f"unknown flag: {flag}")
        flags = set(self.flags)
        (flags.add if present else flags.discard)(flag)
        return replace(self, flags=frozenset(flags))

    def has_flag(self, flag: str) -> bool:
        return flag in self.flags

    def to_json_line(self) -> str:
        obj = {
            "id": self.id,
            "source": self.source.value,
            "image_uri": self.image_uri,
            "description": self.description,
            "word_count": self.word_count,
            "flags": sorted(self.flags),
        }
        return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_json_obj(cls, obj: dict) -> "CaptionRecord":
        rec = cls.make(
            id=obj["id"],
            source=SourceKind.parse(obj["source"]),
            image_uri=obj["image_uri"],
            description=obj["description"],
            flags=obj.get("flags", ()),
        )
        if "word_count" in obj and obj["word_count"] != rec.word_count:
            raise ValueError(
                f"record {rec.id!r}: stored word_count {obj['word_count']} "
                f"!= computed {rec.word_count}"
            )
        return rec


@dataclass(frozen=True)
class Manifest:
    corpus_path: str
    record_count: int
    per_source_counts: dict[str, int]
    content_digest: str

    def to_dict(self) -> dict:
        return {
            "corpus_path": self.corpus_path,
            "record_count": self.record_count,
            "per_source_counts": {k: self.per_source_counts[k] for k in sorted(self.per_source_counts)},
            "content_digest": self.content_digest,
        }


def content_digest(records: Sequence[CaptionRecord]) -> str:
    """Order-independent digest: hash of id-sorted canonical lines."""
    h = hashlib.sha256()
    for rec in sorted(records, key=lambda r: r.id):
        h.update(rec.to_json_line().encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def build_manifest(records: Sequence[CaptionRecord], corpus_path: str = "") -> Manifest:
    per_source: dict[str, int] = {}
    for rec in records:
        per_source[rec.source.value] = per_source.get(rec.source.value, 0) + 1
    return Manifest(
        corpus_path=corpus_path,
        record_count=len(records),
        per_source_counts=per_source,
        content_digest=content_digest(records),
    )


@dataclass
class IngestResult:
    records: list[CaptionRecord]
    manifest: Manifest
    rejections: dict[str, int]
    total_lines: int

    @property
    def rejected_count(self) -> int:
        return sum(self.rejections.values())


def _reject(rejections: dict[str, int], reason: str) -> None:
    rejections[reason] = rejections.get(reason, 0) + 1


def ingest_records(
    stream: Union[IO[str], Iterable[str]],
    source: SourceKind,
    corpus_path: str = "",
) -> IngestResult:
    """Parse one-JSON-object-per-line input into normalized records.

    Invalid lines are tallied by reason and skipped; total_lines always
    equals len(records) + sum(rejections.values()).
    """
    adapter = _ADAPTERS[source]
    records: list[CaptionRecord] = []
    seen_ids: set[str] = set()
    rejections: dict[str, int] = {}
    total = 0
    for raw in stream:
        if not raw.strip():
            continue
        total += 1
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError:
            _reject(rejections, "invalid_json")
            continue
        if not isinstance(obj, dict):
            _reject(rejections, "not_an_object")
            continue
        values = {}
        missing = None
        for field_name, aliases in adapter.items():
            found = next((obj[a] for a in aliases if a in obj and obj[a] is not None), None)
            if found is None:
                missing = f"missing_{field_name}"
                break
            values[field_name] = found
        if missing:
            _reject(rejections, missing)
            continue
        try:
            rec = CaptionRecord.make(
                id=str(values["id"]),
                source=source,
                image_uri=str(values["image"]),
                description=str(values["text"]),
                flags=obj.get("flags", ()) if source is SourceKind.CUSTOM else (),
            )
        except ValueError as exc:
            _reject(rejections, str(exc))
            continue
        if rec.id in seen_ids:
            _reject(rejections, "duplicate_id")
            continue
        seen_ids.add(rec.id)
        records.append(rec)
    return IngestResult(
        records=records,
        manifest=build_manifest(records, corpus_path),
        rejections=rejections,
        total_lines=total,
    )


def read_corpus(path_or_stream: Union[str, Path, IO[str]]) -> list[CaptionRecord]:
    """Strict reader for the canonical corpus JSONL format."""
    if isinstance(path_or_stream, (str, Path)):
        with open(path_or_stream, "r", encoding="utf-8") as fh:
            return read_corpus(fh)
    records = []
    seen: set[str] = set()
    for lineno, raw in enumerate(path_or_stream, start=1):
        if not raw.strip():
            continue
        try:
            rec = CaptionRecord.from_json_obj(json.loads(raw))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise CorpusError(f"corpus line {lineno}: {exc}") from exc
        if rec.id in seen:
            raise DuplicateIdError([rec.id])
        seen.add(rec.id)
        records.append(rec)
    return records


def write_records(
    records: Sequence[CaptionRecord],
    output: Union[str, Path, IO[str]],
    corpus_path: str = "",
) -> Manifest:
    """Write canonical JSONL sorted by id; duplicate ids are fatal."""
    by_id: dict[str, int] = {}
    dupes = []
    for rec in records:
        by_id[rec.id] = by_id.get(rec.id, 0) + 1
        if by_id[rec.id] == 2:
            dupes.append(rec.id)
    if dupes:
        raise DuplicateIdError(sorted(dupes))
    ordered = sorted(records, key=lambda r: r.id)
    if isinstance(output, (str, Path)):
        path = Path(output)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in ordered:
                fh.write(rec.to_json_line())
                fh.write("\n")
        return build_manifest(ordered, corpus_path or str(path))
    for rec in ordered:
        output.write(rec.to_json_line())
        output.write("\n")
    return build_manifest(ordered, corpus_path)


# --- image availability -----------------------------------------------------

class ProbeTimeout(Exception):
    """Transient probe failure; eligible for retry."""


class ImageProber(Protocol):
    def exists(self, uri: str) -> bool:  # pragma: no cover - interface
        ...


class LocalFileProber:
    """Existence check for local paths, optionally rooted at a directory."""

    def __init__(self, root: Optional[Union[str, Path]] = None):
        self.root = Path(root) if root else None

    def exists(self, uri: str) -> bool:
        p = Path(uri)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p.is_file()


class HttpHeadProber:
    """HEAD-style remote existence check; no body download."""

    def __init__(self, timeout_s: float = 10.0, session: Optional[requests.Session] = None):
        self.timeout_s = timeout_s
        self._session = session or requests.Session()

    def exists(self, uri: str) -> bool:
        try:
            resp = self._session.head(uri, timeout=self.timeout_s, allow_redirects=True)
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise ProbeTimeout(str(exc)) from exc
        return resp.status_code < 400


class AutoProber:
    """Dispatch to HTTP or local probing by URI scheme."""

    def __init__(self, root: Optional[Union[str, Path]] = None, timeout_s: float = 10.0):
        self._local = LocalFileProber(root)
        self._http = HttpHeadProber(timeout_s)

    def exists(self, uri: str) -> bool:
        if uri.startswith(("http://", "https://")):
            return self._http.exists(uri)
        return self._local.exists(uri)


def check_image_availability(
    record: CaptionRecord,
    prober: ImageProber,
    retries: int = 2,
    backoff_s: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[CaptionRecord, Optional[str]]:
    """Set or clear the image_ok flag; returns (record, failure_reason).

    Transient probe failures are retried with exponential backoff; a final
    timeout marks the record unavailable with reason "probe_timeout".
    """
    delay = backoff_s
    attempts = retries + 1
    for attempt in range(attempts):
        try:
            ok = prober.exists(record.image_uri)
        except ProbeTimeout:
            if attempt + 1 < attempts:
                sleep(delay)
                delay *= 2
                continue
            return record.with_flag(IMAGE_OK, False), "probe_timeout"
        return record.with_flag(IMAGE_OK, ok), None if ok else "not_found"
    raise AssertionError("unreachable")


def probe_records(
    records: Sequence[CaptionRecord],
    prober: ImageProber,
    max_in_flight: int = 16,
    retries: int = 2,
    backoff_s: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> list[tuple[CaptionRecord, Optional[str]]]:
    """Probe with bounded parallelism; results in input order."""
    if max_in_flight <= 1 or len(records) <= 1:
        return [check_image_availability(r, prober, retries, backoff_s, sleep) for r in records]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(
            pool.map(lambda r: check_image_availability(r, prober, retries, backoff_s, sleep), records)
        )
