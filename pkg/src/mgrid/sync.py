"""Cross-site convergence machinery.

Every state mutation is an append-only ChangeRecord, sequenced per origin
site. Records are pushed to peers best-effort and pulled back by periodic
anti-entropy, so all sites converge without coordination: the replicated
operations (add-only catalogue, LWW metadata, job events) are commutative
by construction.

Log file format: for each record, len(u32 LE) | canonical record bytes |
digest(32 bytes), where the canonical bytes are compact sorted-key JSON of
{origin, seq, kind, payload} and the digest is their SHA-256.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

KINDS = ("AddFile", "AddReplica", "PutMeta", "DefineAttr", "JobEvent")
PULL_PAGE_CAP = 1000
GAP_BUFFER_CAP = 10_000


class SyncError(Exception):
    pass


class BadDigest(SyncError):
    pass


class BadRecord(SyncError):
    pass


class BufferOverflow(SyncError):
    pass


class CorruptLog(SyncError):
    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"{message} at offset {offset} "
                         "(re-open with recover_truncated=True to truncate to the last valid record)")


def canonical_json(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True).encode("ascii")


_PAYLOAD_REQUIRED = {
    "AddFile": {"lfn", "guid", "size", "checksum"},
    "AddReplica": {"guid", "site", "pfn"},
    "PutMeta": {"entity", "id", "attr", "value", "version"},
    "DefineAttr": {"entity", "name", "vtype", "unit"},
    "JobEvent": {"job", "transition"},
}


def check_payload(kind: str, payload: dict):
    if kind not in KINDS:
        raise BadRecord(f"unknown kind {kind!r}")
    if not isinstance(payload, dict):
        raise BadRecord("payload must be a document")
    missing = _PAYLOAD_REQUIRED[kind] - payload.keys()
    if missing:
        raise BadRecord(f"{kind} payload missing {sorted(missing)}")


@dataclass(frozen=True)
class ChangeRecord:
    origin: str
    seq: int
    kind: str
    payload: dict

    def __post_init__(self):
        check_payload(self.kind, self.payload)
        if self.seq < 1:
            raise BadRecord(f"seq must be >= 1, got {self.seq}")

    def canonical_bytes(self) -> bytes:
        cached = self.__dict__.get("_canonical")
        if cached is None:
            cached = canonical_json({"origin": self.origin, "seq": self.seq,
                                     "kind": self.kind, "payload": self.payload})
            object.__setattr__(self, "_canonical", cached)
        return cached

    def digest(self) -> bytes:
        cached = self.__dict__.get("_digest")
        if cached is None:
            cached = hashlib.sha256(self.canonical_bytes()).digest()
            object.__setattr__(self, "_digest", cached)
        return cached

    def to_doc(self) -> dict:
        return {"origin": self.origin, "seq": self.seq, "kind": self.kind,
                "payload": self.payload, "digest": self.digest().hex()}

    @staticmethod
    def from_doc(doc: dict) -> "ChangeRecord":
        try:
            r = ChangeRecord(doc["origin"], doc["seq"], doc["kind"], doc["payload"])
        except (KeyError, TypeError) as e:
            raise BadRecord(f"malformed record document: {e}") from None
        if "digest" in doc and doc["digest"] != r.digest().hex():
            raise BadDigest(f"digest mismatch for ({r.origin},{r.seq})")
        return r


class ChangeLog:
    """Write-ahead log of this node's full record set (own and replicated).
    Appends are flushed and fsynced before being acknowledged."""

    def __init__(self, path: str, recover_truncated: bool = False):
        self.path = path
        records, valid_end = self._scan(recover_truncated)
        self.records = records
        self._fh = open(path, "ab")
        if self._fh.tell() != valid_end:
            # only reachable with recover_truncated=True
            self._fh.truncate(valid_end)
            self._fh.seek(valid_end)

    def _scan(self, recover_truncated: bool) -> tuple[list[ChangeRecord], int]:
        records: list[ChangeRecord] = []
        if not os.path.exists(self.path):
            open(self.path, "wb").close()
            return records, 0
        data = open(self.path, "rb").read()
        pos = 0
        while pos < len(data):
            start = pos
            if pos + 4 > len(data):
                if recover_truncated:
                    return records, start
                raise CorruptLog(start, "truncated length prefix")
            (length,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + length + 32 > len(data):
                if recover_truncated:
                    return records, start
                raise CorruptLog(start, "truncated record")
            body = data[pos:pos + length]
            digest = data[pos + length:pos + length + 32]
            pos += length + 32
            if hashlib.sha256(body).digest() != digest:
                if recover_truncated:
                    return records, start
                raise CorruptLog(start, "record digest mismatch")
            try:
                doc = json.loads(body)
                records.append(ChangeRecord(doc["origin"], doc["seq"], doc["kind"], doc["payload"]))
            except (ValueError, KeyError, BadRecord) as e:
                raise CorruptLog(start, f"unreadable record: {e}") from None
        return records, pos

    def append(self, record: ChangeRecord, durable: bool = True):
        """Append one record. `durable=False` skips the fsync (used for
        replicated records, which any peer can re-supply after a crash)."""
        body = record.canonical_bytes()
        self._fh.write(struct.pack("<I", len(body)) + body + record.digest())
        self._fh.flush()
        if durable:
            os.fsync(self._fh.fileno())
        self.records.append(record)

    def append_batch(self, records: list[ChangeRecord]):
        """Append several records with a single flush and fsync. The batch is
        acknowledged as a unit; a crash mid-write tears only the tail."""
        chunks = []
        for record in records:
            body = record.canonical_bytes()
            chunks.append(struct.pack("<I", len(body)) + body + record.digest())
        self._fh.write(b"".join(chunks))
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self.records.extend(records)

    def close(self):
        self._fh.close()


class SeqVector:
    """Per-origin cursor: highest contiguously-applied sequence number."""

    def __init__(self, initial: dict[str, int] | None = None):
        self.v: dict[str, int] = dict(initial or {})

    def get(self, origin: str) -> int:
        return self.v.get(origin, 0)

    def advance(self, origin: str, seq: int):
        if seq != self.get(origin) + 1:
            raise SyncError(f"non-contiguous advance for {origin}: {self.get(origin)} -> {seq}")
        self.v[origin] = seq

    def to_doc(self) -> dict:
        return dict(self.v)

    def __eq__(self, other):
        return isinstance(other, SeqVector) and self.v == other.v


class Applier:
    """Serial application path: idempotent on re-delivery, buffers per-origin
    gaps (bounded) until the missing records arrive."""

    def __init__(self, sink, vector: SeqVector | None = None):
        self.sink = sink              # callable(ChangeRecord)
        self.vector = vector or SeqVector()
        self.buffer: dict[str, dict[int, ChangeRecord]] = {}

    def _buffered_count(self) -> int:
        return sum(len(b) for b in self.buffer.values())

    def apply(self, record: ChangeRecord):
        applied = self.vector.get(record.origin)
        if record.seq <= applied:
            return  # duplicate delivery
        if record.seq > applied + 1:
            pending = self.buffer.setdefault(record.origin, {})
            if record.seq not in pending and self._buffered_count() >= GAP_BUFFER_CAP:
                raise BufferOverflow(
                    f"gap buffer full ({GAP_BUFFER_CAP}) buffering ({record.origin},{record.seq})")
            pending[record.seq] = record
            return
        self.sink(record)
        self.vector.advance(record.origin, record.seq)
        pending = self.buffer.get(record.origin)
        while pending:
            nxt = self.vector.get(record.origin) + 1
            r = pending.pop(nxt, None)
            if r is None:
                break
            self.sink(r)
            self.vector.advance(record.origin, nxt)

    def apply_doc(self, doc: dict):
        self.apply(ChangeRecord.from_doc(doc))


def records_since(records: list[ChangeRecord], vector_doc: dict[str, int],
                  cap: int = PULL_PAGE_CAP) -> list[ChangeRecord]:
    """All held records above the caller's vector, in (origin, seq) order,
    capped per call (caller pages by re-pulling)."""
    wanted = [r for r in records if r.seq > int(vector_doc.get(r.origin, 0))]
    wanted.sort(key=lambda r: (r.origin, r.seq))
    return wanted[:cap]
