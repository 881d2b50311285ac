"""Virtual file catalogue.

A hierarchical logical namespace mapping logical file names (LFNs) to
immutable content objects (guid + checksum + size) and their per-site
replicas. Add-only: no delete or rename, directories are implicit.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

SEGMENT_RE = re.compile(r"[A-Za-z0-9._-]{1,64}$")
SITE_RE = re.compile(r"[a-z0-9-]{1,32}$")
MAX_SEGMENTS = 16


class CatalogueError(Exception):
    pass


class BadLfn(CatalogueError):
    pass


class BadSiteId(CatalogueError):
    pass


class LfnExists(CatalogueError):
    pass


class GuidExists(CatalogueError):
    pass


class UnknownGuid(CatalogueError):
    pass


class ConflictingPfn(CatalogueError):
    pass


class NotFound(CatalogueError):
    pass


def parse_lfn(lfn: str) -> list[str]:
    """Validate an LFN and return its segments."""
    if not isinstance(lfn, str) or not lfn.startswith("/"):
        raise BadLfn(f"LFN must start with '/': {lfn!r}")
    segments = lfn[1:].split("/")
    if len(segments) > MAX_SEGMENTS:
        raise BadLfn(f"LFN has more than {MAX_SEGMENTS} segments: {lfn!r}")
    for seg in segments:
        if seg in (".", "..") or not SEGMENT_RE.match(seg):
            raise BadLfn(f"bad LFN segment {seg!r} in {lfn!r}")
    return segments


def check_site_id(site: str) -> str:
    if not isinstance(site, str) or not SITE_RE.match(site):
        raise BadSiteId(f"bad site id {site!r}")
    return site


@dataclass(frozen=True)
class FileEntry:
    lfn: str
    guid: bytes          # 16 bytes
    size: int
    checksum: bytes      # 32 bytes
    created_site: str
    created_seq: int

    def check(self):
        parse_lfn(self.lfn)
        check_site_id(self.created_site)
        if len(self.guid) != 16:
            raise CatalogueError("guid must be 16 bytes")
        if len(self.checksum) != 32:
            raise CatalogueError("checksum must be 32 bytes")
        if self.size <= 0:
            raise CatalogueError("size must be > 0")


@dataclass(frozen=True)
class Replica:
    guid: bytes
    site: str
    pfn: str


@dataclass
class Catalogue:
    """In-memory catalogue state. All mutations arrive through the node's
    serialized change-log path; reads may be concurrent."""

    entries_by_lfn: dict[str, FileEntry] = field(default_factory=dict)
    entries_by_guid: dict[bytes, FileEntry] = field(default_factory=dict)
    replicas: dict[bytes, dict[str, str]] = field(default_factory=dict)  # guid -> site -> pfn
    # replicas replicated in before their entry (cross-origin delivery race)
    pending_replicas: dict[bytes, dict[str, str]] = field(default_factory=dict)

    def add_entry(self, entry: FileEntry) -> FileEntry:
        entry.check()
        if entry.lfn in self.entries_by_lfn:
            raise LfnExists(entry.lfn)
        if entry.guid in self.entries_by_guid:
            raise GuidExists(entry.guid.hex())
        self.entries_by_lfn[entry.lfn] = entry
        self.entries_by_guid[entry.guid] = entry
        self.replicas.setdefault(entry.guid, {})
        for site, pfn in self.pending_replicas.pop(entry.guid, {}).items():
            self.add_replica(entry.guid, site, pfn)
        return entry

    def register_file(self, lfn: str, guid: bytes, size: int, checksum: bytes,
                      origin: str, seq: int, pfn: str) -> FileEntry:
        """Record a new entry with its initial replica at the origin site."""
        entry = FileEntry(lfn, guid, size, checksum, origin, seq)
        self.add_entry(entry)
        self.replicas[guid][origin] = pfn
        return entry

    def add_replica(self, guid: bytes, site: str, pfn: str) -> Replica:
        check_site_id(site)
        if guid not in self.entries_by_guid:
            raise UnknownGuid(guid.hex())
        sites = self.replicas.setdefault(guid, {})
        if site in sites and sites[site] != pfn:
            raise ConflictingPfn(f"{guid.hex()} at {site}: {sites[site]!r} != {pfn!r}")
        sites[site] = pfn
        return Replica(guid, site, pfn)

    def apply_replica(self, guid: bytes, site: str, pfn: str):
        """Replication path: a replica record may overtake the file record it
        refers to when they come from different origins, so unknown guids are
        held back instead of rejected and attach when the entry arrives."""
        if guid not in self.entries_by_guid:
            check_site_id(site)
            self.pending_replicas.setdefault(guid, {})[site] = pfn
            return
        self.add_replica(guid, site, pfn)

    def resolve(self, lfn: str) -> tuple[FileEntry, list[Replica]]:
        parse_lfn(lfn)
        entry = self.entries_by_lfn.get(lfn)
        if entry is None:
            raise NotFound(lfn)
        sites = self.replicas.get(entry.guid, {})
        reps = [Replica(entry.guid, s, sites[s]) for s in sorted(sites)]
        return entry, reps

    def resolve_guid(self, guid: bytes) -> tuple[FileEntry, list[Replica]]:
        entry = self.entries_by_guid.get(guid)
        if entry is None:
            raise UnknownGuid(guid.hex())
        sites = self.replicas.get(guid, {})
        return entry, [Replica(guid, s, sites[s]) for s in sorted(sites)]

    def list(self, prefix: str) -> list[str]:
        """Immediate children of a directory: subdirectories first, then
        files, each group sorted. Unknown or leaf prefixes yield []."""
        segments = [] if prefix == "/" else parse_lfn(prefix)
        depth = len(segments)
        dirs, files = set(), set()
        for lfn in self.entries_by_lfn:
            parts = lfn[1:].split("/")
            if len(parts) <= depth or parts[:depth] != segments:
                continue
            if len(parts) == depth + 1:
                files.add(parts[depth])
            else:
                dirs.add(parts[depth])
        return sorted(dirs) + sorted(files)

    def check_integrity(self):
        """Every replica's guid must have an entry."""
        for guid in self.replicas:
            if guid not in self.entries_by_guid:
                raise UnknownGuid(guid.hex())

    def canonical_doc(self) -> dict:
        """Deterministic serializable snapshot, for cross-site comparison."""
        return {
            "entries": [
                {
                    "lfn": e.lfn,
                    "guid": e.guid.hex(),
                    "size": e.size,
                    "checksum": e.checksum.hex(),
                    "created_site": e.created_site,
                    "created_seq": e.created_seq,
                }
                for _, e in sorted(self.entries_by_lfn.items())
            ],
            "replicas": [
                {"guid": g.hex(), "site": s, "pfn": p}
                for g in sorted(self.replicas)
                for s, p in sorted(self.replicas[g].items())
            ],
        }
