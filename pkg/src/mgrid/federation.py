"""Federated query execution.

A validated query is decomposed into one identical sub-query per site (the
decomposition is by data partition: every site evaluates the full predicate
against its own metadata) and the per-site rows are merged: deduplicated by
entity-id tuple keeping the lexicographically smallest answering site, then
globally re-sorted and re-limited. Sites that fail or time out are reported
in the result rather than failing the whole query.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import querylang
from .catalogue import Catalogue, UnknownGuid

DEFAULT_TIMEOUT_S = 10.0
DEFAULT_REPLICATE_THRESHOLD = 64 * 1024 * 1024

REPLICATE_BACK = "replicate_back"
REMOTE_ANALYSIS = "remote_analysis"


class FederationError(Exception):
    pass


class NoTargets(FederationError):
    pass


class PeerError(FederationError):
    """A peer could not be queried (unreachable, timeout, or remote error)."""


@dataclass
class QueryPlan:
    ast: querylang.QueryAst
    targets: list[str]
    issued_at: str
    timeout_s: float = DEFAULT_TIMEOUT_S


@dataclass
class FederatedResult:
    rows: list[querylang.ResultRow]
    responded: list[str]
    failed: list[tuple[str, str]] = field(default_factory=list)
    truncated: bool = False

    def to_doc(self) -> dict:
        return {
            "rows": [r.to_doc() for r in self.rows],
            "responded": self.responded,
            "failed": [list(f) for f in self.failed],
            "truncated": self.truncated,
        }


@dataclass
class TransferDecision:
    mode: str
    total_bytes: int
    threshold_bytes: int


def plan(ast: querylang.QueryAst, self_site: str, peers: list[str],
         timeout_s: float = DEFAULT_TIMEOUT_S) -> QueryPlan:
    """One identical sub-query per target; self always included, targets
    deduplicated and sorted."""
    targets = sorted(set(peers) | {self_site})
    if not targets:
        raise NoTargets("no targets")
    return QueryPlan(ast, targets, self_site, timeout_s)


def merge_rows(per_site: dict[str, list[querylang.ResultRow]],
               ast: querylang.QueryAst) -> tuple[list[querylang.ResultRow], bool]:
    """Dedup by entity-id tuple (smallest site wins), re-sort, re-limit."""
    best: dict[tuple, querylang.ResultRow] = {}
    for site in sorted(per_site):
        for row in per_site[site]:
            key = row.key()
            if key not in best or row.site < best[key].site:
                best[key] = row
    rows = querylang.sort_rows(list(best.values()), ast, querylang.primary_entity(ast))
    truncated = ast.limit is not None and len(rows) > ast.limit
    if truncated:
        rows = rows[: ast.limit]
    return rows, truncated


def execute(p: QueryPlan, query_site) -> FederatedResult:
    """Dispatch the sub-query to every target concurrently (one in-flight
    request per target) and merge. `query_site(site, ast_doc)` returns row
    documents or raises PeerError."""
    ast_doc = querylang.to_doc(p.ast)
    per_site: dict[str, list[querylang.ResultRow]] = {}
    failed: list[tuple[str, str]] = []

    def one(site: str):
        return site, query_site(site, ast_doc)

    with ThreadPoolExecutor(max_workers=max(1, len(p.targets))) as pool:
        futures = {site: pool.submit(one, site) for site in p.targets}
        for site in p.targets:
            try:
                _, row_docs = futures[site].result(timeout=p.timeout_s)
                per_site[site] = [querylang.ResultRow.from_doc(d) for d in row_docs]
            except Exception as e:  # peer failures degrade, never propagate
                failed.append((site, str(e) or type(e).__name__))

    rows, truncated = merge_rows(per_site, p.ast)
    return FederatedResult(rows, sorted(per_site), failed, truncated)


def decide_transfer(rows: list[querylang.ResultRow], catalogue: Catalogue,
                    attached_job: dict | None,
                    threshold_bytes: int = DEFAULT_REPLICATE_THRESHOLD) -> TransferDecision:
    """Remote analysis iff a job is attached AND total candidate bytes exceed
    the threshold (strictly); otherwise replicate back to the coordinator."""
    total = 0
    for row in rows:
        lfn = row.values.get("image.lfn")
        if lfn is None:
            continue
        try:
            entry, _ = catalogue.resolve(lfn)
        except Exception:
            raise UnknownGuid(f"row references unregistered file {lfn!r}") from None
        total += entry.size
    mode = REMOTE_ANALYSIS if attached_job is not None and total > threshold_bytes \
        else REPLICATE_BACK
    return TransferDecision(mode, total, threshold_bytes)
