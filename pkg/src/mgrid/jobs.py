"""Distributed analysis jobs.

A job is routed at submission time to the site holding the most replicas of
its inputs (ties: lexicographically smallest site id), so execution happens
next to the data. Agents pull work for their own site; every state
transition is a JobEvent riding the change log, so job status converges to
every site the same way the catalogue does.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .catalogue import Catalogue, NotFound

ALGORITHMS = ("qc_report", "detect_microcalcs", "standardize")

QUEUED = "queued"
CLAIMED = "claimed"
RUNNING = "running"
DONE = "done"
FAILED = "failed"

_ORDER = {QUEUED: 0, CLAIMED: 1, RUNNING: 2, DONE: 3, FAILED: 3}


class JobError(Exception):
    pass


class UnknownLfn(JobError):
    pass


class UnknownAlgorithm(JobError):
    pass


class UnknownJob(JobError):
    pass


@dataclass
class Job:
    id: bytes
    algorithm: str
    params: dict
    inputs: list[str]
    target: str
    submitter: str
    status: str = QUEUED
    outputs: list[str] = field(default_factory=list)
    reason: str = ""
    queued_order: tuple = ()        # (submitter, seq) of the queued event
    last_event_time: float = 0.0

    def to_doc(self) -> dict:
        return {
            "id": self.id.hex(),
            "algorithm": self.algorithm,
            "params": self.params,
            "inputs": list(self.inputs),
            "target": self.target,
            "submitter": self.submitter,
            "status": self.status,
            "outputs": list(self.outputs),
            "reason": self.reason,
        }


def choose_target(inputs: list[str], catalogue: Catalogue) -> str:
    """Site with the most input replicas; ties break lexicographically."""
    counts: dict[str, int] = {}
    for lfn in inputs:
        try:
            _, replicas = catalogue.resolve(lfn)
        except NotFound:
            raise UnknownLfn(lfn) from None
        for rep in replicas:
            counts[rep.site] = counts.get(rep.site, 0) + 1
    if not counts:
        raise UnknownLfn("no resolvable inputs")
    best = max(counts.values())
    return min(site for site, n in counts.items() if n == best)


class JobState:
    """Job table folded from the JobEvents seen locally."""

    def __init__(self):
        self.jobs: dict[bytes, Job] = {}
        # events that overtook their queued record (cross-origin delivery race)
        self.pending: dict[bytes, list[tuple[dict, str, int, float]]] = {}

    def apply_event(self, payload: dict, origin: str, seq: int, when: float):
        job_id = bytes.fromhex(payload["job"])
        transition = payload["transition"]
        if transition == QUEUED:
            if job_id in self.jobs:
                return  # duplicate queued event
            self.jobs[job_id] = Job(
                id=job_id,
                algorithm=payload["algorithm"],
                params=payload.get("params", {}),
                inputs=list(payload["inputs"]),
                target=payload["target"],
                submitter=origin,
                queued_order=(origin, seq),
                last_event_time=when,
            )
            for held in self.pending.pop(job_id, []):
                self.apply_event(*held)
            return
        job = self.jobs.get(job_id)
        if job is None:
            # hold it back until the queued record arrives from its origin
            self.pending.setdefault(job_id, []).append((payload, origin, seq, when))
            return
        if job.status in (DONE, FAILED):
            return  # terminal states never regress
        if _ORDER.get(transition, -1) < _ORDER[job.status]:
            return  # re-run re-emits claimed/running; keep the furthest state
        job.status = transition
        job.last_event_time = when
        if transition == DONE:
            job.outputs = list(payload.get("outputs", []))
        if transition == FAILED:
            job.reason = payload.get("reason", "")

    def status(self, job_id: bytes) -> Job:
        job = self.jobs.get(job_id)
        if job is None:
            raise UnknownJob(job_id.hex())
        return job

    def queued_for(self, site: str) -> list[Job]:
        """Queued jobs targeted at a site, oldest first by queued event."""
        mine = [j for j in self.jobs.values() if j.target == site and j.status == QUEUED]
        return sorted(mine, key=lambda j: j.queued_order)

    def stalled_for(self, site: str, now: float, stall_s: float) -> list[Job]:
        """Claimed/running jobs at a site whose last event is older than the
        stall timeout; the target re-runs them (safe: outputs are
        content-addressed and registration is idempotent)."""
        mine = [j for j in self.jobs.values()
                if j.target == site and j.status in (CLAIMED, RUNNING)
                and now - j.last_event_time >= stall_s]
        return sorted(mine, key=lambda j: j.queued_order)

    def canonical_doc(self) -> dict:
        return {"jobs": [self.jobs[k].to_doc() for k in sorted(self.jobs)]}
