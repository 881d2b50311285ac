"""Deterministic multi-site simulation harness.

Runs N nodes in one process over an in-memory transport with a virtual
clock and a per-link fault model (drop probability, partitions); node
kill/restart and transfer-frame corruption can be injected between steps.
Everything is deterministic given the topology seed, and the harness talks
to nodes only through their public interfaces.
"""

from __future__ import annotations

import json
import os
import random
import shutil
import tempfile
from dataclasses import dataclass, field

from . import transfer
from .federation import PeerError
from .node import Node, NodeConfig, PeerInfo, init as node_init
from .phantom import PhantomSpec, generate_phantom
from .sync import canonical_json


class SimError(Exception):
    pass


class UnknownSite(SimError):
    pass


class ConvergenceTimeout(SimError):
    pass


class AssertionFailedError(SimError):
    pass


@dataclass
class Link:
    latency_ms: float = 0.0
    drop_probability: float = 0.0
    partitioned: bool = False


@dataclass
class Topology:
    sites: list[str]
    seed: int = 0
    sync_interval_s: float = 5.0
    drop_probability: float = 0.0
    job_stall_s: float = 300.0
    base_dir: str | None = None


@dataclass
class Report:
    assertions: list[tuple[str, bool, str]] = field(default_factory=list)
    messages: int = 0
    bytes_transferred: int = 0

    @property
    def ok(self) -> bool:
        return all(passed for _, passed, _ in self.assertions)

    def to_doc(self) -> dict:
        return {
            "ok": self.ok,
            "assertions": [{"step": s, "passed": p, "detail": d}
                           for s, p, d in self.assertions],
            "messages": self.messages,
            "bytes_transferred": self.bytes_transferred,
        }


class SimTransport:
    """Peer transport for one node, routed through the shared SimNet."""

    def __init__(self, net: "SimNet", src: str):
        self.net = net
        self.src = src

    def query(self, site, ast_doc):
        self.net.check_link(self.src, site)
        self.net.count(len(canonical_json(ast_doc)))
        rows = self.net.node(site).evaluate_subquery(ast_doc)
        payload = canonical_json(rows)
        self.net.capture(payload)
        self.net.count(len(payload))
        return rows

    def pull_changes(self, site, vector_doc):
        self.net.check_link(self.src, site, with_drop=True)
        docs = self.net.node(site).changes_since(vector_doc)
        payload = canonical_json(docs)
        self.net.capture(payload)
        self.net.count(len(payload))
        return docs

    def push(self, site, record_docs):
        self.net.check_link(self.src, site, with_drop=True)
        payload = canonical_json(record_docs)
        self.net.capture(payload)
        self.net.count(len(payload))
        for doc in record_docs:
            self.net.node(site).receive_remote(doc)

    def fetch(self, site, guid, expect_checksum):
        self.net.check_link(self.src, site)
        return self.net.dimse_get(self.src, site, guid, expect_checksum)


class SimNet:
    def __init__(self, topology: Topology):
        self.topology = topology
        self.rng = random.Random(topology.seed)
        self.time = 0.0
        self.base_dir = topology.base_dir or tempfile.mkdtemp(prefix="simnet-")
        self._owns_base = topology.base_dir is None
        self.links: dict[tuple[str, str], Link] = {
            (a, b): Link(drop_probability=topology.drop_probability)
            for a in topology.sites for b in topology.sites if a != b
        }
        self.nodes: dict[str, Node] = {}
        self.alive: dict[str, bool] = {}
        self.restarts: dict[str, int] = {}
        self.wire_captures: list[bytes] = []
        self.report = Report()
        self.flip_frames = 0

        key = bytes([7]) * 16 + topology.seed.to_bytes(16, "big", signed=True)
        self.federation_key = key
        for site in topology.sites:
            cfg = NodeConfig(
                site_id=site,
                ae_title=site.upper()[:16],
                data_dir=os.path.join(self.base_dir, site),
                peers=[PeerInfo(site_id=s) for s in topology.sites if s != site],
                federation_key_id=1,
                federation_key=key,
                sync_interval_s=topology.sync_interval_s,
                job_stall_s=topology.job_stall_s,
            )
            node_init(cfg)
            self.restarts[site] = 0
            self._start(site)

    # --- node lifecycle ------------------------------------------------------

    def _start(self, site: str, recover_truncated: bool = False):
        node_rng = random.Random(f"{self.topology.seed}:{site}:{self.restarts[site]}")
        self.nodes[site] = Node(
            os.path.join(self.base_dir, site),
            transport=SimTransport(self, site),
            now=lambda: self.time,
            rng=node_rng,
            recover_truncated=recover_truncated,
        )
        self.alive[site] = True

    def node(self, site: str) -> Node:
        if site not in self.nodes:
            raise UnknownSite(site)
        if not self.alive[site]:
            raise PeerError(f"{site} is down")
        return self.nodes[site]

    def kill(self, site: str):
        """Abrupt stop: no flush, no shutdown hook (appends fsync anyway)."""
        if site not in self.nodes:
            raise UnknownSite(site)
        self.alive[site] = False

    def restart(self, site: str, recover_truncated: bool = False):
        if site not in self.nodes:
            raise UnknownSite(site)
        self.restarts[site] += 1
        self._start(site, recover_truncated=recover_truncated)

    # --- fault model ---------------------------------------------------------

    def check_link(self, src: str, dst: str, with_drop: bool = False):
        if dst not in self.nodes:
            raise UnknownSite(dst)
        if not self.alive.get(dst) or not self.alive.get(src):
            raise PeerError(f"timeout reaching {dst}")
        link = self.links[(src, dst)]
        if link.partitioned or self.links[(dst, src)].partitioned:
            raise PeerError(f"timeout reaching {dst}")
        if with_drop and link.drop_probability > 0 \
                and self.rng.random() < link.drop_probability:
            raise PeerError(f"message to {dst} dropped")
        self.report.messages += 1

    def partition(self, pairs: list[tuple[str, str]]):
        for a, b in pairs:
            self.links[(a, b)].partitioned = True
            self.links[(b, a)].partitioned = True

    def partition_site(self, site: str):
        self.partition([(site, other) for other in self.topology.sites if other != site])

    def heal(self):
        for link in self.links.values():
            link.partitioned = False

    def inject_flip_frames(self, count: int):
        """Corrupt the next `count` transfer-protocol data frames."""
        self.flip_frames += count

    def count(self, nbytes: int):
        self.report.bytes_transferred += nbytes

    def capture(self, payload: bytes):
        self.wire_captures.append(payload)

    # --- in-memory DIMSE -----------------------------------------------------

    def dimse_pipe(self, dst: str) -> transfer.LoopbackPipe:
        server = transfer.ServerAssociation(self.node(dst).dimse_service())
        pipe = transfer.LoopbackPipe(server, capture=[])
        if self.flip_frames > 0:
            pipe.flip_next = self.flip_frames
            self.flip_frames = 0
        return pipe

    def _finish_pipe(self, pipe: transfer.LoopbackPipe):
        for _, pdu in pipe.capture:
            self.capture(pdu)
            self.count(len(pdu))

    def dimse_associate(self, src: str, dst: str) -> tuple[transfer.Association,
                                                           transfer.LoopbackPipe]:
        pipe = self.dimse_pipe(dst)
        cfg = self.nodes[dst].config
        assoc = transfer.associate(pipe, src.upper()[:16], cfg.ae_title,
                                   cfg.federation_key_id, self.federation_key)
        return assoc, pipe

    def dimse_get(self, src: str, dst: str, guid: bytes, expect_checksum: bytes) -> bytes:
        assoc, pipe = self.dimse_associate(src, dst)
        try:
            return assoc.c_get(guid, expect_checksum)
        finally:
            self._finish_pipe(pipe)

    def dimse_store(self, src: str, dst: str, mgd_bytes: bytes):
        assoc, pipe = self.dimse_associate(src, dst)
        try:
            assoc.c_store(mgd_bytes)
            assoc.release()
        finally:
            self._finish_pipe(pipe)

    # --- time ----------------------------------------------------------------

    def tick(self):
        """One sync interval of virtual time: anti-entropy then job agents,
        in deterministic site order."""
        self.time += self.topology.sync_interval_s
        for site in self.topology.sites:
            if self.alive[site]:
                self.nodes[site].anti_entropy_tick()
        for site in self.topology.sites:
            if self.alive[site]:
                self.nodes[site].agent_step()

    def converged(self) -> bool:
        states = [self.nodes[s].canonical_state()
                  for s in self.topology.sites if self.alive[s]]
        vectors = [canonical_json(self.nodes[s].applier.vector.to_doc())
                   for s in self.topology.sites if self.alive[s]]
        return len(set(states)) <= 1 and len(set(vectors)) <= 1

    def wait_converged(self, max_virtual_s: float = 60.0) -> float:
        """Tick until all alive nodes are identical and stable for 2 ticks."""
        start = self.time
        stable = 0
        while self.time - start <= max_virtual_s:
            self.tick()
            if self.converged():
                stable += 1
                if stable >= 2:
                    return self.time - start
            else:
                stable = 0
        raise ConvergenceTimeout(f"not converged within {max_virtual_s}s virtual time")

    def close(self):
        for site, node in self.nodes.items():
            if self.alive[site]:
                node.close()
        if self._owns_base:
            shutil.rmtree(self.base_dir, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --- scripted scenarios ------------------------------------------------------

def run_scenario(doc: dict) -> Report:
    """Execute a scenario document: {"name", "topology": {...}, "steps": [...]}.

    Step ops: ingest, query, partition, partition_site, heal, kill, restart,
    submit_job, tick, wait_converged, flip_frames, assert_converged,
    assert_row_count, assert_resolvable_everywhere, assert_job_done.
    """
    topo_doc = doc.get("topology", {})
    topology = Topology(
        sites=topo_doc.get("sites", ["site-a", "site-b"]),
        seed=topo_doc.get("seed", 0),
        sync_interval_s=topo_doc.get("sync_interval_s", 5.0),
        drop_probability=topo_doc.get("drop_probability", 0.0),
        job_stall_s=topo_doc.get("job_stall_s", 300.0),
    )
    net = SimNet(topology)
    report = net.report
    last_lfns: list[str] = []
    last_job: bytes | None = None
    try:
        for i, step in enumerate(doc.get("steps", [])):
            op = step.get("op")
            label = f"step {i}: {op}"
            if op == "ingest":
                spec = PhantomSpec(**step.get("phantom", {}))
                mgd, _ = generate_phantom(spec)
                lfn, _ = net.node(step["site"]).ingest(mgd)
                last_lfns.append(lfn)
            elif op == "query":
                net.node(step["site"]).federated_query(step["text"])
            elif op == "partition":
                net.partition([tuple(p) for p in step["pairs"]])
            elif op == "partition_site":
                net.partition_site(step["site"])
            elif op == "heal":
                net.heal()
            elif op == "kill":
                net.kill(step["site"])
            elif op == "restart":
                net.restart(step["site"], step.get("recover_truncated", False))
            elif op == "flip_frames":
                net.inject_flip_frames(step.get("count", 1))
            elif op == "submit_job":
                job_doc = net.node(step["site"]).submit_job(
                    step["algorithm"], step.get("params", {}),
                    step.get("inputs") or last_lfns)
                last_job = bytes.fromhex(job_doc["id"])
            elif op == "tick":
                for _ in range(step.get("count", 1)):
                    net.tick()
            elif op == "wait_converged":
                try:
                    net.wait_converged(step.get("max_s", 60.0))
                    report.assertions.append((label, True, "converged"))
                except ConvergenceTimeout as e:
                    report.assertions.append((label, False, str(e)))
            elif op == "assert_converged":
                ok = net.converged()
                report.assertions.append((label, ok, "" if ok else "states differ"))
            elif op == "assert_row_count":
                result = net.node(step["site"]).federated_query(step["text"])
                ok = len(result.rows) == step["count"]
                report.assertions.append(
                    (label, ok, f"got {len(result.rows)}, want {step['count']}"))
            elif op == "assert_resolvable_everywhere":
                missing = []
                for site in topology.sites:
                    if not net.alive[site]:
                        continue
                    for lfn in (step.get("lfns") or last_lfns):
                        try:
                            net.node(site).catalogue.resolve(lfn)
                        except Exception:
                            missing.append((site, lfn))
                report.assertions.append((label, not missing, f"missing: {missing}"))
            elif op == "assert_job_done":
                ok, detail = True, ""
                for site in topology.sites:
                    if not net.alive[site]:
                        continue
                    status = net.node(site).job_status(last_job)["status"]
                    if status != "done":
                        ok, detail = False, f"{site}: {status}"
                report.assertions.append((label, ok, detail))
            else:
                raise SimError(f"unknown scenario op {op!r}")
    finally:
        net.close()
    return report


def load_scenario(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)
