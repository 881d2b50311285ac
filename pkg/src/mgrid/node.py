"""The per-site node ("gridbox"): configuration, on-disk layout, ingest
pipeline, local and federated query handling, sync participation, and the
job agent.

Layout under the data directory:

    config.json
    log/changes.log        write-ahead change log (own + replicated records)
    store/<b0>/<b1>/<guid-hex>.mgd   content-addressed immutable files
    reid/reid.log          pseudonym <-> original id pairs, origin site only
    snapshots/

The reid log is the single place an original patient id is persisted; it
never rides the change log or any wire interface.
"""

from __future__ import annotations

import io
import json
import os
import random
import threading
import time
from dataclasses import dataclass, field, asdict

from . import analysis, dataset as dsmod, federation, querylang
from .catalogue import (Catalogue, FileEntry, NotFound,
                        check_site_id, parse_lfn)
from .jobs import (ALGORITHMS, JobState, UnknownAlgorithm,
                   UnknownLfn, choose_target)
from .metastore import AttributeDescriptor, MetaRecord, MetaStore
from .sync import (ChangeLog, ChangeRecord, Applier,
                   PULL_PAGE_CAP, records_since)
from . import transfer


class NodeError(Exception):
    pass


class BadConfig(NodeError):
    def __init__(self, fieldname: str, message: str = ""):
        self.field = fieldname
        super().__init__(f"bad config field {fieldname}: {message}")


class DirNotEmpty(NodeError):
    pass


class DuplicateSop(NodeError):
    pass


class DecodeError(NodeError):
    pass


class StorageFailure(NodeError):
    pass


class FetchFailed(NodeError):
    pass


@dataclass
class PeerInfo:
    site_id: str
    dimse: str = ""
    http: str = ""


@dataclass
class NodeConfig:
    site_id: str
    ae_title: str
    data_dir: str
    listen_dimse: str = "127.0.0.1:11112"
    listen_http: str = "127.0.0.1:8112"
    peers: list[PeerInfo] = field(default_factory=list)
    federation_key_id: int = 1
    federation_key: bytes = b""
    sync_interval_s: float = 5.0
    query_timeout_s: float = 10.0
    replicate_threshold_bytes: int = 64 * 1024 * 1024
    analysis_workers: int = 2
    job_stall_s: float = 300.0

    def check(self):
        try:
            check_site_id(self.site_id)
        except Exception as e:
            raise BadConfig("site_id", str(e)) from None
        if len(self.federation_key) != 32 or self.federation_key == bytes(32):
            raise BadConfig("federation_key", "must be 32 non-zero bytes")
        if not (0 <= self.federation_key_id <= 255):
            raise BadConfig("federation_key_id", "must fit in one byte")
        try:
            transfer.pad_ae(self.ae_title)
        except Exception as e:
            raise BadConfig("ae_title", str(e)) from None
        if any(p.site_id == self.site_id for p in self.peers):
            raise BadConfig("peers", "peer list must not contain this site")

    def to_doc(self) -> dict:
        doc = asdict(self)
        doc["federation_key"] = self.federation_key.hex()
        return doc

    @staticmethod
    def from_doc(doc: dict) -> "NodeConfig":
        doc = dict(doc)
        doc["peers"] = [PeerInfo(**p) for p in doc.get("peers", [])]
        doc["federation_key"] = bytes.fromhex(doc.get("federation_key", ""))
        try:
            cfg = NodeConfig(**doc)
        except TypeError as e:
            raise BadConfig("?", str(e)) from None
        cfg.check()
        return cfg


class Transport:
    """How a node reaches its peers. The simulation harness substitutes an
    in-process implementation with a fault model; real deployments use the
    HTTP/TCP one in netio."""

    def query(self, site: str, ast_doc: dict) -> list[dict]:
        raise federation.PeerError(f"no route to {site}")

    def pull_changes(self, site: str, vector_doc: dict) -> list[dict]:
        raise federation.PeerError(f"no route to {site}")

    def push(self, site: str, record_docs: list[dict]):
        raise federation.PeerError(f"no route to {site}")

    def fetch(self, site: str, guid: bytes, expect_checksum: bytes) -> bytes:
        raise federation.PeerError(f"no route to {site}")


def init(config: NodeConfig):
    """Create the on-disk layout for a fresh node."""
    config.check()
    d = config.data_dir
    if os.path.exists(d) and os.listdir(d):
        raise DirNotEmpty(d)
    os.makedirs(d, exist_ok=True)
    for sub in ("log", "store", "reid", "snapshots"):
        os.makedirs(os.path.join(d, sub))
    with open(os.path.join(d, "config.json"), "w") as fh:
        json.dump(config.to_doc(), fh, indent=2)
    open(os.path.join(d, "log", "changes.log"), "wb").close()
    fd = os.open(os.path.join(d, "reid", "reid.log"),
                 os.O_CREAT | os.O_WRONLY, 0o600)
    os.close(fd)


class Node:
    """One site's node. All state mutations run through the serialized
    change appender; reads see consistent in-memory snapshots."""

    def __init__(self, data_dir: str, transport: Transport | None = None,
                 now=None, rng: random.Random | None = None,
                 recover_truncated: bool = False):
        with open(os.path.join(data_dir, "config.json")) as fh:
            self.config = NodeConfig.from_doc(json.load(fh))
        self.config.data_dir = data_dir
        self.site = self.config.site_id
        self.transport = transport or Transport()
        self.now = now or time.time
        self.rng = rng or random.Random()
        self.started_at = self.now()

        self.catalogue = Catalogue()
        self.metastore = MetaStore()
        self.jobstate = JobState()
        self.applier = Applier(self._apply_record)
        self._lock = threading.RLock()

        self.log = ChangeLog(os.path.join(data_dir, "log", "changes.log"),
                             recover_truncated=recover_truncated)
        for record in self.log.records:
            self.applier.apply(record)
        self.local_seq = max((r.seq for r in self.log.records if r.origin == self.site),
                             default=0)
        self._sweep_orphans()

    # --- persistence helpers -------------------------------------------------

    def store_path(self, guid: bytes) -> str:
        h = guid.hex()
        return os.path.join(self.config.data_dir, "store", h[:2], h[2:4], h + ".mgd")

    def _sweep_orphans(self):
        """Delete store files with no catalogue entry (crash between file
        write and log append leaves them; they were never acknowledged)."""
        store = os.path.join(self.config.data_dir, "store")
        for root, _, files in os.walk(store):
            for name in files:
                if not name.endswith(".mgd"):
                    continue
                guid = bytes.fromhex(name[:-4])
                if guid not in self.catalogue.entries_by_guid:
                    os.unlink(os.path.join(root, name))

    def _write_store_file(self, guid: bytes, data: bytes) -> str:
        path = self.store_path(guid)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        return os.path.relpath(path, self.config.data_dir)

    def _append_reid(self, pseudonym: str, original: str):
        with open(os.path.join(self.config.data_dir, "reid", "reid.log"), "a") as fh:
            fh.write(f"{pseudonym}\t{original}\n")

    # --- change log path -----------------------------------------------------

    def _apply_record(self, r: ChangeRecord):
        p = r.payload
        if r.kind == "AddFile":
            self.catalogue.add_entry(FileEntry(
                p["lfn"], bytes.fromhex(p["guid"]), p["size"],
                bytes.fromhex(p["checksum"]), r.origin, r.seq))
        elif r.kind == "AddReplica":
            self.catalogue.apply_replica(bytes.fromhex(p["guid"]), p["site"], p["pfn"])
        elif r.kind == "PutMeta":
            self.metastore.put_meta(MetaRecord(
                p["entity"], p["id"], p["attr"], p["value"], p["version"], r.origin))
        elif r.kind == "DefineAttr":
            self.metastore.define_attribute(AttributeDescriptor(
                p["name"], p["entity"], p["vtype"], p.get("unit", "")))
        elif r.kind == "JobEvent":
            self.jobstate.apply_event(p, r.origin, r.seq, self.now())

    def append_changes(self, changes: list[tuple[str, dict]]) -> list[ChangeRecord]:
        """Write-ahead append of locally originated records, apply them, then
        push the batch to peers best-effort."""
        with self._lock:
            records = []
            for kind, payload in changes:
                self.local_seq += 1
                records.append(ChangeRecord(self.site, self.local_seq, kind, payload))
            self.log.append_batch(records)
            for record in records:
                self.applier.apply(record)
        docs = [r.to_doc() for r in records]
        for peer in self.config.peers:
            try:
                self.transport.push(peer.site_id, docs)
            except Exception:
                pass  # anti-entropy will repair
        return records

    def receive_remote(self, record_doc: dict):
        """Accept one replicated record: verify, persist, apply (idempotent,
        gap-buffered)."""
        record = ChangeRecord.from_doc(record_doc)
        with self._lock:
            if record.origin == self.site:
                return
            if record.seq <= self.applier.vector.get(record.origin):
                return
            pending = self.applier.buffer.get(record.origin, {})
            if record.seq in pending:
                return
            # replicated records skip the fsync: a peer can re-supply them
            self.log.append(record, durable=False)
            self.applier.apply(record)

    def anti_entropy_tick(self):
        """Pull everything above our vector from each peer; per-peer failures
        are skipped and retried next tick."""
        for peer in self.config.peers:
            try:
                for _ in range(100):  # page bound
                    docs = self.transport.pull_changes(
                        peer.site_id, self.applier.vector.to_doc())
                    for doc in docs:
                        self.receive_remote(doc)
                    if len(docs) < PULL_PAGE_CAP:
                        break
            except Exception:
                continue

    def changes_since(self, vector_doc: dict) -> list[dict]:
        with self._lock:
            return [r.to_doc() for r in records_since(self.log.records, vector_doc)]

    # --- ingest --------------------------------------------------------------

    def ingest(self, mgd_bytes: bytes, patient_attrs: dict | None = None,
               already_anonymized: bool = False) -> tuple[str, bytes]:
        """The single security boundary: decode, anonymize (or verify),
        compute QC metrics, store the file, and append the change batch.
        Returns (lfn, guid) after the batch is durably logged."""
        try:
            ds = dsmod.decode(mgd_bytes)
        except dsmod.DatasetError as e:
            raise DecodeError(str(e)) from None
        if ds.get(dsmod.PIXEL_DATA) is None:
            raise DecodeError("dataset has no PixelData")

        reid_pair = None
        if already_anonymized:
            reason = dsmod.verify_anonymized(ds)
            if reason is not None:
                raise DecodeError(reason)
            stored = mgd_bytes
        else:
            ds, reid_pair = dsmod.anonymize(ds, self.config.federation_key)
            stored = dsmod.encode(ds)

        sop = ds.require(dsmod.SOP_INSTANCE_UID).as_str()
        if self.metastore.get_current("image", sop, "lfn") is not None:
            raise DuplicateSop(sop)
        pseudonym = ds.require(dsmod.PATIENT_ID).as_str()
        study_el = ds.get(dsmod.STUDY_INSTANCE_UID)
        study_uid = study_el.as_str() if study_el is not None else "study-unknown"
        lfn = f"/acq/{self.site}/{pseudonym}/{study_uid}/{sop}.mgd"
        parse_lfn(lfn)

        qc = analysis.qc_report(analysis.image_from_dataset(ds))
        guid = self._mint_guid()
        checksum = dsmod.checksum(stored)

        if reid_pair is not None:
            self._append_reid(*reid_pair)
        pfn = self._write_store_file(guid, stored)

        changes: list[tuple[str, dict]] = [
            ("AddFile", {"lfn": lfn, "guid": guid.hex(), "size": len(stored),
                         "checksum": checksum.hex()}),
            ("AddReplica", {"guid": guid.hex(), "site": self.site, "pfn": pfn}),
        ]
        changes += self._meta_changes("image", sop, {
            "lfn": lfn,
            "study_id": study_uid,
            "mean_brightness": qc.mean_brightness,
            "rms_contrast": qc.rms_contrast,
            "breast_density": qc.breast_density,
            "microcalc_count": qc.microcalc_count,
        })
        study_attrs: dict[str, object] = {"patient_id": pseudonym}
        date_el = ds.get(dsmod.STUDY_DATE)
        if date_el is not None and len(date_el.as_str()) == 8:
            raw = date_el.as_str()
            study_attrs["date"] = f"{raw[:4]}-{raw[4:6]}-{raw[6:]}"
        changes += self._meta_changes("study", study_uid, study_attrs)
        patient_attrs_out: dict[str, object] = {}
        age_el = ds.get(dsmod.PATIENT_AGE)
        if age_el is not None:
            raw = age_el.as_str()
            if raw.endswith("Y") and raw[:-1].isdigit():
                patient_attrs_out["age"] = int(raw[:-1])
        sex_el = ds.get(dsmod.PATIENT_SEX)
        if sex_el is not None:
            patient_attrs_out["sex"] = sex_el.as_str()
        for k, v in (patient_attrs or {}).items():
            patient_attrs_out[k] = v
        changes += self._meta_changes("patient", pseudonym, patient_attrs_out)

        try:
            self.append_changes(changes)
        except Exception as e:
            # nothing acknowledged: remove the store file again
            try:
                os.unlink(self.store_path(guid))
            except OSError:
                pass
            raise StorageFailure(str(e)) from e
        return lfn, guid

    def _meta_changes(self, entity: str, entity_id: str,
                      attrs: dict[str, object]) -> list[tuple[str, dict]]:
        out = []
        for attr, value in attrs.items():
            version = self.metastore.next_version(entity, entity_id, attr)
            out.append(("PutMeta", {"entity": entity, "id": entity_id,
                                    "attr": attr, "value": value,
                                    "version": version}))
        return out

    def _mint_guid(self) -> bytes:
        while True:
            guid = self.rng.getrandbits(128).to_bytes(16, "big")
            if guid not in self.catalogue.entries_by_guid:
                return guid

    # --- queries -------------------------------------------------------------

    def evaluate_subquery(self, ast_doc: dict) -> list[dict]:
        ast = querylang.from_doc(ast_doc)
        ast = querylang.validate(ast, self.metastore)
        return [r.to_doc() for r in
                querylang.evaluate_local(ast, self.metastore, self.site)]

    def federated_query(self, text: str) -> federation.FederatedResult:
        ast = querylang.validate(querylang.parse(text), self.metastore)
        p = federation.plan(ast, self.site, [pr.site_id for pr in self.config.peers],
                            self.config.query_timeout_s)
        return federation.execute(p, self._query_site)

    def _query_site(self, site: str, ast_doc: dict) -> list[dict]:
        if site == self.site:
            return self.evaluate_subquery(ast_doc)
        return self.transport.query(site, ast_doc)

    # --- file access ---------------------------------------------------------

    def file_bytes_local(self, guid: bytes) -> bytes | None:
        path = self.store_path(guid)
        if not os.path.exists(path):
            return None
        return open(path, "rb").read()

    def fetch_file(self, guid: bytes) -> bytes:
        """Local bytes, or replicate-back from any peer holding the file;
        the new replica is registered."""
        entry, replicas = self.catalogue.resolve_guid(guid)
        data = self.file_bytes_local(guid)
        if data is not None:
            return data
        for rep in replicas:
            if rep.site == self.site:
                continue
            try:
                data = self.transport.fetch(rep.site, guid, entry.checksum)
            except Exception:
                continue
            pfn = self._write_store_file(guid, data)
            self.append_changes([
                ("AddReplica", {"guid": guid.hex(), "site": self.site, "pfn": pfn})])
            return data
        raise FetchFailed(guid.hex())

    def fetch_lfn(self, lfn: str) -> bytes:
        entry, _ = self.catalogue.resolve(lfn)
        return self.fetch_file(entry.guid)

    def render_preview(self, guid: bytes) -> bytes:
        """8-bit grayscale PNG, max dimension 512, area-averaged downscale,
        16-bit images windowed by their min/max."""
        from PIL import Image as PilImage
        data = self.fetch_file(guid)
        ds = dsmod.decode(data)
        img = analysis.image_from_dataset(ds)
        pix = img.pixels.astype("float64")
        lo, hi = pix.min(), pix.max()
        if img.bits == 16:
            pix = (pix - lo) * (255.0 / (hi - lo)) if hi > lo else pix * 0
        pil = PilImage.fromarray(pix.astype("uint8"), mode="L")
        if max(pil.size) > 512:
            scale = 512.0 / max(pil.size)
            new = (max(1, round(pil.size[0] * scale)), max(1, round(pil.size[1] * scale)))
            pil = pil.resize(new, PilImage.BOX)
        buf = io.BytesIO()
        pil.save(buf, format="PNG")
        return buf.getvalue()

    # --- jobs ----------------------------------------------------------------

    def submit_job(self, algorithm: str, params: dict, inputs: list[str]) -> dict:
        if algorithm not in ALGORITHMS:
            raise UnknownAlgorithm(algorithm)
        for lfn in inputs:
            try:
                self.catalogue.resolve(lfn)
            except NotFound:
                raise UnknownLfn(lfn) from None
        target = choose_target(inputs, self.catalogue)
        job_id = self._mint_guid()
        self.append_changes([("JobEvent", {
            "job": job_id.hex(), "transition": "queued", "algorithm": algorithm,
            "params": params, "inputs": list(inputs), "target": target})])
        return self.jobstate.status(job_id).to_doc()

    def job_status(self, job_id: bytes) -> dict:
        return self.jobstate.status(job_id).to_doc()

    def agent_step(self):
        """Pull-style agent: run queued jobs targeted at this site, and
        re-run jobs stalled past the stall timeout."""
        for job in self.jobstate.queued_for(self.site):
            self.run_job(job.id)
        for job in self.jobstate.stalled_for(self.site, self.now(),
                                             self.config.job_stall_s):
            self.run_job(job.id)

    def _job_event(self, job_id: bytes, transition: str, **extra):
        payload = {"job": job_id.hex(), "transition": transition}
        payload.update(extra)
        self.append_changes([("JobEvent", payload)])

    def run_job(self, job_id: bytes):
        job = self.jobstate.status(job_id)
        self._job_event(job_id, "claimed")
        self._job_event(job_id, "running")
        try:
            outputs = self._execute_job(job)
        except Exception as e:
            self._job_event(job_id, "failed", reason=str(e) or type(e).__name__)
            return
        self._job_event(job_id, "done", outputs=outputs)

    def _execute_job(self, job) -> list[str]:
        outputs: list[str] = []
        for lfn in job.inputs:
            entry, _ = self.catalogue.resolve(lfn)
            try:
                data = self.fetch_file(entry.guid)
            except transfer.ChecksumMismatch:
                raise RuntimeError("checksum") from None
            if dsmod.checksum(data) != entry.checksum:
                raise RuntimeError("checksum")
            ds = dsmod.decode(data)
            img = analysis.image_from_dataset(ds)
            sop = ds.require(dsmod.SOP_INSTANCE_UID).as_str()
            if job.algorithm == "qc_report":
                qc = analysis.qc_report(img, job.params or None)
                self.append_changes(self._meta_changes("image", sop, {
                    "mean_brightness": qc.mean_brightness,
                    "rms_contrast": qc.rms_contrast,
                    "breast_density": qc.breast_density,
                    "microcalc_count": qc.microcalc_count,
                }))
            elif job.algorithm == "detect_microcalcs":
                mask = analysis.segment_breast(img)
                det = analysis.detect_microcalcs(img, mask, job.params or None)
                self.append_changes(self._meta_changes("image", sop, {
                    "microcalc_count": det.count,
                    "microcalc_detections": json.dumps(
                        {"centroids": det.centroids}, sort_keys=True),
                }))
            elif job.algorithm == "standardize":
                outputs.append(self._standardize_one(job, ds, img, sop))
            else:
                raise RuntimeError(f"unknown algorithm {job.algorithm}")
        return outputs

    def _standardize_one(self, job, ds, img, sop: str) -> str:
        import hashlib
        mask = analysis.segment_breast(img)
        out_img = analysis.standardize(img, mask)
        new_sop = "std-" + hashlib.sha256(job.id + sop.encode()).hexdigest()[:16]
        out_ds = ds.with_elements({
            dsmod.SOP_INSTANCE_UID: new_sop,
            dsmod.PIXEL_DATA: dsmod.make_element(
                dsmod.PIXEL_DATA, analysis.pixels_to_bytes(out_img.pixels, out_img.bits)),
        })
        out_bytes = dsmod.encode(out_ds)
        # content-addressed: identical re-runs mint the identical guid
        guid = hashlib.sha256(out_bytes).digest()[:16]
        lfn = f"/derived/{job.id.hex()}/{new_sop}.mgd"
        if lfn in self.catalogue.entries_by_lfn:
            return lfn  # earlier (possibly interrupted) run already registered it
        pfn = self._write_store_file(guid, out_bytes)
        changes: list[tuple[str, dict]] = [
            ("AddFile", {"lfn": lfn, "guid": guid.hex(), "size": len(out_bytes),
                         "checksum": dsmod.checksum(out_bytes).hex()}),
            ("AddReplica", {"guid": guid.hex(), "site": self.site, "pfn": pfn}),
        ]
        changes += self._meta_changes("image", new_sop, {
            "lfn": lfn, "study_id": out_ds.require(dsmod.STUDY_INSTANCE_UID).as_str()
            if out_ds.get(dsmod.STUDY_INSTANCE_UID) else "study-unknown",
            "standardized": 1,
        })
        self.append_changes(changes)
        return lfn

    # --- DIMSE service -------------------------------------------------------

    def dimse_service(self) -> transfer.DimseService:
        node = self

        class Service(transfer.DimseService):
            ae_title = node.config.ae_title
            keys = {node.config.federation_key_id: node.config.federation_key}

            def dimse_store(self, mgd_bytes: bytes) -> tuple[int, str]:
                try:
                    node.ingest(mgd_bytes, already_anonymized=True)
                    return transfer.ST_SUCCESS, ""
                except DuplicateSop:
                    return transfer.ST_FAILURE, "duplicate"
                except (DecodeError, NodeError) as e:
                    return transfer.ST_FAILURE, str(e)

            def dimse_find(self, ast_doc: dict) -> list[dict]:
                try:
                    return node.evaluate_subquery(ast_doc)
                except querylang.QueryError as e:
                    raise ValueError(str(e)) from None

            def dimse_get(self, guid: bytes) -> bytes | None:
                return node.file_bytes_local(guid)

        return Service()

    # --- introspection -------------------------------------------------------

    def canonical_state(self) -> bytes:
        from .sync import canonical_json
        return canonical_json({
            "catalogue": self.catalogue.canonical_doc(),
            "metastore": self.metastore.canonical_doc(),
        })

    def status_doc(self) -> dict:
        return {
            "site": self.site,
            "vector": self.applier.vector.to_doc(),
            "peers": [p.site_id for p in self.config.peers],
            "uptime_s": self.now() - self.started_at,
            "files": len(self.catalogue.entries_by_lfn),
        }

    def close(self):
        self.log.close()
