import pytest

from mgrid import jobs
from mgrid.catalogue import Catalogue


def build_catalogue(replica_map):
    """replica_map: lfn -> list of sites (first is origin)."""
    c = Catalogue()
    for n, (lfn, sites) in enumerate(replica_map.items(), start=1):
        c.register_file(lfn, n.to_bytes(16, "big"), 100, bytes(32), sites[0], n, "p")
        for s in sites[1:]:
            c.add_replica(n.to_bytes(16, "big"), s, "p")
    return c


class TestChooseTarget:
    def test_most_replicas_wins(self):
        c = build_catalogue({
            "/f1": ["site-b"], "/f2": ["site-b"], "/f3": ["site-a"],
        })
        assert jobs.choose_target(["/f1", "/f2", "/f3"], c) == "site-b"

    def test_tie_breaks_lexicographic(self):
        c = build_catalogue({"/f1": ["site-c"], "/f2": ["site-b"]})
        assert jobs.choose_target(["/f1", "/f2"], c) == "site-b"

    def test_replicated_everywhere_counts_per_site(self):
        c = build_catalogue({"/f1": ["site-a", "site-b"], "/f2": ["site-b"]})
        assert jobs.choose_target(["/f1", "/f2"], c) == "site-b"

    def test_unknown_input(self):
        c = build_catalogue({"/f1": ["site-a"]})
        with pytest.raises(jobs.UnknownLfn):
            jobs.choose_target(["/missing"], c)


def queued_payload(job_id, target="site-b", algorithm="qc_report"):
    return {"job": job_id, "transition": "queued", "algorithm": algorithm,
            "params": {}, "inputs": ["/f1"], "target": target}


def ev(job_id, transition, **extra):
    return dict({"job": job_id, "transition": transition}, **extra)


class TestJobState:
    JID = "00" * 16

    def make(self, target="site-b"):
        st = jobs.JobState()
        st.apply_event(queued_payload(self.JID, target), "site-a", 1, 0.0)
        return st

    def test_queued(self):
        st = self.make()
        job = st.status(bytes(16))
        assert job.status == jobs.QUEUED
        assert job.target == "site-b" and job.submitter == "site-a"

    def test_lifecycle(self):
        st = self.make()
        for i, tr in enumerate(("claimed", "running"), start=2):
            st.apply_event(ev(self.JID, tr), "site-b", i, float(i))
        st.apply_event(ev(self.JID, "done", outputs=["/derived/x"]), "site-b", 4, 4.0)
        job = st.status(bytes(16))
        assert job.status == jobs.DONE
        assert job.outputs == ["/derived/x"]

    def test_failed_keeps_reason(self):
        st = self.make()
        st.apply_event(ev(self.JID, "failed", reason="checksum"), "site-b", 2, 1.0)
        assert st.status(bytes(16)).reason == "checksum"

    def test_terminal_never_regresses(self):
        st = self.make()
        st.apply_event(ev(self.JID, "done", outputs=[]), "site-b", 2, 1.0)
        st.apply_event(ev(self.JID, "running"), "site-b", 3, 2.0)
        st.apply_event(ev(self.JID, "failed"), "site-b", 4, 3.0)
        assert st.status(bytes(16)).status == jobs.DONE

    def test_rerun_reemission_ignored(self):
        st = self.make()
        st.apply_event(ev(self.JID, "running"), "site-b", 2, 1.0)
        st.apply_event(ev(self.JID, "claimed"), "site-b", 3, 2.0)  # stall re-run
        assert st.status(bytes(16)).status == jobs.RUNNING

    def test_duplicate_queued_ignored(self):
        st = self.make()
        st.apply_event(queued_payload(self.JID, target="site-z"), "site-a", 9, 9.0)
        assert st.status(bytes(16)).target == "site-b"

    def test_event_before_queued_held_then_applied(self):
        # a target's events can replicate in ahead of the submitter's queued
        # record; they must survive the wait, not be dropped
        st = jobs.JobState()
        st.apply_event(ev(self.JID, "claimed"), "site-b", 1, 0.0)
        st.apply_event(ev(self.JID, "done", outputs=["/derived/x"]), "site-b", 2, 1.0)
        with pytest.raises(jobs.UnknownJob):
            st.status(bytes(16))
        st.apply_event(queued_payload(self.JID), "site-a", 1, 2.0)
        job = st.status(bytes(16))
        assert job.status == jobs.DONE
        assert job.outputs == ["/derived/x"]

    def test_unknown_job(self):
        with pytest.raises(jobs.UnknownJob):
            jobs.JobState().status(bytes(16))

    def test_queued_for_ordering(self):
        st = jobs.JobState()
        st.apply_event(queued_payload("11" * 16), "site-c", 1, 0.0)
        st.apply_event(queued_payload("22" * 16), "site-a", 5, 0.0)
        st.apply_event(queued_payload("33" * 16), "site-a", 2, 0.0)
        st.apply_event(queued_payload("44" * 16, target="site-x"), "site-a", 3, 0.0)
        mine = st.queued_for("site-b")
        assert [j.id.hex() for j in mine] == ["33" * 16, "22" * 16, "11" * 16]
        assert st.queued_for("site-z") == []

    def test_stalled_for(self):
        st = self.make()
        st.apply_event(ev(self.JID, "claimed"), "site-b", 2, 10.0)
        assert st.stalled_for("site-b", now=100.0, stall_s=300.0) == []
        stalled = st.stalled_for("site-b", now=310.0, stall_s=300.0)
        assert [j.id.hex() for j in stalled] == [self.JID]
        # queued and terminal jobs are never "stalled"
        assert st.stalled_for("site-a", now=310.0, stall_s=300.0) == []
