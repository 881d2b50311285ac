import random

import pytest

from mgrid import metastore as ms


@pytest.fixture
def store():
    return ms.MetaStore()


class TestDescriptors:
    def test_builtins_present(self, store):
        assert store.descriptor("image", "mean_brightness").vtype == "float"
        assert store.descriptor("image", "study_id").vtype == "string"
        assert store.descriptor("study", "patient_id").vtype == "string"
        assert store.descriptor("study", "date").vtype == "date"
        assert store.descriptor("patient", "age").vtype == "int"

    def test_define_idempotent(self, store):
        d = ms.AttributeDescriptor("shape_score", "image", "float", "au")
        store.define_attribute(d)
        store.define_attribute(d)  # same definition twice is a no-op
        assert store.descriptor("image", "shape_score") == d

    def test_define_conflict(self, store):
        store.define_attribute(ms.AttributeDescriptor("shape_score", "image", "float"))
        with pytest.raises(ms.ConflictingDefinition):
            store.define_attribute(ms.AttributeDescriptor("shape_score", "image", "int"))

    def test_bad_descriptors(self):
        for bad in (ms.AttributeDescriptor("Bad", "image", "int"),
                    ms.AttributeDescriptor("x", "series", "int"),
                    ms.AttributeDescriptor("x", "image", "blob")):
            with pytest.raises(ms.BadDescriptor):
                bad.check()

    def test_unknown_attribute(self, store):
        with pytest.raises(ms.UnknownAttribute):
            store.descriptor("image", "nope")


class TestTyping:
    def test_check_value(self):
        assert ms.check_value("int", 3) == 3
        assert ms.check_value("float", 3) == 3.0
        assert ms.check_value("float", 3.5) == 3.5
        assert ms.check_value("string", "x") == "x"
        assert ms.check_value("date", "2024-01-15") == "2024-01-15"
        for vtype, bad in [("int", 3.5), ("int", True), ("int", "3"),
                           ("float", "3.5"), ("float", True), ("string", 3),
                           ("date", "20240115"), ("date", "2024-13-40")]:
            with pytest.raises(ms.TypeMismatch):
                ms.check_value(vtype, bad)

    def test_put_rejects_wrong_type(self, store):
        with pytest.raises(ms.TypeMismatch):
            store.put_meta(ms.MetaRecord("patient", "p1", "age", "old", 1, "site-a"))


class TestLww:
    def put(self, store, version, origin, value):
        store.put_meta(ms.MetaRecord("patient", "p1", "age", value, version, origin))

    def test_higher_version_wins(self, store):
        self.put(store, 1, "site-a", 40)
        self.put(store, 2, "site-a", 41)
        assert store.get_current("patient", "p1", "age") == 41
        self.put(store, 1, "site-z", 39)  # stale write loses
        assert store.get_current("patient", "p1", "age") == 41

    def test_origin_breaks_version_ties(self, store):
        self.put(store, 3, "site-b", 50)
        self.put(store, 3, "site-a", 60)
        assert store.get_current("patient", "p1", "age") == 50  # site-b > site-a

    def test_idempotent(self, store):
        self.put(store, 2, "site-a", 41)
        self.put(store, 2, "site-a", 41)
        assert store.current[("patient", "p1", "age")] == (2, "site-a", 41)

    def test_order_independence_oracle(self):
        """1000 random puts delivered in two shuffled orders converge to the
        same state, which equals picking max (version, origin) per key."""
        rng = random.Random(7)
        writes = []
        seen = set()
        while len(writes) < 1000:
            entity, attr, value = rng.choice([
                ("patient", "age", rng.randrange(30, 90)),
                ("patient", "sex", rng.choice(["F", "M"])),
                ("image", "mean_brightness", rng.random() * 100),
                ("image", "microcalc_count", rng.randrange(5)),
            ])
            eid = f"e{rng.randrange(20)}"
            version = rng.randrange(1, 10)
            origin = rng.choice(["site-a", "site-b", "site-c"])
            # one writer never reuses a (version, origin) slot for a key
            slot = (entity, eid, attr, version, origin)
            if slot in seen:
                continue
            seen.add(slot)
            writes.append(ms.MetaRecord(entity, eid, attr, value, version, origin))

        def fold(seq):
            s = ms.MetaStore()
            for w in seq:
                s.put_meta(w)
            return s

        a = fold(writes)
        b = fold(rng.sample(writes, len(writes)))
        assert a.canonical_doc() == b.canonical_doc()

        # independent oracle: per key, keep the max (version, origin) write
        want = {}
        for w in writes:
            key = (w.entity, w.entity_id, w.attr)
            if key not in want or (w.version, w.origin) > \
                    (want[key].version, want[key].origin):
                want[key] = w
        for key, w in want.items():
            assert a.current[key] == (w.version, w.origin,
                                      ms.check_value(a.descriptor(w.entity, w.attr).vtype,
                                                     w.value))

    def test_get_current_unwritten(self, store):
        assert store.get_current("patient", "p1", "age") is None

    def test_next_version(self, store):
        assert store.next_version("patient", "p1", "age") == 1
        self.put(store, 1, "site-a", 40)
        assert store.next_version("patient", "p1", "age") == 2


class TestScan:
    def test_scan_sorted(self, store):
        store.put_meta(ms.MetaRecord("patient", "p2", "age", 40, 1, "site-a"))
        store.put_meta(ms.MetaRecord("patient", "p1", "age", 50, 1, "site-a"))
        store.put_meta(ms.MetaRecord("patient", "p1", "sex", "F", 1, "site-a"))
        assert store.scan("patient") == [("p1", {"age": 50, "sex": "F"}),
                                         ("p2", {"age": 40})]
        assert store.scan("image") == []
