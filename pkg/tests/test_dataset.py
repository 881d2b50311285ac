import hashlib
import hmac
import random
import struct

import pytest

from mgrid import dataset as d

from conftest import random_dataset, sample_dataset


class TestWireFormat:
    def test_header_layout(self):
        ds = d.from_values({d.ROWS: 4})
        raw = d.encode(ds)
        assert raw[:128] == bytes(128)
        assert raw[128:132] == b"DICM"
        # group u16 LE | element u16 LE | VR | reserved u16 | length u32 LE | value
        assert raw[132:] == bytes.fromhex("28001000") + b"US" + \
            struct.pack("<HI", 0, 2) + struct.pack("<H", 4)

    def test_odd_string_padded_with_nul(self):
        ds = d.from_values({d.SOP_INSTANCE_UID: "1.2.3"})
        raw = d.encode(ds)
        assert raw.endswith(b"1.2.3\x00")
        assert d.decode(raw).require(d.SOP_INSTANCE_UID).as_str() == "1.2.3"

    def test_encode_is_deterministic(self):
        ds = sample_dataset()
        assert d.encode(ds) == d.encode(ds)

    def test_roundtrip_random(self, rng):
        for _ in range(300):
            ds = random_dataset(rng)
            raw = d.encode(ds)
            back = d.decode(raw)
            assert back == ds
            assert d.encode(back) == raw


class TestDecoderStrictness:
    def test_bad_magic(self):
        with pytest.raises(d.BadMagic):
            d.decode(bytes(128) + b"DICX")
        with pytest.raises(d.BadMagic):
            d.decode(b"DICM")  # no preamble

    def test_unknown_tag(self):
        raw = bytearray(d.encode(d.from_values({d.ROWS: 4})))
        raw[132:134] = b"\x29\x00"  # group 0x0029 is not in the dictionary
        with pytest.raises(d.UnknownTag):
            d.decode(bytes(raw))

    def test_vr_mismatch(self):
        raw = bytearray(d.encode(d.from_values({d.ROWS: 4})))
        raw[136:138] = b"UL"
        with pytest.raises(d.VrMismatch):
            d.decode(bytes(raw))

    def test_nonzero_reserved(self):
        raw = bytearray(d.encode(d.from_values({d.ROWS: 4})))
        raw[138] = 1
        with pytest.raises(d.VrMismatch):
            d.decode(bytes(raw))

    def test_truncated_value(self):
        raw = d.encode(sample_dataset())
        with pytest.raises(d.Truncated):
            d.decode(raw[:-1])

    def test_truncated_header(self):
        raw = d.encode(d.from_values({d.ROWS: 4}))
        with pytest.raises(d.Truncated):
            d.decode(raw[:135])

    def test_duplicate_tag(self):
        one = d.encode(d.from_values({d.ROWS: 4}))
        raw = one + one[132:]
        with pytest.raises(d.DuplicateTag):
            d.decode(raw)

    def test_out_of_order(self):
        a = d.encode(d.from_values({d.ROWS: 4}))[132:]
        b = d.encode(d.from_values({d.SOP_INSTANCE_UID: "1.2"}))[132:]
        with pytest.raises(d.OutOfOrder):
            d.decode(bytes(128) + b"DICM" + a + b)

    def test_pixel_length_invariant(self):
        ds = sample_dataset(rows=8, cols=8, bits=8)
        raw = bytearray(d.encode(ds))
        # shrink the declared Rows so the pixel block no longer matches
        rows_el = raw.index(bytes.fromhex("28001000"))
        raw[rows_el + 12:rows_el + 14] = struct.pack("<H", 7)
        with pytest.raises(d.InvariantViolation):
            d.decode(bytes(raw))

    def test_fuzz_random_bytes_never_crash(self, rng):
        for _ in range(500):
            blob = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 200)))
            with pytest.raises(d.DatasetError):
                d.decode(blob)

    def test_fuzz_mutated_valid_streams(self, rng):
        base = d.encode(sample_dataset())
        for _ in range(500):
            raw = bytearray(base)
            for _ in range(rng.randrange(1, 4)):
                raw[rng.randrange(len(raw))] = rng.randrange(256)
            try:
                d.decode(bytes(raw))
            except d.DatasetError:
                pass  # either outcome is fine; crashing is not


class TestAnonymization:
    def test_pseudonym_golden(self):
        # Independently derived: HMAC-SHA-256(key = 32 zero bytes, "P123")
        # starts c4fb3e23b9651d8d... (checked with a standalone HMAC tool);
        # the pseudonym is the first 8 digest bytes in lowercase hex.
        assert d.pseudonymize_id("P123", bytes(32)) == "c4fb3e23b9651d8d"

    def test_pseudonym_matches_hmac_definition(self, rng):
        for _ in range(50):
            key = bytes(rng.randrange(256) for _ in range(32))
            pid = "PT-%06d" % rng.randrange(10 ** 6)
            expect = hmac.new(key, pid.encode(), hashlib.sha256).digest()[:8].hex()
            assert d.pseudonymize_id(pid, key) == expect

    def test_distinct_ids_distinct_pseudonyms(self, rng):
        key = bytes(range(32))
        seen = {}
        for i in range(2000):
            pid = f"PT-{i:08d}"
            p = d.pseudonymize_id(pid, key)
            assert p not in seen
            seen[p] = pid

    def test_key_sensitivity(self):
        assert d.pseudonymize_id("P123", bytes(32)) != \
            d.pseudonymize_id("P123", bytes([1]) + bytes(31))

    def test_anonymize_strips_identity(self):
        ds = sample_dataset()
        out, (pseudonym, original) = d.anonymize(ds, bytes(32))
        assert original == "P123"
        assert pseudonym == "c4fb3e23b9651d8d"
        assert out.get(d.PATIENT_NAME) is None
        assert out.get(d.PATIENT_BIRTH_DATE) is None
        assert out.require(d.PATIENT_ID).as_str() == pseudonym
        assert b"P123" not in d.encode(out)
        assert b"Doe" not in d.encode(out)
        # non-identity elements survive untouched
        assert out.require(d.PATIENT_SEX).as_str() == "F"
        assert out.require(d.PIXEL_DATA).value == ds.require(d.PIXEL_DATA).value

    def test_anonymize_requires_patient_id(self):
        ds = d.from_values({d.SOP_INSTANCE_UID: "1.2"})
        with pytest.raises(d.MissingPatientID):
            d.anonymize(ds, bytes(32))

    def test_verify_anonymized(self):
        ds = sample_dataset()
        assert d.verify_anonymized(ds) == "not anonymized"
        out, _ = d.anonymize(ds, bytes(32))
        assert d.verify_anonymized(out) is None
        assert d.verify_anonymized(
            d.from_values({d.SOP_INSTANCE_UID: "1.2"})) == "missing PatientID"
        # bare id removal is not enough: the id must look like a pseudonym
        bare = ds.with_elements({}, remove={d.PATIENT_NAME, d.PATIENT_BIRTH_DATE})
        assert d.verify_anonymized(bare) == "not anonymized"


class TestChecksum:
    def test_checksum_is_sha256(self):
        raw = d.encode(sample_dataset())
        assert d.checksum(raw) == hashlib.sha256(raw).digest()
