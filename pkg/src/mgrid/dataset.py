"""MGD dataset model and codec.

MGD is a deliberately small DICOM-style file format: a fixed, closed tag
dictionary, one transfer syntax (explicit VR, little-endian), and 0x00
padding for every VR. Files are immutable once stored; the codec is strict
and rejects anything outside the dictionary.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field

PREAMBLE_LEN = 128
MAGIC = b"DICM"

VRS = {"UI", "LO", "PN", "DA", "AS", "CS", "SH", "US", "UL", "DS", "OB"}
STRING_VRS = {"UI", "LO", "PN", "DA", "AS", "CS", "SH", "DS"}


class DatasetError(Exception):
    """Base for all dataset/codec errors."""


class InvariantViolation(DatasetError):
    pass


class BadMagic(DatasetError):
    pass


class UnknownTag(DatasetError):
    pass


class VrMismatch(DatasetError):
    pass


class Truncated(DatasetError):
    pass


class DuplicateTag(DatasetError):
    pass


class OutOfOrder(DatasetError):
    pass


class MissingPatientID(DatasetError):
    pass


@dataclass(frozen=True, order=True)
class Tag:
    group: int
    element: int

    def __post_init__(self):
        if not (0 <= self.group <= 0xFFFF and 0 <= self.element <= 0xFFFF):
            raise InvariantViolation(f"tag out of range: {self!r}")

    def __repr__(self):
        return f"({self.group:04X},{self.element:04X})"


# The full tag dictionary. Group 0x0009 is reserved for derived metrics.
TAG_DICT: dict[Tag, tuple[str, str]] = {
    Tag(0x0008, 0x0018): ("UI", "SOPInstanceUID"),
    Tag(0x0008, 0x0020): ("DA", "StudyDate"),
    Tag(0x0008, 0x0060): ("CS", "Modality"),
    Tag(0x0008, 0x0080): ("LO", "InstitutionName"),
    Tag(0x0010, 0x0010): ("PN", "PatientName"),
    Tag(0x0010, 0x0020): ("LO", "PatientID"),
    Tag(0x0010, 0x0030): ("DA", "PatientBirthDate"),
    Tag(0x0010, 0x0040): ("CS", "PatientSex"),
    Tag(0x0010, 0x1010): ("AS", "PatientAge"),
    Tag(0x0020, 0x000D): ("UI", "StudyInstanceUID"),
    Tag(0x0020, 0x000E): ("UI", "SeriesInstanceUID"),
    Tag(0x0028, 0x0010): ("US", "Rows"),
    Tag(0x0028, 0x0011): ("US", "Columns"),
    Tag(0x0028, 0x0100): ("US", "BitsAllocated"),
    Tag(0x0028, 0x0101): ("US", "BitsStored"),
    Tag(0x7FE0, 0x0010): ("OB", "PixelData"),
    Tag(0x0009, 0x0001): ("DS", "MeanBrightness"),
    Tag(0x0009, 0x0002): ("DS", "RmsContrast"),
    Tag(0x0009, 0x0003): ("DS", "BreastDensity"),
    Tag(0x0009, 0x0004): ("UL", "MicrocalcCount"),
}

TAG_BY_NAME: dict[str, Tag] = {name: tag for tag, (_, name) in TAG_DICT.items()}

SOP_INSTANCE_UID = TAG_BY_NAME["SOPInstanceUID"]
STUDY_DATE = TAG_BY_NAME["StudyDate"]
PATIENT_NAME = TAG_BY_NAME["PatientName"]
PATIENT_ID = TAG_BY_NAME["PatientID"]
PATIENT_BIRTH_DATE = TAG_BY_NAME["PatientBirthDate"]
PATIENT_SEX = TAG_BY_NAME["PatientSex"]
PATIENT_AGE = TAG_BY_NAME["PatientAge"]
STUDY_INSTANCE_UID = TAG_BY_NAME["StudyInstanceUID"]
SERIES_INSTANCE_UID = TAG_BY_NAME["SeriesInstanceUID"]
ROWS = TAG_BY_NAME["Rows"]
COLUMNS = TAG_BY_NAME["Columns"]
BITS_ALLOCATED = TAG_BY_NAME["BitsAllocated"]
BITS_STORED = TAG_BY_NAME["BitsStored"]
PIXEL_DATA = TAG_BY_NAME["PixelData"]


@dataclass(frozen=True)
class Element:
    """One tag/VR/value triple. `value` holds the wire bytes, already padded
    to even length with 0x00."""

    tag: Tag
    vr: str
    value: bytes

    def check(self):
        if self.vr not in VRS:
            raise InvariantViolation(f"unknown VR {self.vr!r} at {self.tag}")
        if len(self.value) % 2 != 0:
            raise InvariantViolation(f"odd value length at {self.tag}")
        if self.vr == "US" and len(self.value) != 2:
            raise InvariantViolation(f"US value must be 2 bytes at {self.tag}")
        if self.vr == "UL" and len(self.value) != 4:
            raise InvariantViolation(f"UL value must be 4 bytes at {self.tag}")
        if self.vr in STRING_VRS and any(b >= 0x80 for b in self.value):
            raise InvariantViolation(f"non-ASCII bytes in {self.vr} value at {self.tag}")

    def as_str(self) -> str:
        return self.value.rstrip(b"\x00").decode("ascii")

    def as_int(self) -> int:
        if self.vr == "US":
            return struct.unpack("<H", self.value)[0]
        if self.vr == "UL":
            return struct.unpack("<I", self.value)[0]
        return int(self.as_str())

    def as_float(self) -> float:
        return float(self.as_str())


def _pad(value: bytes) -> bytes:
    return value if len(value) % 2 == 0 else value + b"\x00"


def make_element(tag: Tag, value) -> Element:
    """Build an Element from a python value, using the dictionary VR."""
    if tag not in TAG_DICT:
        raise UnknownTag(f"tag {tag} not in dictionary")
    vr = TAG_DICT[tag][0]
    if vr == "US":
        raw = struct.pack("<H", value)
    elif vr == "UL":
        raw = struct.pack("<I", value)
    elif vr == "OB":
        raw = _pad(bytes(value))
    else:
        if isinstance(value, float):
            value = repr(value)
        raw = _pad(str(value).encode("ascii"))
    el = Element(tag, vr, raw)
    el.check()
    return el


@dataclass
class Dataset:
    """Elements sorted strictly ascending by tag; PixelData (if any) last."""

    elements: list[Element] = field(default_factory=list)

    def check(self):
        prev = None
        for el in self.elements:
            if el.tag not in TAG_DICT:
                raise UnknownTag(f"tag {el.tag} not in dictionary")
            if el.vr != TAG_DICT[el.tag][0]:
                raise VrMismatch(f"VR {el.vr} at {el.tag}, expected {TAG_DICT[el.tag][0]}")
            el.check()
            if prev is not None:
                if el.tag == prev:
                    raise DuplicateTag(f"duplicate tag {el.tag}")
                if el.tag < prev:
                    raise OutOfOrder(f"tag {el.tag} after {prev}")
            prev = el.tag
        px = self.get(PIXEL_DATA)
        if px is not None:
            if self.elements[-1].tag != PIXEL_DATA:
                raise InvariantViolation("PixelData must be the last element")
            rows = self.get(ROWS)
            cols = self.get(COLUMNS)
            bits = self.get(BITS_ALLOCATED)
            if rows is None or cols is None or bits is None:
                raise InvariantViolation("PixelData requires Rows/Columns/BitsAllocated")
            if bits.as_int() not in (8, 16):
                raise InvariantViolation(f"BitsAllocated must be 8 or 16, got {bits.as_int()}")
            expect = rows.as_int() * cols.as_int() * (bits.as_int() // 8)
            if len(px.value) != expect:
                raise InvariantViolation(
                    f"PixelData length {len(px.value)} != Rows*Columns*bytes {expect}"
                )

    def get(self, tag: Tag) -> Element | None:
        for el in self.elements:
            if el.tag == tag:
                return el
        return None

    def require(self, tag: Tag) -> Element:
        el = self.get(tag)
        if el is None:
            raise InvariantViolation(f"missing required element {tag}")
        return el

    def with_elements(self, updates: dict[Tag, object], remove: set[Tag] = frozenset()) -> "Dataset":
        """Return a copy with some tags replaced/added and some removed."""
        kept = {el.tag: el for el in self.elements if el.tag not in remove}
        for tag, value in updates.items():
            kept[tag] = value if isinstance(value, Element) else make_element(tag, value)
        return Dataset(sorted(kept.values(), key=lambda e: e.tag))


def from_values(values: dict[Tag, object]) -> Dataset:
    return Dataset(sorted((make_element(t, v) for t, v in values.items()), key=lambda e: e.tag))


def encode(ds: Dataset) -> bytes:
    """Serialize: 128 zero bytes, "DICM", then each element as
    group u16 LE | element u16 LE | VR (2 ASCII) | reserved u16=0 | length u32 LE | value."""
    ds.check()
    out = bytearray(PREAMBLE_LEN)
    out += MAGIC
    for el in ds.elements:
        out += struct.pack("<HH", el.tag.group, el.tag.element)
        out += el.vr.encode("ascii")
        out += struct.pack("<HI", 0, len(el.value))
        out += el.value
    return bytes(out)


def decode(data: bytes) -> Dataset:
    """Strict inverse of encode. Rejects bad magic, unknown tags, VR
    mismatches, duplicates, out-of-order tags, and truncation."""
    if len(data) < PREAMBLE_LEN + 4 or data[PREAMBLE_LEN:PREAMBLE_LEN + 4] != MAGIC:
        raise BadMagic("not an MGD stream")
    pos = PREAMBLE_LEN + 4
    elements = []
    while pos < len(data):
        if pos + 12 > len(data):
            raise Truncated(f"element header truncated at offset {pos}")
        group, elem = struct.unpack_from("<HH", data, pos)
        tag = Tag(group, elem)
        if tag not in TAG_DICT:
            raise UnknownTag(f"tag {tag} not in dictionary")
        try:
            vr = data[pos + 4:pos + 6].decode("ascii")
        except UnicodeDecodeError:
            raise VrMismatch(f"unreadable VR at {tag}") from None
        if vr != TAG_DICT[tag][0]:
            raise VrMismatch(f"VR {vr!r} at {tag}, expected {TAG_DICT[tag][0]}")
        reserved, length = struct.unpack_from("<HI", data, pos + 6)
        if reserved != 0:
            raise VrMismatch(f"nonzero reserved field at {tag}")
        pos += 12
        if pos + length > len(data):
            raise Truncated(f"value truncated at {tag}")
        elements.append(Element(tag, vr, data[pos:pos + length]))
        pos += length
    ds = Dataset(elements)
    ds.check()
    return ds


def checksum(data: bytes) -> bytes:
    """SHA-256 of the encoded file."""
    return hashlib.sha256(data).digest()


PSEUDONYM_HEX_LEN = 16


def pseudonymize_id(patient_id: str, federation_key: bytes) -> str:
    """Keyed pseudonym: first 8 bytes of HMAC-SHA-256 over the original id,
    as lowercase hex."""
    mac = hmac.new(federation_key, patient_id.encode("ascii"), hashlib.sha256)
    return mac.digest()[:8].hex()


def is_pseudonym(patient_id: str) -> bool:
    return len(patient_id) == PSEUDONYM_HEX_LEN and all(
        c in "0123456789abcdef" for c in patient_id
    )


def anonymize(ds: Dataset, federation_key: bytes) -> tuple[Dataset, tuple[str, str]]:
    """Strip PatientName and PatientBirthDate, replace PatientID with its
    keyed pseudonym. Returns the new dataset and the (pseudonym, original id)
    pair, which must stay at the origin site only.

    Not idempotent: applying it to an already-pseudonymized id hashes again.
    The ingest pipeline guarantees single application.
    """
    id_el = ds.get(PATIENT_ID)
    if id_el is None:
        raise MissingPatientID("dataset has no PatientID")
    original = id_el.as_str()
    pseudonym = pseudonymize_id(original, federation_key)
    out = ds.with_elements(
        {PATIENT_ID: pseudonym}, remove={PATIENT_NAME, PATIENT_BIRTH_DATE}
    )
    return out, (pseudonym, original)


def verify_anonymized(ds: Dataset) -> str | None:
    """Return None if the dataset looks anonymized, else a reason string."""
    if ds.get(PATIENT_NAME) is not None or ds.get(PATIENT_BIRTH_DATE) is not None:
        return "not anonymized"
    id_el = ds.get(PATIENT_ID)
    if id_el is None:
        return "missing PatientID"
    if not is_pseudonym(id_el.as_str()):
        return "not anonymized"
    return None
