"""Description-driven metadata store.

Attribute definitions are themselves data: every stored value is typed by an
AttributeDescriptor, and clinical queries are validated and evaluated against
those descriptors. Concurrent writes merge by last-writer-wins on
(version, origin site), which is commutative, associative, and idempotent,
so replication needs no coordination.
"""

from __future__ import annotations

import datetime
import re
from dataclasses import dataclass, field

ENTITIES = ("patient", "study", "image")
VTYPES = ("int", "float", "string", "date")
NAME_RE = re.compile(r"[a-z_]{1,48}$")


class MetaError(Exception):
    pass


class BadDescriptor(MetaError):
    pass


class ConflictingDefinition(MetaError):
    pass


class UnknownAttribute(MetaError):
    pass


class TypeMismatch(MetaError):
    pass


@dataclass(frozen=True)
class AttributeDescriptor:
    name: str
    entity: str
    vtype: str
    unit: str = ""

    def check(self):
        if not NAME_RE.match(self.name):
            raise BadDescriptor(f"bad attribute name {self.name!r}")
        if self.entity not in ENTITIES:
            raise BadDescriptor(f"bad entity {self.entity!r}")
        if self.vtype not in VTYPES:
            raise BadDescriptor(f"bad vtype {self.vtype!r}")


@dataclass(frozen=True)
class MetaRecord:
    entity: str
    entity_id: str
    attr: str
    value: object
    version: int
    origin: str


BUILTIN_DESCRIPTORS = [
    AttributeDescriptor("mean_brightness", "image", "float"),
    AttributeDescriptor("rms_contrast", "image", "float"),
    AttributeDescriptor("breast_density", "image", "float"),
    AttributeDescriptor("microcalc_count", "image", "int"),
    AttributeDescriptor("lfn", "image", "string"),
    AttributeDescriptor("study_id", "image", "string"),
    AttributeDescriptor("patient_id", "study", "string"),
    AttributeDescriptor("date", "study", "date"),
    AttributeDescriptor("age", "patient", "int"),
    AttributeDescriptor("sex", "patient", "string"),
    # Attributes written by analysis jobs.
    AttributeDescriptor("microcalc_detections", "image", "string"),
    AttributeDescriptor("standardized", "image", "int"),
]


def check_value(vtype: str, value) -> object:
    """Type-check (and minimally coerce) a value against a vtype."""
    if vtype == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeMismatch(f"expected int, got {value!r}")
        return value
    if vtype == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeMismatch(f"expected float, got {value!r}")
        return float(value)
    if vtype == "string":
        if not isinstance(value, str):
            raise TypeMismatch(f"expected string, got {value!r}")
        return value
    if vtype == "date":
        if not isinstance(value, str):
            raise TypeMismatch(f"expected date string, got {value!r}")
        try:
            datetime.date.fromisoformat(value)
        except ValueError:
            raise TypeMismatch(f"bad date {value!r}") from None
        return value
    raise BadDescriptor(f"bad vtype {vtype!r}")


@dataclass
class MetaStore:
    descriptors: dict[tuple[str, str], AttributeDescriptor] = field(default_factory=dict)
    # (entity, entity_id, attr) -> (version, origin, value)
    current: dict[tuple[str, str, str], tuple[int, str, object]] = field(default_factory=dict)

    def __post_init__(self):
        for d in BUILTIN_DESCRIPTORS:
            self.descriptors[(d.entity, d.name)] = d

    def define_attribute(self, d: AttributeDescriptor):
        d.check()
        key = (d.entity, d.name)
        existing = self.descriptors.get(key)
        if existing is not None:
            if existing != d:
                raise ConflictingDefinition(f"{key}: {existing} vs {d}")
            return
        self.descriptors[key] = d

    def descriptor(self, entity: str, attr: str) -> AttributeDescriptor:
        d = self.descriptors.get((entity, attr))
        if d is None:
            raise UnknownAttribute(f"{entity}.{attr}")
        return d

    def put_meta(self, r: MetaRecord):
        d = self.descriptor(r.entity, r.attr)
        value = check_value(d.vtype, r.value)
        key = (r.entity, r.entity_id, r.attr)
        existing = self.current.get(key)
        if existing is None or (r.version, r.origin) > (existing[0], existing[1]):
            self.current[key] = (r.version, r.origin, value)

    def get_current(self, entity: str, entity_id: str, attr: str):
        """Current LWW value, or None if never written."""
        self.descriptor(entity, attr)
        hit = self.current.get((entity, entity_id, attr))
        return None if hit is None else hit[2]

    def next_version(self, entity: str, entity_id: str, attr: str) -> int:
        hit = self.current.get((entity, entity_id, attr))
        return 1 if hit is None else hit[0] + 1

    def scan(self, entity: str) -> list[tuple[str, dict[str, object]]]:
        """All current rows of one entity, sorted by entity_id."""
        rows: dict[str, dict[str, object]] = {}
        for (ent, eid, attr), (_, _, value) in self.current.items():
            if ent == entity:
                rows.setdefault(eid, {})[attr] = value
        return [(eid, rows[eid]) for eid in sorted(rows)]

    def canonical_doc(self) -> dict:
        return {
            "descriptors": [
                {"entity": d.entity, "name": d.name, "vtype": d.vtype, "unit": d.unit}
                for _, d in sorted(self.descriptors.items())
            ],
            "values": [
                {"entity": k[0], "id": k[1], "attr": k[2],
                 "version": v[0], "origin": v[1], "value": v[2]}
                for k, v in sorted(self.current.items())
            ],
        }
