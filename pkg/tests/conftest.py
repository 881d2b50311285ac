import random

import pytest

from mgrid import dataset as d


def sample_dataset(sop="1.2.3.4", patient="P123", rows=8, cols=8, bits=8,
                   pixels=None, name="Doe^Jane"):
    values = {
        d.SOP_INSTANCE_UID: sop,
        d.STUDY_DATE: "20240115",
        d.TAG_BY_NAME["Modality"]: "MG",
        d.PATIENT_ID: patient,
        d.PATIENT_SEX: "F",
        d.PATIENT_AGE: "047Y",
        d.STUDY_INSTANCE_UID: "1.2.840.99",
        d.ROWS: rows,
        d.COLUMNS: cols,
        d.BITS_ALLOCATED: bits,
        d.BITS_STORED: bits,
        d.PIXEL_DATA: pixels if pixels is not None else bytes(rows * cols * (bits // 8)),
    }
    if name is not None:
        values[d.PATIENT_NAME] = name
        values[d.PATIENT_BIRTH_DATE] = "19770501"
    return d.from_values(values)


def random_dataset(rng: random.Random) -> d.Dataset:
    """A random valid Dataset: random subset of non-pixel tags plus, half the
    time, a consistent pixel block."""
    values = {}
    string_pool = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789.^-_ "
    optional = [t for t in d.TAG_DICT
                if t not in (d.PIXEL_DATA, d.ROWS, d.COLUMNS, d.BITS_ALLOCATED)]
    for tag in optional:
        if rng.random() < 0.5:
            continue
        vr = d.TAG_DICT[tag][0]
        if vr == "US":
            values[tag] = rng.randrange(0, 65536)
        elif vr == "UL":
            values[tag] = rng.randrange(0, 2 ** 32)
        elif vr == "DS":
            values[tag] = round(rng.uniform(-1000, 1000), 6)
        elif vr == "OB":
            values[tag] = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 32)))
        else:
            n = rng.randrange(0, 24)
            values[tag] = "".join(rng.choice(string_pool) for _ in range(n))
    if rng.random() < 0.5:
        rows, cols = rng.randrange(1, 12), 2 * rng.randrange(1, 6)
        bits = rng.choice((8, 16))
        values[d.ROWS] = rows
        values[d.COLUMNS] = cols
        values[d.BITS_ALLOCATED] = bits
        values[d.BITS_STORED] = bits
        values[d.PIXEL_DATA] = bytes(
            rng.randrange(256) for _ in range(rows * cols * (bits // 8)))
    return d.from_values(values)


@pytest.fixture
def rng():
    return random.Random(20240824)
