import random

import pytest

from mgrid import querylang as ql
from mgrid.metastore import MetaRecord, MetaStore


def q(text):
    return ql.parse(text)


class TestParser:
    def test_minimal(self):
        ast = q("SELECT patient.age WHERE patient.age > 40")
        assert ast.projections == (ql.Field("patient", "age"),)
        assert ast.predicate == ql.Cmp(">", ql.Field("patient", "age"), 40)
        assert ast.order_by is None and ast.limit is None

    def test_full_clause_set(self):
        ast = q("SELECT image.lfn, patient.age WHERE image.mean_brightness >= 10.5 "
                "ORDER BY patient.age LIMIT 7")
        assert len(ast.projections) == 2
        assert ast.order_by == ql.Field("patient", "age")
        assert ast.limit == 7
        assert ast.predicate.value == 10.5

    def test_keywords_case_insensitive_attrs_not(self):
        q("select patient.age where patient.age > 40 order by patient.age limit 1")
        # attribute case reaches validation unchanged (and fails there)
        ast = q("SELECT patient.age WHERE patient.Age > 40")
        assert ast.predicate.field.attr == "Age"
        with pytest.raises(ql.UnknownField):
            ql.validate(ast, MetaStore())

    def test_precedence_not_and_or(self):
        ast = q("SELECT patient.age WHERE NOT patient.age > 40 AND patient.sex = 'F' "
                "OR patient.age < 10")
        # ((NOT a) AND b) OR c
        assert isinstance(ast.predicate, ql.Or)
        assert isinstance(ast.predicate.left, ql.And)
        assert isinstance(ast.predicate.left.left, ql.Not)

    def test_parens_override(self):
        ast = q("SELECT patient.age WHERE NOT (patient.age > 40 OR patient.sex = 'F')")
        assert isinstance(ast.predicate, ql.Not)
        assert isinstance(ast.predicate.arg, ql.Or)

    def test_contains(self):
        ast = q("SELECT image.lfn WHERE image.lfn CONTAINS 'acq'")
        assert ast.predicate.op == "CONTAINS"

    def test_string_and_date_literals(self):
        ast = q("SELECT study.date WHERE study.date = '2024-01-15'")
        assert ast.predicate.value == "2024-01-15"

    @pytest.mark.parametrize("text,expected_hint", [
        ("patient.age WHERE patient.age > 4", "SELECT"),
        ("SELECT WHERE patient.age > 4", "entity"),
        ("SELECT patient.age patient.age > 4", "WHERE"),
        ("SELECT patient.age WHERE patient.age >", "literal"),
        ("SELECT patient.age WHERE patient.age 4", "comparison"),
        ("SELECT patient.age WHERE (patient.age > 4", "')'"),
        ("SELECT patient.age WHERE patient.age > 4 LIMIT 1.5", "integer"),
        ("SELECT patient.age WHERE patient.age > 4 garbage", "end"),
        ("SELECT series.age WHERE patient.age > 4", "entity"),
    ])
    def test_syntax_errors_carry_position(self, text, expected_hint):
        with pytest.raises(ql.QuerySyntaxError) as exc:
            q(text)
        assert exc.value.line >= 1 and exc.value.col >= 1
        assert expected_hint.lower() in exc.value.expected.lower()

    def test_error_line_counting(self):
        with pytest.raises(ql.QuerySyntaxError) as exc:
            q("SELECT patient.age\nWHERE patient.age >")
        assert exc.value.line == 2


class TestCanonicalForms:
    CASES = [
        "SELECT patient.age WHERE patient.age > 40",
        "SELECT image.lfn, patient.age WHERE (patient.age > 40 OR patient.sex = 'F') "
        "AND NOT image.microcalc_count = 0 ORDER BY image.mean_brightness LIMIT 3",
        "SELECT study.date WHERE study.date != '2024-01-15'",
        "SELECT image.lfn WHERE image.lfn CONTAINS 'acq' AND image.rms_contrast <= 1.5",
        "SELECT patient.age WHERE NOT NOT patient.age >= 7",
    ]

    @pytest.mark.parametrize("text", CASES)
    def test_parse_print_fixpoint(self, text):
        ast = q(text)
        canon = ql.to_text(ast)
        assert ql.parse(canon) == ast
        assert ql.to_text(ql.parse(canon)) == canon

    @pytest.mark.parametrize("text", CASES)
    def test_doc_roundtrip(self, text):
        ast = q(text)
        doc = ql.to_doc(ast)
        assert ql.from_doc(doc) == ast
        assert set(doc) == {"proj", "pred", "order_by", "limit"}

    def test_doc_node_tags(self):
        doc = ql.to_doc(q("SELECT patient.age WHERE NOT patient.age > 1 "
                          "AND patient.age < 9 OR patient.sex = 'F'"))
        assert doc["pred"]["t"] == "or"
        assert doc["pred"]["left"]["t"] == "and"
        assert doc["pred"]["left"]["left"]["t"] == "not"
        assert doc["pred"]["left"]["left"]["arg"]["t"] == "cmp"

    def test_from_doc_rejects_malformed(self):
        good = ql.to_doc(q("SELECT patient.age WHERE patient.age > 1"))
        for mutate in (
            lambda d: d.pop("proj"),
            lambda d: d.update(proj=[]),
            lambda d: d.update(limit=-1),
            lambda d: d.update(limit=True),
            lambda d: d["pred"].update(t="xor"),
            lambda d: d["pred"].update(op="~="),
            lambda d: d["pred"].update(value=[1]),
            lambda d: d["pred"].update(field="image"),
        ):
            doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in good.items()}
            mutate(doc)
            with pytest.raises(ql.QueryError):
                ql.from_doc(doc)


class TestValidation:
    def setup_method(self):
        self.store = MetaStore()

    def test_unknown_field(self):
        with pytest.raises(ql.UnknownField):
            ql.validate(q("SELECT patient.nope WHERE patient.age > 1"), self.store)
        with pytest.raises(ql.UnknownField):
            ql.validate(q("SELECT patient.age WHERE image.nope > 1"), self.store)
        with pytest.raises(ql.UnknownField):
            ql.validate(q("SELECT patient.age WHERE patient.age > 1 "
                          "ORDER BY study.nope"), self.store)

    def test_int_literal_coerces_to_float_field(self):
        ast = ql.validate(q("SELECT image.mean_brightness "
                            "WHERE image.mean_brightness > 10"), self.store)
        assert ast.predicate.value == 10.0
        assert isinstance(ast.predicate.value, float)

    def test_no_other_coercions(self):
        for text in (
            "SELECT patient.age WHERE patient.age > 4.5",      # float vs int field
            "SELECT patient.age WHERE patient.age = '40'",     # string vs int
            "SELECT patient.sex WHERE patient.sex = 1",        # int vs string
            "SELECT study.date WHERE study.date = '20240115'", # not ISO
            "SELECT patient.age WHERE patient.age CONTAINS '4'",  # CONTAINS non-string
        ):
            with pytest.raises(ql.QueryTypeError):
                ql.validate(q(text), self.store)

    def test_primary_entity(self):
        assert ql.primary_entity(q("SELECT patient.age WHERE patient.sex = 'F'")) \
            == "patient"
        assert ql.primary_entity(q("SELECT patient.age WHERE study.date > '2020-01-01'")) \
            == "study"
        assert ql.primary_entity(q("SELECT patient.age WHERE patient.sex = 'F' "
                                   "ORDER BY image.lfn")) == "image"


def build_store(rng, n_patients=8, n_studies=16, n_images=40):
    """Random joined population with deliberate attribute gaps."""
    store = MetaStore()
    rows = {"patient": {}, "study": {}, "image": {}}

    def put(entity, eid, attr, value):
        store.put_meta(MetaRecord(entity, eid, attr, value, 1, "site-a"))
        rows[entity].setdefault(eid, {})[attr] = value

    patients = [f"p{i:02d}" for i in range(n_patients)]
    for pid in patients:
        if rng.random() < 0.85:
            put("patient", pid, "age", rng.randrange(30, 90))
        if rng.random() < 0.85:
            put("patient", pid, "sex", rng.choice(["F", "M"]))
    studies = [f"s{i:02d}" for i in range(n_studies)]
    for sid in studies:
        if rng.random() < 0.9:
            put("study", sid, "patient_id", rng.choice(patients))
        if rng.random() < 0.8:
            put("study", sid, "date", f"2024-0{rng.randrange(1, 10)}-1{rng.randrange(0, 9)}")
    for i in range(n_images):
        iid = f"img{i:03d}"
        put("image", iid, "lfn", f"/acq/site-a/x/{iid}.mgd")
        if rng.random() < 0.9:
            put("image", iid, "study_id", rng.choice(studies))
        if rng.random() < 0.8:
            put("image", iid, "mean_brightness", round(rng.random() * 200, 3))
        if rng.random() < 0.8:
            put("image", iid, "microcalc_count", rng.randrange(4))
    return store, rows


def oracle_eval(ast, rows):
    """Brute-force reference evaluator, written independently of the
    production join/sort code."""
    primary = ql.primary_entity(ast)

    def joined(eid):
        maps = {}
        if primary == "image":
            maps["image"] = rows["image"][eid]
            sid = maps["image"].get("study_id")
            if sid in rows["study"]:
                maps["study"] = rows["study"][sid]
                pid = maps["study"].get("patient_id")
                if pid in rows["patient"]:
                    maps["patient"] = rows["patient"][pid]
        elif primary == "study":
            maps["study"] = rows["study"][eid]
            pid = maps["study"].get("patient_id")
            if pid in rows["patient"]:
                maps["patient"] = rows["patient"][pid]
        else:
            maps["patient"] = rows["patient"][eid]
        return maps

    def pred(node, maps):
        if isinstance(node, ql.And):
            return pred(node.left, maps) and pred(node.right, maps)
        if isinstance(node, ql.Or):
            return pred(node.left, maps) or pred(node.right, maps)
        if isinstance(node, ql.Not):
            return not pred(node.arg, maps)
        v = maps.get(node.field.entity, {}).get(node.field.attr)
        if v is None:
            return False
        ops = {"=": lambda a, b: a == b, "!=": lambda a, b: a != b,
               "<": lambda a, b: a < b, "<=": lambda a, b: a <= b,
               ">": lambda a, b: a > b, ">=": lambda a, b: a >= b,
               "CONTAINS": lambda a, b: b in a}
        return ops[node.op](v, node.value)

    hits = []
    for eid in rows[primary]:
        maps = joined(eid)
        if pred(ast.predicate, maps):
            values = {str(f): maps.get(f.entity, {}).get(f.attr)
                      for f in ast.projections}
            order_val = None
            if ast.order_by is not None:
                order_val = maps.get(ast.order_by.entity, {}).get(ast.order_by.attr)
            hits.append((eid, values, order_val))
    if ast.order_by is None:
        hits.sort(key=lambda h: h[0])
    else:
        hits.sort(key=lambda h: (h[2] is not None, h[2] if h[2] is not None else 0,
                                 h[0]))
    if ast.limit is not None:
        hits = hits[: ast.limit]
    return hits


def random_query(rng):
    fields = [
        (ql.Field("patient", "age"), "int"),
        (ql.Field("patient", "sex"), "sex"),
        (ql.Field("image", "mean_brightness"), "float"),
        (ql.Field("image", "microcalc_count"), "count"),
        (ql.Field("image", "lfn"), "lfn"),
        (ql.Field("study", "date"), "date"),
    ]

    def literal(kind):
        return {"int": lambda: rng.randrange(25, 95),
                "sex": lambda: rng.choice(["F", "M"]),
                "float": lambda: round(rng.random() * 200, 1),
                "count": lambda: rng.randrange(4),
                "lfn": lambda: rng.choice(["/acq", "img0", "zzz"]),
                "date": lambda: f"2024-0{rng.randrange(1, 10)}-1{rng.randrange(0, 9)}",
                }[kind]()

    def cmp_node():
        f, kind = rng.choice(fields)
        if kind == "lfn":
            op = "CONTAINS"
        elif kind in ("sex", "date"):
            op = rng.choice(["=", "!="] + (["<", ">"] if kind == "date" else []))
        else:
            op = rng.choice(["=", "!=", "<", "<=", ">", ">="])
        return ql.Cmp(op, f, literal(kind))

    def predicate(depth):
        if depth == 0 or rng.random() < 0.4:
            return cmp_node()
        kind = rng.randrange(3)
        if kind == 0:
            return ql.Not(predicate(depth - 1))
        cls = ql.And if kind == 1 else ql.Or
        return cls(predicate(depth - 1), predicate(depth - 1))

    proj = tuple(f for f, _ in rng.sample(fields, rng.randrange(1, 4)))
    order_by = rng.choice([None, ql.Field("patient", "age"),
                           ql.Field("image", "mean_brightness")])
    limit = rng.choice([None, None, rng.randrange(1, 20)])
    return ql.QueryAst(proj, predicate(2), order_by, limit)


class TestEvaluation:
    def test_missing_attribute_is_false(self):
        store = MetaStore()
        store.put_meta(MetaRecord("patient", "p1", "sex", "F", 1, "site-a"))
        ast = ql.validate(q("SELECT patient.sex WHERE patient.age > 0"), store)
        assert ql.evaluate_local(ast, store, "site-a") == []
        # NOT of the collapsed false is true
        ast2 = ql.validate(q("SELECT patient.sex WHERE NOT patient.age > 0"), store)
        rows = ql.evaluate_local(ast2, store, "site-a")
        assert [r.ids for r in rows] == [{"patient": "p1"}]

    def test_projection_of_missing_value_is_null(self):
        store = MetaStore()
        store.put_meta(MetaRecord("patient", "p1", "sex", "F", 1, "site-a"))
        ast = ql.validate(q("SELECT patient.age WHERE patient.sex = 'F'"), store)
        rows = ql.evaluate_local(ast, store, "site-a")
        assert rows[0].values == {"patient.age": None}

    def test_join_image_to_patient(self):
        store = MetaStore()
        store.put_meta(MetaRecord("image", "i1", "study_id", "s1", 1, "site-a"))
        store.put_meta(MetaRecord("study", "s1", "patient_id", "p1", 1, "site-a"))
        store.put_meta(MetaRecord("patient", "p1", "age", 44, 1, "site-a"))
        ast = ql.validate(q("SELECT patient.age WHERE image.study_id = 's1'"), store)
        rows = ql.evaluate_local(ast, store, "site-a")
        assert rows[0].ids == {"image": "i1", "study": "s1", "patient": "p1"}
        assert rows[0].values["patient.age"] == 44

    def test_random_queries_against_oracle(self):
        rng = random.Random(41)
        store, rows = build_store(rng)
        for i in range(200):
            ast = random_query(rng)
            ast = ql.validate(ast, store)
            got = ql.evaluate_local(ast, store, "site-a")
            want = oracle_eval(ast, rows)
            primary = ql.primary_entity(ast)
            got_simple = [(r.ids[primary],
                           {k: r.values[k] for k in (str(f) for f in ast.projections)})
                          for r in got]
            assert got_simple == [(eid, values) for eid, values, _ in want], \
                f"query {i}: {ql.to_text(ast)}"

    def test_de_morgan_on_fully_populated_rows(self):
        """NOT (a AND b) == NOT a OR NOT b when no attribute is missing."""
        rng = random.Random(5)
        store = MetaStore()
        for i in range(30):
            store.put_meta(MetaRecord("patient", f"p{i}", "age",
                                      rng.randrange(30, 90), 1, "site-a"))
            store.put_meta(MetaRecord("patient", f"p{i}", "sex",
                                      rng.choice(["F", "M"]), 1, "site-a"))
        a = "patient.age > 50"
        b = "patient.sex = 'F'"
        lhs = ql.validate(q(f"SELECT patient.age WHERE NOT ({a} AND {b})"), store)
        rhs = ql.validate(q(f"SELECT patient.age WHERE NOT {a} OR NOT {b}"), store)
        assert [r.ids for r in ql.evaluate_local(lhs, store, "s")] == \
            [r.ids for r in ql.evaluate_local(rhs, store, "s")]

    def test_order_and_limit(self):
        store = MetaStore()
        ages = {"p1": 50, "p2": 30, "p3": 40}
        for pid, age in ages.items():
            store.put_meta(MetaRecord("patient", pid, "age", age, 1, "site-a"))
        store.put_meta(MetaRecord("patient", "p4", "sex", "F", 1, "site-a"))
        ast = ql.validate(q("SELECT patient.sex WHERE patient.sex = 'F' "
                            "OR patient.age > 0 ORDER BY patient.age LIMIT 3"), store)
        rows = ql.evaluate_local(ast, store, "site-a")
        # p4 has no age: missing-order rows sort first
        assert [r.ids["patient"] for r in rows] == ["p4", "p2", "p3"]
