"""Clinical query language: parser, validator, single-site evaluator.

Grammar:

    query := SELECT proj (',' proj)* WHERE pred (ORDER BY field)? (LIMIT uint)?
    proj  := field
    field := entity '.' attr        entity in {patient, study, image}
    pred  := pred OR pred | pred AND pred | NOT pred | '(' pred ')'
             | field cmp literal
    cmp   := = | != | < | <= | > | >= | CONTAINS

Precedence NOT > AND > OR. Keywords are case-insensitive, attribute names
case-sensitive. Literals: int, float, single-quoted string (dates are quoted
ISO strings). A comparison whose attribute is missing on a row is false;
NOT applies to that collapsed boolean.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Optional

from .metastore import MetaStore, UnknownAttribute

KEYWORDS = {"select", "where", "and", "or", "not", "order", "by", "limit", "contains"}
CMP_OPS = ("=", "!=", "<", "<=", ">", ">=", "CONTAINS")
ENTITY_RANK = {"patient": 0, "study": 1, "image": 2}


class QueryError(Exception):
    pass


class QuerySyntaxError(QueryError):
    def __init__(self, line: int, col: int, expected: str):
        self.line, self.col, self.expected = line, col, expected
        super().__init__(f"syntax error at line {line} col {col}: expected {expected}")


class UnknownField(QueryError):
    pass


class QueryTypeError(QueryError):
    pass


@dataclass(frozen=True)
class Field:
    entity: str
    attr: str

    def __str__(self):
        return f"{self.entity}.{self.attr}"


@dataclass(frozen=True)
class Cmp:
    op: str
    field: Field
    value: object


@dataclass(frozen=True)
class Not:
    arg: object


@dataclass(frozen=True)
class And:
    left: object
    right: object


@dataclass(frozen=True)
class Or:
    left: object
    right: object


@dataclass(frozen=True)
class QueryAst:
    projections: tuple[Field, ...]
    predicate: object
    order_by: Optional[Field] = None
    limit: Optional[int] = None


@dataclass(frozen=True)
class ResultRow:
    ids: dict          # entity -> entity_id, for every entity the row touches
    values: dict       # "entity.attr" -> value, per projection
    site: str

    def key(self) -> tuple:
        return tuple(self.ids.get(e) for e in ("patient", "study", "image"))

    def to_doc(self) -> dict:
        return {"ids": dict(self.ids), "values": dict(self.values), "site": self.site}

    @staticmethod
    def from_doc(doc: dict) -> "ResultRow":
        return ResultRow(dict(doc["ids"]), dict(doc["values"]), doc["site"])


# --- tokenizer ---------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s+"
    r"|(?P<num>\d+\.\d+|\d+)"
    r"|(?P<str>'[^']*')"
    r"|(?P<word>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op><=|>=|!=|=|<|>)"
    r"|(?P<punct>[.,()])"
)


@dataclass
class _Token:
    kind: str     # num | str | word | op | punct | end
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    line, line_start = 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise QuerySyntaxError(line, pos - line_start + 1, "a valid token")
        line += text.count("\n", pos, m.end())
        nl = text.rfind("\n", pos, m.end())
        if nl >= 0:
            line_start = nl + 1
        col = m.start() - line_start + 1
        for kind in ("num", "str", "word", "op", "punct"):
            if m.group(kind):
                tokens.append(_Token(kind, m.group(kind), line, col))
                break
        pos = m.end()
    tokens.append(_Token("end", "", line, len(text) - line_start + 1))
    return tokens


# --- parser ------------------------------------------------------------------

class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def next(self) -> _Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def fail(self, expected: str):
        t = self.peek()
        raise QuerySyntaxError(t.line, t.col, expected)

    def is_kw(self, kw: str) -> bool:
        t = self.peek()
        return t.kind == "word" and t.text.lower() == kw

    def expect_kw(self, kw: str):
        if not self.is_kw(kw):
            self.fail(kw.upper())
        self.next()

    def parse_query(self) -> QueryAst:
        self.expect_kw("select")
        projections = [self.parse_field()]
        while self.peek().text == ",":
            self.next()
            projections.append(self.parse_field())
        self.expect_kw("where")
        predicate = self.parse_or()
        order_by = None
        limit = None
        if self.is_kw("order"):
            self.next()
            self.expect_kw("by")
            order_by = self.parse_field()
        if self.is_kw("limit"):
            self.next()
            t = self.peek()
            if t.kind != "num" or "." in t.text:
                self.fail("an unsigned integer")
            limit = int(self.next().text)
        if self.peek().kind != "end":
            self.fail("end of query")
        return QueryAst(tuple(projections), predicate, order_by, limit)

    def parse_field(self) -> Field:
        t = self.peek()
        if t.kind != "word" or t.text not in ENTITY_RANK:
            self.fail("an entity name (patient, study, image)")
        entity = self.next().text
        if self.peek().text != ".":
            self.fail("'.'")
        self.next()
        t = self.peek()
        if t.kind != "word" or t.text.lower() in KEYWORDS:
            self.fail("an attribute name")
        return Field(entity, self.next().text)

    def parse_or(self):
        node = self.parse_and()
        while self.is_kw("or"):
            self.next()
            node = Or(node, self.parse_and())
        return node

    def parse_and(self):
        node = self.parse_not()
        while self.is_kw("and"):
            self.next()
            node = And(node, self.parse_not())
        return node

    def parse_not(self):
        if self.is_kw("not"):
            self.next()
            return Not(self.parse_not())
        return self.parse_atom()

    def parse_atom(self):
        if self.peek().text == "(":
            self.next()
            node = self.parse_or()
            if self.peek().text != ")":
                self.fail("')'")
            self.next()
            return node
        field = self.parse_field()
        t = self.peek()
        if self.is_kw("contains"):
            op = "CONTAINS"
            self.next()
        elif t.kind == "op":
            op = self.next().text
        else:
            self.fail("a comparison operator")
        return Cmp(op, field, self.parse_literal())

    def parse_literal(self):
        t = self.peek()
        if t.kind == "num":
            self.next()
            return float(t.text) if "." in t.text else int(t.text)
        if t.kind == "str":
            self.next()
            return t.text[1:-1]
        self.fail("a literal")


def parse(text: str) -> QueryAst:
    return _Parser(text).parse_query()


# --- canonical text and document forms ---------------------------------------

def _pred_level(node) -> int:
    if isinstance(node, Or):
        return 1
    if isinstance(node, And):
        return 2
    if isinstance(node, Not):
        return 3
    return 4


def _print_pred(node, min_level: int) -> str:
    level = _pred_level(node)
    if isinstance(node, Or):
        text = f"{_print_pred(node.left, 1)} OR {_print_pred(node.right, 2)}"
    elif isinstance(node, And):
        text = f"{_print_pred(node.left, 2)} AND {_print_pred(node.right, 3)}"
    elif isinstance(node, Not):
        text = f"NOT {_print_pred(node.arg, 3)}"
    else:
        text = f"{node.field} {node.op} {_print_literal(node.value)}"
    return f"({text})" if level < min_level else text


def _print_literal(value) -> str:
    if isinstance(value, bool):
        raise QueryTypeError("boolean literals are not part of the grammar")
    if isinstance(value, (int, float)):
        return repr(value)
    return f"'{value}'"


def to_text(ast: QueryAst) -> str:
    """Canonical text form; parse(to_text(ast)) is structurally equal."""
    parts = ["SELECT ", ", ".join(str(f) for f in ast.projections),
             " WHERE ", _print_pred(ast.predicate, 1)]
    if ast.order_by is not None:
        parts.append(f" ORDER BY {ast.order_by}")
    if ast.limit is not None:
        parts.append(f" LIMIT {ast.limit}")
    return "".join(parts)


def _pred_to_doc(node) -> dict:
    if isinstance(node, And):
        return {"t": "and", "left": _pred_to_doc(node.left), "right": _pred_to_doc(node.right)}
    if isinstance(node, Or):
        return {"t": "or", "left": _pred_to_doc(node.left), "right": _pred_to_doc(node.right)}
    if isinstance(node, Not):
        return {"t": "not", "arg": _pred_to_doc(node.arg)}
    return {"t": "cmp", "field": str(node.field), "op": node.op, "value": node.value}


def _field_from_str(s: str) -> Field:
    entity, _, attr = s.partition(".")
    if entity not in ENTITY_RANK or not attr:
        raise QueryError(f"bad field {s!r}")
    return Field(entity, attr)


def _pred_from_doc(doc: dict):
    t = doc.get("t")
    if t == "and":
        return And(_pred_from_doc(doc["left"]), _pred_from_doc(doc["right"]))
    if t == "or":
        return Or(_pred_from_doc(doc["left"]), _pred_from_doc(doc["right"]))
    if t == "not":
        return Not(_pred_from_doc(doc["arg"]))
    if t == "cmp":
        op = doc["op"]
        if op not in CMP_OPS:
            raise QueryError(f"bad comparison operator {op!r}")
        value = doc["value"]
        if not isinstance(value, (int, float, str)) or isinstance(value, bool):
            raise QueryError(f"bad literal {value!r}")
        return Cmp(op, _field_from_str(doc["field"]), value)
    raise QueryError(f"bad predicate node tag {t!r}")


def to_doc(ast: QueryAst) -> dict:
    """Canonical AST document — the sub-query wire form."""
    return {
        "proj": [str(f) for f in ast.projections],
        "pred": _pred_to_doc(ast.predicate),
        "order_by": None if ast.order_by is None else str(ast.order_by),
        "limit": ast.limit,
    }


def from_doc(doc: dict) -> QueryAst:
    if not isinstance(doc, dict) or "proj" not in doc or "pred" not in doc:
        raise QueryError("not a query document")
    proj = doc["proj"]
    if not isinstance(proj, list) or not proj:
        raise QueryError("empty projection list")
    order_by = doc.get("order_by")
    limit = doc.get("limit")
    if limit is not None and (not isinstance(limit, int) or isinstance(limit, bool) or limit < 0):
        raise QueryError(f"bad limit {limit!r}")
    return QueryAst(
        tuple(_field_from_str(f) for f in proj),
        _pred_from_doc(doc["pred"]),
        None if order_by is None else _field_from_str(order_by),
        limit,
    )


# --- validation --------------------------------------------------------------

def _validate_pred(node, store: MetaStore):
    if isinstance(node, And):
        return And(_validate_pred(node.left, store), _validate_pred(node.right, store))
    if isinstance(node, Or):
        return Or(_validate_pred(node.left, store), _validate_pred(node.right, store))
    if isinstance(node, Not):
        return Not(_validate_pred(node.arg, store))
    field, value = node.field, node.value
    try:
        d = store.descriptor(field.entity, field.attr)
    except UnknownAttribute:
        raise UnknownField(str(field)) from None
    if node.op == "CONTAINS":
        if d.vtype != "string" or not isinstance(value, str):
            raise QueryTypeError(f"CONTAINS needs a string field and literal: {field}")
        return node
    if d.vtype == "int":
        if not isinstance(value, int) or isinstance(value, bool):
            raise QueryTypeError(f"{field} is int, literal {value!r} is not")
    elif d.vtype == "float":
        # int literal allowed where float expected; nothing else coerces
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise QueryTypeError(f"{field} is float, literal {value!r} is not")
        value = float(value)
    elif d.vtype in ("string", "date"):
        if not isinstance(value, str):
            raise QueryTypeError(f"{field} is {d.vtype}, literal {value!r} is not")
        if d.vtype == "date" and not re.match(r"\d{4}-\d{2}-\d{2}$", value):
            raise QueryTypeError(f"{field} is date, literal {value!r} is not YYYY-MM-DD")
    return replace(node, value=value)


def validate(ast: QueryAst, store: MetaStore) -> QueryAst:
    """Resolve every field against the store's descriptors and coerce
    literals. Returns the typed AST."""
    for f in ast.projections:
        try:
            store.descriptor(f.entity, f.attr)
        except UnknownAttribute:
            raise UnknownField(str(f)) from None
    if ast.order_by is not None:
        try:
            store.descriptor(ast.order_by.entity, ast.order_by.attr)
        except UnknownAttribute:
            raise UnknownField(str(ast.order_by)) from None
    return replace(ast, predicate=_validate_pred(ast.predicate, store))


# --- evaluation --------------------------------------------------------------

def _referenced_fields(node, out: list):
    if isinstance(node, (And, Or)):
        _referenced_fields(node.left, out)
        _referenced_fields(node.right, out)
    elif isinstance(node, Not):
        _referenced_fields(node.arg, out)
    else:
        out.append(node.field)


def primary_entity(ast: QueryAst) -> str:
    """Finest-grained entity the query touches (image > study > patient)."""
    fields = list(ast.projections)
    _referenced_fields(ast.predicate, fields)
    if ast.order_by is not None:
        fields.append(ast.order_by)
    return max((f.entity for f in fields), key=lambda e: ENTITY_RANK[e])


def _eval_pred(node, getval) -> bool:
    if isinstance(node, And):
        return _eval_pred(node.left, getval) and _eval_pred(node.right, getval)
    if isinstance(node, Or):
        return _eval_pred(node.left, getval) or _eval_pred(node.right, getval)
    if isinstance(node, Not):
        return not _eval_pred(node.arg, getval)
    v = getval(node.field)
    if v is None:
        return False
    lit = node.value
    if node.op == "CONTAINS":
        return lit in v
    if node.op == "=":
        return v == lit
    if node.op == "!=":
        return v != lit
    if node.op == "<":
        return v < lit
    if node.op == "<=":
        return v <= lit
    if node.op == ">":
        return v > lit
    return v >= lit


def evaluate_local(ast: QueryAst, store: MetaStore, site: str) -> list[ResultRow]:
    """Evaluate a validated query against one site's metadata snapshot.

    Rows iterate over the query's primary entity; coarser entities are
    joined via image.study_id and study.patient_id. Ordering is by the
    order_by value ascending (rows missing it first), ties by primary
    entity_id; without order_by, by primary entity_id. LIMIT applies after
    ordering.
    """
    primary = primary_entity(ast)
    studies = dict(store.scan("study"))
    patients = dict(store.scan("patient"))

    base_rows: list[tuple[dict, dict]] = []  # (ids, per-entity attr maps)
    if primary == "image":
        for eid, attrs in store.scan("image"):
            ids = {"image": eid}
            maps = {"image": attrs}
            sid = attrs.get("study_id")
            if sid is not None and sid in studies:
                ids["study"] = sid
                maps["study"] = studies[sid]
                pid = studies[sid].get("patient_id")
                if pid is not None and pid in patients:
                    ids["patient"] = pid
                    maps["patient"] = patients[pid]
            base_rows.append((ids, maps))
    elif primary == "study":
        for eid, attrs in sorted(studies.items()):
            ids = {"study": eid}
            maps = {"study": attrs}
            pid = attrs.get("patient_id")
            if pid is not None and pid in patients:
                ids["patient"] = pid
                maps["patient"] = patients[pid]
            base_rows.append((ids, maps))
    else:
        for eid, attrs in sorted(patients.items()):
            base_rows.append(({"patient": eid}, {"patient": attrs}))

    out = []
    for ids, maps in base_rows:
        def getval(field: Field):
            attrs = maps.get(field.entity)
            return None if attrs is None else attrs.get(field.attr)

        if not _eval_pred(ast.predicate, getval):
            continue
        values = {str(f): getval(f) for f in ast.projections}
        if ast.order_by is not None and str(ast.order_by) not in values:
            # carried so the aggregation point can re-apply the global sort
            values[str(ast.order_by)] = getval(ast.order_by)
        out.append(ResultRow(ids, values, site))

    out = sort_rows(out, ast, primary)
    if ast.limit is not None:
        out = out[: ast.limit]
    return out


def sort_rows(rows: list[ResultRow], ast: QueryAst, primary: str) -> list[ResultRow]:
    """Global ordering rule, shared by local evaluation and federation."""
    def pkey(r: ResultRow) -> str:
        return r.ids.get(primary) or ""

    if ast.order_by is None:
        return sorted(rows, key=pkey)
    fname = str(ast.order_by)
    missing = sorted((r for r in rows if r.values.get(fname) is None), key=pkey)
    present = sorted(
        (r for r in rows if r.values.get(fname) is not None),
        key=lambda r: (r.values[fname], pkey(r)),
    )
    return missing + present
