/** Pure view-model helpers: shaping node responses for display. No DOM,
 * no fetch — everything here is unit-testable in isolation. All values
 * pass through verbatim; the console never recomputes a metric. */

import type { JobDoc, QueryResultDoc, ResultRowDoc } from "./api.js";

export interface SortSpec {
  column: string;
  ascending: boolean;
}

export interface ResultsView {
  /** Leading provenance column is always "site", then entity id columns,
   * then projected value columns, in first-appearance order. */
  columns: string[];
  idColumns: string[];
  valueColumns: string[];
  rows: ResultRowDoc[];
  warning: string | null;
  truncated: boolean;
}

export function cellValue(row: ResultRowDoc, column: string): unknown {
  if (column === "site") return row.site;
  if (column in row.ids) return row.ids[column];
  if (column in row.values) return row.values[column];
  return undefined;
}

/** Display-only ordering of one column; the authoritative ORDER BY happened
 * on the node. Missing cells sort first, numbers before strings. */
export function compareCells(a: unknown, b: unknown): number {
  const aMissing = a === undefined || a === null;
  const bMissing = b === undefined || b === null;
  if (aMissing || bMissing) return Number(bMissing) - Number(aMissing);
  if (typeof a === "number" && typeof b === "number") return a - b;
  if (typeof a === "number") return -1;
  if (typeof b === "number") return 1;
  return String(a) < String(b) ? -1 : String(a) > String(b) ? 1 : 0;
}

export function partialWarning(result: QueryResultDoc): string | null {
  if (result.failed.length === 0) return null;
  const parts = result.failed.map(([site, reason]) => `${site} (${reason})`);
  return `partial results — no answer from ${parts.join(", ")}`;
}

export function buildResultsView(
  result: QueryResultDoc,
  sort: SortSpec | null,
): ResultsView {
  const idColumns: string[] = [];
  const valueColumns: string[] = [];
  for (const row of result.rows) {
    for (const k of Object.keys(row.ids)) {
      if (!idColumns.includes(k)) idColumns.push(k);
    }
    for (const k of Object.keys(row.values)) {
      if (!valueColumns.includes(k)) valueColumns.push(k);
    }
  }
  let rows = result.rows;
  if (sort) {
    rows = [...rows]
      .map((row, i) => ({ row, i }))
      .sort((x, y) => {
        const c = compareCells(cellValue(x.row, sort.column), cellValue(y.row, sort.column));
        const d = sort.ascending ? c : -c;
        return d !== 0 ? d : x.i - y.i; // stable
      })
      .map((x) => x.row);
  }
  return {
    columns: ["site", ...idColumns, ...valueColumns],
    idColumns,
    valueColumns,
    rows,
    warning: partialWarning(result),
    truncated: result.truncated,
  };
}

export function nextSort(current: SortSpec | null, column: string): SortSpec {
  if (current && current.column === column) {
    return { column, ascending: !current.ascending };
  }
  return { column, ascending: true };
}

/** Renders a syntax error as the offending source line with a caret under
 * the reported column (both 1-based, as the node reports them). */
export function syntaxErrorPointer(
  text: string,
  line: number,
  col: number,
  expected?: string,
): string {
  const src = text.split("\n")[line - 1] ?? "";
  const caret = " ".repeat(Math.max(0, col - 1)) + "^";
  const what = expected ? ` expected ${expected}` : "";
  return `${src}\n${caret}\nline ${line}, col ${col}:${what}`;
}

export function formatCell(v: unknown): string {
  if (v === undefined || v === null) return "–";
  if (typeof v === "number" && !Number.isInteger(v)) return v.toFixed(4);
  return String(v);
}

export const TERMINAL_STATUSES: ReadonlySet<string> = new Set(["done", "failed"]);

/** Merges a freshly polled job document into the watch list, keeping
 * submission order. */
export function upsertJob(watched: JobDoc[], doc: JobDoc): JobDoc[] {
  const i = watched.findIndex((j) => j.id === doc.id);
  if (i === -1) return [...watched, doc];
  const out = [...watched];
  out[i] = doc;
  return out;
}

export function activeJobIds(watched: JobDoc[]): string[] {
  return watched.filter((j) => !TERMINAL_STATUSES.has(j.status)).map((j) => j.id);
}
