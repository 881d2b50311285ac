/** The console application: five panes (query editor, results, preview,
 * jobs, federation status) wired to one node's HTTP API. The console keeps
 * no federation state of its own — every displayed value originates from a
 * node response, and a page reload loses nothing but scroll position. */

import { ApiClient, ApiError } from "./api.js";
import type { JobDoc, QueryResultDoc } from "./api.js";
import {
  activeJobIds,
  buildResultsView,
  cellValue,
  formatCell,
  nextSort,
  syntaxErrorPointer,
  upsertJob,
  TERMINAL_STATUSES,
} from "./model.js";
import type { SortSpec } from "./model.js";

/** QC metrics shown beside the preview; fetched from the node with a
 * targeted query rather than recomputed from pixels. */
const PREVIEW_METRIC_FIELDS = [
  "image.mean_brightness",
  "image.rms_contrast",
  "image.breast_density",
  "image.microcalc_count",
  "study.date",
];

const JOB_ALGORITHMS = ["qc_report", "detect_microcalcs", "standardize"];

interface PreviewState {
  status: "idle" | "loading" | "ready" | "error" | "unknown";
  imageId: string | null;
  objectUrl: string | null;
  error: string | null;
  pseudonym: string | null;
  metrics: Record<string, unknown>;
}

export class ConsoleApp {
  private sort: SortSpec | null = null;
  private lastResult: QueryResultDoc | null = null;
  private selectedRow = -1;
  private watched: JobDoc[] = [];
  private preview: PreviewState = {
    status: "idle", imageId: null, objectUrl: null, error: null,
    pseudonym: null, metrics: {},
  };
  private pollTimer: ReturnType<typeof setInterval> | null = null;
  private els!: Record<string, HTMLElement>;
  /** Serializes state-mutating async work so a slow poll can never
   * interleave with a user action mid-update. */
  private chain: Promise<unknown> = Promise.resolve();

  constructor(
    private readonly doc: Document,
    private readonly api: ApiClient,
    private readonly pollMs = 2000,
  ) {}

  // ---------------------------------------------------------------- mount

  mount(root: HTMLElement): void {
    root.innerHTML = `
      <header id="status-bar" class="status-bar">
        <span id="status-site" class="status-site">connecting…</span>
        <span id="status-files"></span>
        <span id="status-peers"></span>
      </header>
      <main class="layout">
        <section class="pane pane-query">
          <h2>Query</h2>
          <textarea id="query-text" rows="4" spellcheck="false"
            placeholder="SELECT image.lfn, image.breast_density WHERE image.breast_density > 0.2"></textarea>
          <div class="row">
            <button id="query-run">Run</button>
            <span id="query-state" class="muted"></span>
          </div>
          <pre id="query-error" class="query-error" hidden></pre>
        </section>
        <section class="pane pane-results">
          <h2>Results</h2>
          <div id="results-warning" class="warning" hidden></div>
          <div class="table-wrap"><table id="results-table">
            <thead></thead><tbody></tbody>
          </table></div>
          <div id="results-empty" class="muted">no query yet</div>
        </section>
        <section class="pane pane-preview">
          <h2>Preview</h2>
          <div id="preview-box" class="preview-box">
            <div id="preview-placeholder" class="muted">select a result row</div>
            <div id="preview-spinner" class="spinner" hidden>fetching…</div>
            <img id="preview-img" alt="image preview" hidden>
            <div id="preview-error" class="error-box" hidden>
              <span id="preview-error-text"></span>
              <button id="preview-retry">Retry</button>
            </div>
          </div>
          <dl id="preview-meta" class="meta"></dl>
        </section>
        <section class="pane pane-jobs">
          <h2>Jobs</h2>
          <div class="row">
            <select id="job-algorithm">${JOB_ALGORITHMS
              .map((a) => `<option value="${a}">${a}</option>`).join("")}</select>
            <button id="job-launch">Launch on selected row</button>
          </div>
          <table id="jobs-table">
            <thead><tr><th>id</th><th>algorithm</th><th>target</th>
              <th>status</th><th>outputs</th></tr></thead>
            <tbody></tbody>
          </table>
        </section>
      </main>
      <div id="toast" class="toast" hidden></div>`;

    const ids = [
      "status-site", "status-files", "status-peers",
      "query-text", "query-run", "query-state", "query-error",
      "results-warning", "results-table", "results-empty",
      "preview-placeholder", "preview-spinner", "preview-img",
      "preview-error", "preview-error-text", "preview-retry", "preview-meta",
      "job-algorithm", "job-launch", "jobs-table", "toast",
    ];
    this.els = {};
    for (const id of ids) {
      const el = root.querySelector<HTMLElement>(`#${id}`);
      if (!el) throw new Error(`missing element #${id}`);
      this.els[id] = el;
    }

    this.els["query-run"].addEventListener("click", () => this.submitQuery());
    this.els["query-text"].addEventListener("keydown", (e) => {
      const ke = e as KeyboardEvent;
      if (ke.key === "Enter" && (ke.ctrlKey || ke.metaKey)) this.submitQuery();
    });
    this.els["preview-retry"].addEventListener("click", () => {
      if (this.preview.imageId) this.showPreview(this.preview.imageId);
    });
    this.els["job-launch"].addEventListener("click", () => this.launchJob());
  }

  // ------------------------------------------------------------- lifecycle

  startPolling(): void {
    void this.enqueue(() => this.pollOnce());
    this.pollTimer = setInterval(
      () => void this.enqueue(() => this.pollOnce()), this.pollMs);
  }

  stopPolling(): void {
    if (this.pollTimer !== null) clearInterval(this.pollTimer);
    this.pollTimer = null;
  }

  /** Awaitable in tests: resolves once all queued work has settled. */
  settled(): Promise<unknown> {
    return this.chain;
  }

  private enqueue<T>(work: () => Promise<T>): Promise<T> {
    const next = this.chain.then(work, work);
    this.chain = next.catch(() => undefined);
    return next;
  }

  // ----------------------------------------------------------------- query

  submitQuery(): Promise<void> {
    return this.enqueue(async () => {
      const text = (this.els["query-text"] as HTMLTextAreaElement).value;
      const errEl = this.els["query-error"];
      errEl.hidden = true;
      this.els["query-state"].textContent = "validating…";
      try {
        const v = await this.api.validateQuery(text);
        if (!v.ok) {
          errEl.hidden = false;
          errEl.textContent =
            v.line !== undefined && v.col !== undefined
              ? syntaxErrorPointer(text, v.line, v.col, v.expected)
              : (v.message ?? "invalid query");
          this.els["query-state"].textContent = "syntax error";
          return;
        }
        this.els["query-state"].textContent = "running…";
        this.lastResult = await this.api.runQuery(text);
        this.sort = null;
        this.selectedRow = -1;
        this.els["query-state"].textContent =
          `${this.lastResult.rows.length} row(s)`;
        this.renderResults();
      } catch (e) {
        this.els["query-state"].textContent = "";
        this.toast(`query failed: ${(e as Error).message}`);
      }
    });
  }

  private renderResults(): void {
    const result = this.lastResult;
    const table = this.els["results-table"] as HTMLTableElement;
    const warning = this.els["results-warning"];
    const empty = this.els["results-empty"];
    if (!result) return;
    const view = buildResultsView(result, this.sort);

    if (view.warning || view.truncated) {
      warning.hidden = false;
      warning.textContent = [
        view.warning,
        view.truncated ? "result truncated by LIMIT" : null,
      ].filter(Boolean).join(" · ");
    } else {
      warning.hidden = true;
      warning.textContent = "";
    }
    empty.hidden = view.rows.length > 0;

    const thead = table.querySelector("thead")!;
    thead.innerHTML = "";
    const headRow = this.doc.createElement("tr");
    thead.appendChild(headRow);
    for (const col of view.columns) {
      const th = this.doc.createElement("th");
      th.textContent =
        col + (this.sort?.column === col ? (this.sort.ascending ? " ▲" : " ▼") : "");
      th.dataset.column = col;
      th.addEventListener("click", () => {
        this.sort = nextSort(this.sort, col);
        this.renderResults();
      });
      headRow.appendChild(th);
    }

    const tbody = table.querySelector("tbody")!;
    tbody.innerHTML = "";
    view.rows.forEach((row, i) => {
      const tr = this.doc.createElement("tr");
      tbody.appendChild(tr);
      if (i === this.selectedRow) tr.classList.add("selected");
      for (const col of view.columns) {
        const td = this.doc.createElement("td");
        tr.appendChild(td);
        td.textContent = formatCell(cellValue(row, col));
        if (col === "site") td.classList.add("site-cell");
      }
      tr.addEventListener("click", () => {
        this.selectedRow = i;
        this.renderResults();
        const imageId = row.ids["image"];
        if (imageId) this.showPreview(imageId, row.ids["patient"] ?? null);
      });
    });
  }

  // --------------------------------------------------------------- preview

  showPreview(imageId: string, pseudonym: string | null = null): Promise<void> {
    return this.enqueue(async () => {
      const p = this.preview;
      if (p.objectUrl) URL.revokeObjectURL(p.objectUrl);
      this.preview = {
        status: "loading", imageId, objectUrl: null, error: null,
        pseudonym: pseudonym ?? p.pseudonym, metrics: {},
      };
      this.renderPreview();
      try {
        const resolved = await this.api.resolveImage(imageId);
        const objectUrl = await this.api.fetchPreview(resolved.guid);
        const metrics = await this.fetchPreviewMetrics(resolved.lfn);
        this.preview = {
          status: "ready", imageId, objectUrl, error: null,
          pseudonym: this.preview.pseudonym, metrics,
        };
      } catch (e) {
        const err = e as ApiError;
        this.preview = {
          status: err.status === 404 ? "unknown" : "error",
          imageId, objectUrl: null, error: err.message,
          pseudonym: this.preview.pseudonym, metrics: {},
        };
      }
      this.renderPreview();
    });
  }

  private async fetchPreviewMetrics(lfn: string): Promise<Record<string, unknown>> {
    const q = `SELECT ${PREVIEW_METRIC_FIELDS.join(", ")} ` +
      `WHERE image.lfn = '${lfn}'`;
    const result = await this.api.runQuery(q);
    return result.rows[0]?.values ?? {};
  }

  private renderPreview(): void {
    const p = this.preview;
    this.els["preview-placeholder"].hidden = p.status !== "idle" && p.status !== "unknown";
    this.els["preview-placeholder"].textContent =
      p.status === "unknown"
        ? "image not in the catalogue yet — run the query again once sync catches up"
        : "select a result row";
    this.els["preview-spinner"].hidden = p.status !== "loading";
    const img = this.els["preview-img"] as HTMLImageElement;
    img.hidden = p.status !== "ready";
    if (p.status === "ready" && p.objectUrl) img.src = p.objectUrl;
    this.els["preview-error"].hidden = p.status !== "error";
    this.els["preview-error-text"].textContent = p.error ?? "";

    const meta = this.els["preview-meta"];
    meta.innerHTML = "";
    if (p.status !== "ready") return;
    const entries: [string, unknown][] = [
      ["pseudonym", p.pseudonym],
      ...PREVIEW_METRIC_FIELDS.map(
        (f): [string, unknown] => [f, p.metrics[f]]),
    ];
    for (const [k, v] of entries) {
      const dt = this.doc.createElement("dt");
      dt.textContent = k;
      const dd = this.doc.createElement("dd");
      dd.textContent = formatCell(v);
      meta.append(dt, dd);
    }
  }

  // ------------------------------------------------------------------ jobs

  launchJob(): Promise<void> {
    return this.enqueue(async () => {
      const algorithm =
        (this.els["job-algorithm"] as HTMLSelectElement).value;
      const result = this.lastResult;
      const view = result ? buildResultsView(result, this.sort) : null;
      const row = view?.rows[this.selectedRow];
      const imageId = row?.ids["image"];
      if (!imageId) {
        this.toast("select a result row with an image first");
        return;
      }
      try {
        const resolved = await this.api.resolveImage(imageId);
        const job = await this.api.submitJob(algorithm, [resolved.lfn]);
        this.watched = upsertJob(this.watched, job);
        this.renderJobs();
      } catch (e) {
        this.toast(`job submission failed: ${(e as Error).message}`);
      }
    });
  }

  private renderJobs(): void {
    const tbody = this.els["jobs-table"].querySelector("tbody")!;
    tbody.innerHTML = "";
    const cell = (tr: HTMLElement, text?: string): HTMLElement => {
      const td = this.doc.createElement("td");
      if (text !== undefined) td.textContent = text;
      tr.appendChild(td);
      return td;
    };
    for (const job of this.watched) {
      const tr = this.doc.createElement("tr");
      tbody.appendChild(tr);
      tr.dataset.jobId = job.id;
      cell(tr, job.id.slice(0, 12));
      cell(tr, job.algorithm);
      cell(tr, job.target);
      const status = cell(
        tr, job.status === "failed" ? `failed: ${job.reason}` : job.status);
      status.classList.add(`status-${job.status}`);
      const outputs = cell(tr);
      for (const lfn of job.outputs) {
        const a = this.doc.createElement("a");
        a.href = "#";
        a.textContent = lfn;
        a.addEventListener("click", (e) => {
          e.preventDefault();
          (this.els["query-text"] as HTMLTextAreaElement).value =
            `SELECT image.lfn, image.mean_brightness WHERE image.lfn = '${lfn}'`;
          void this.submitQuery();
        });
        outputs.appendChild(a);
        outputs.appendChild(this.doc.createTextNode(" "));
      }
    }
  }

  // --------------------------------------------------------------- polling

  private async pollOnce(): Promise<void> {
    try {
      const status = await this.api.status();
      this.els["status-site"].textContent = `site ${status.site}`;
      this.els["status-files"].textContent = `${status.files} file(s)`;
      const vec = Object.entries(status.vector)
        .map(([site, seq]) => `${site}:${seq}`).sort().join("  ");
      this.els["status-peers"].textContent =
        `peers: ${status.peers.join(", ") || "none"}  |  sync ${vec}`;
    } catch (e) {
      this.els["status-site"].textContent =
        `node unreachable (${(e as Error).message})`;
    }
    let changed = false;
    for (const id of activeJobIds(this.watched)) {
      try {
        const doc = await this.api.jobStatus(id);
        const before = this.watched.find((j) => j.id === id);
        this.watched = upsertJob(this.watched, doc);
        if (before?.status !== doc.status) {
          changed = true;
          if (TERMINAL_STATUSES.has(doc.status)) {
            this.toast(
              doc.status === "done"
                ? `job ${doc.id.slice(0, 12)} done`
                : `job ${doc.id.slice(0, 12)} failed: ${doc.reason}`);
          }
        }
      } catch {
        /* transient poll failure; retried on the next tick */
      }
    }
    if (changed) this.renderJobs();
  }

  // ----------------------------------------------------------------- toast

  private toastTimer: ReturnType<typeof setTimeout> | null = null;

  private toast(message: string): void {
    const el = this.els["toast"];
    el.textContent = message;
    el.hidden = false;
    if (this.toastTimer !== null) clearTimeout(this.toastTimer);
    this.toastTimer = setTimeout(() => { el.hidden = true; }, 6000);
  }
}
