/** End-to-end checks against a real two-node federation over sockets.
 * `npm run test:live` boots the nodes (scripts/live_harness.py), points
 * MG_NODE_URL at one of them, and exposes MG_CONTROL_URL for stopping the
 * peer mid-test. Without those variables the suite is skipped. */

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { ConsoleApp } from "../src/app.js";
import { sleep, stubObjectUrls } from "./fakes.js";

const NODE_URL = process.env["MG_NODE_URL"];
const CONTROL_URL = process.env["MG_CONTROL_URL"];

const realFetch: typeof fetch = (input, init) => globalThis.fetch(input, init);

async function waitFor(
  cond: () => boolean,
  what: string,
  timeoutMs = 30_000,
): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (cond()) return;
    await sleep(100);
  }
  throw new Error(`timed out waiting for ${what}`);
}

function resultRows(): { site: string; cells: string[]; el: HTMLElement }[] {
  const tbody = document.querySelector("#results-table tbody")!;
  return [...tbody.querySelectorAll("tr")].map((tr) => {
    const cells = [...tr.querySelectorAll("td")].map((td) => td.textContent ?? "");
    return { site: cells[0], cells, el: tr as HTMLElement };
  });
}

describe.skipIf(!NODE_URL)("console against a live two-node federation", () => {
  let app: ConsoleApp;

  beforeAll(() => {
    stubObjectUrls();
    app = new ConsoleApp(
      document, new ApiClient(NODE_URL!, realFetch), 500);
    document.body.innerHTML = `<div id="app"></div>`;
    app.mount(document.getElementById("app") as HTMLElement);
  });

  afterAll(() => {
    app.stopPolling();
  });

  it("answers a federated query and attributes every row to a site", async () => {
    const text =
      "SELECT image.lfn, image.mean_brightness " +
      "WHERE image.mean_brightness > 0 ORDER BY image.lfn";
    (document.getElementById("query-text") as HTMLTextAreaElement).value = text;
    await app.submitQuery();
    const rows = resultRows();
    expect(rows.length).toBeGreaterThanOrEqual(4);
    // images ingested at both sites are all visible...
    const lfns = rows.flatMap((r) => r.cells.filter((c) => c.endsWith(".mgd")));
    expect(lfns.some((l) => l.startsWith("/acq/site-a/"))).toBe(true);
    expect(lfns.some((l) => l.startsWith("/acq/site-b/"))).toBe(true);
    // ...and each carries an answering-site tag (dedup keeps the smallest)
    for (const r of rows) expect(r.site).toMatch(/^site-[ab]$/);
    expect(document.getElementById("results-warning")!.hidden).toBe(true);
    // both nodes really answered this round trip
    const direct = await new ApiClient(NODE_URL!, realFetch).runQuery(text);
    expect(direct.responded.sort()).toEqual(["site-a", "site-b"]);
  });

  it("renders a preview with node-reported metrics for a clicked row", async () => {
    const local = resultRows().find((r) =>
      r.cells.some((c) => c.startsWith("/acq/site-a/")))!;
    local.el.click();
    await app.settled();
    const img = document.getElementById("preview-img") as HTMLImageElement;
    expect(img.hidden).toBe(false);
    const meta = document.getElementById("preview-meta")!.textContent!;
    expect(meta).toContain("image.mean_brightness");
    expect(meta).not.toContain("–"); // every metric came back populated
    // the bytes behind the blob URL really are a PNG from the node
    const lfn = local.cells.find((c) => c.endsWith(".mgd"))!;
    const api = new ApiClient(NODE_URL!, realFetch);
    const sop = lfn.split("/").at(-1)!.replace(/\.mgd$/, "");
    const resolved = await api.resolveImage(sop);
    const png = await realFetch(api.previewUrl(resolved.guid));
    const head = new Uint8Array((await png.arrayBuffer()).slice(0, 8));
    expect([...head]).toEqual([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);
  });

  it("launches an analysis job that reaches done and lists its outputs", async () => {
    const local = resultRows().find((r) =>
      r.cells.some((c) => c.startsWith("/acq/site-a/")))!;
    local.el.click();
    await app.settled();
    (document.getElementById("job-algorithm") as HTMLSelectElement).value =
      "standardize";
    await app.launchJob();
    const statusCell = () =>
      document.querySelector("#jobs-table tbody tr td:nth-child(4)")
        ?.textContent ?? "";
    expect(["queued", "claimed", "running", "done"]).toContain(statusCell());

    app.startPolling();
    await waitFor(() => statusCell() === "done", "job to reach done");
    app.stopPolling();
    await app.settled();
    const link = document.querySelector("#jobs-table tbody a");
    expect(link?.textContent).toMatch(/^\/derived\//);
  });

  it("warns visibly about partial results once the peer is stopped", async () => {
    const resp = await realFetch(`${CONTROL_URL}/stop/site-b`, { method: "POST" });
    expect(resp.ok).toBe(true);
    (document.getElementById("query-text") as HTMLTextAreaElement).value =
      "SELECT image.lfn WHERE image.mean_brightness > 0";
    await app.submitQuery();
    const warning = document.getElementById("results-warning")!;
    expect(warning.hidden).toBe(false);
    expect(warning.textContent).toContain("partial results");
    expect(warning.textContent).toContain("site-b");
    // surviving site still answers, with provenance intact
    const rows = resultRows();
    expect(rows.length).toBeGreaterThanOrEqual(2);
    expect(new Set(rows.map((r) => r.site))).toEqual(new Set(["site-a"]));
  });
});
