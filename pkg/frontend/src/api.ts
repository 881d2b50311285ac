/** Typed client for a node's HTTP document API. Every piece of data the
 * console shows comes through here; nothing is recomputed client-side. */

export interface StatusDoc {
  site: string;
  vector: Record<string, number>;
  peers: string[];
  uptime_s: number;
  files: number;
}

export interface ResultRowDoc {
  ids: Record<string, string>;
  values: Record<string, unknown>;
  site: string;
}

export interface QueryResultDoc {
  rows: ResultRowDoc[];
  responded: string[];
  failed: [string, string][];
  truncated: boolean;
}

export type ValidationDoc =
  | { ok: true; ast: unknown }
  | { ok: false; line?: number; col?: number; expected?: string; message?: string };

export interface JobDoc {
  id: string;
  algorithm: string;
  params: Record<string, unknown>;
  inputs: string[];
  target: string;
  submitter: string;
  status: "queued" | "claimed" | "running" | "done" | "failed";
  outputs: string[];
  reason: string;
}

export interface ResolveDoc {
  lfn: string;
  guid: string;
  size: number;
  checksum: string;
  replicas: { site: string; pfn: string }[];
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    let resp: Response;
    try {
      resp = await this.fetchImpl(this.baseUrl + path, init);
    } catch (e) {
      throw new ApiError(0, `node unreachable: ${String(e)}`);
    }
    const doc = (await resp.json()) as T & { error?: string };
    if (!resp.ok) {
      throw new ApiError(resp.status, doc.error ?? `HTTP ${resp.status}`);
    }
    return doc;
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.json<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  status(): Promise<StatusDoc> {
    return this.json("/api/status");
  }

  validateQuery(text: string): Promise<ValidationDoc> {
    return this.post("/api/query/validate", { text });
  }

  runQuery(text: string): Promise<QueryResultDoc> {
    return this.post("/api/query", { text });
  }

  resolveImage(imageId: string): Promise<ResolveDoc> {
    return this.json(`/api/catalogue/resolve?image=${encodeURIComponent(imageId)}`);
  }

  previewUrl(guid: string): string {
    return `${this.baseUrl}/api/preview/${guid}`;
  }

  /** Fetches the preview so failures surface as ApiError, then hands back
   * an object URL for the <img>. */
  async fetchPreview(guid: string): Promise<string> {
    let resp: Response;
    try {
      resp = await this.fetchImpl(this.previewUrl(guid));
    } catch (e) {
      throw new ApiError(0, `node unreachable: ${String(e)}`);
    }
    if (!resp.ok) {
      let message = `HTTP ${resp.status}`;
      try {
        message = ((await resp.json()) as { error?: string }).error ?? message;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(resp.status, message);
    }
    return URL.createObjectURL(await resp.blob());
  }

  submitJob(algorithm: string, inputs: string[],
            params: Record<string, unknown> = {}): Promise<JobDoc> {
    return this.post("/api/jobs", { algorithm, inputs, params });
  }

  jobStatus(id: string): Promise<JobDoc> {
    return this.json(`/api/jobs/${id}`);
  }
}
