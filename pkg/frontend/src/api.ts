// Typed client over the service REST surface. The client never computes
// kappa or thresholds itself; every number shown in the UI comes back
// from an endpoint.

export interface ProjectSummary {
  name: string;
  documents: number;
  excerpts: number;
  codebooks: string[];
  runs: string[];
}

export interface CodeDto {
  id: string;
  name: string;
  definition: string;
  inclusion_criteria: string[];
  exclusion_criteria: string[];
  parent_id: string | null;
  positive_examples: string[];
  negative_examples: string[];
  supporting_quotes: [string, string | null][];
}

export interface CodebookDto {
  id: string;
  version: number;
  lens: string | null;
  codes: CodeDto[];
}

export interface AnnotationRow {
  id: string;
  excerpt_id: string;
  code_id: string;
  rater: string;
  positive: boolean;
  score: number | null;
  reasoning: string | null;
  excerpt_text: string;
  run_id: string;
  created_at: string;
  failed: boolean;
  fallback: boolean;
}

export interface AnnotationPage {
  total: number;
  page: number;
  pages: number;
  positive: number;
  items: AnnotationRow[];
}

export interface ThresholdResult {
  code_id: string;
  threshold: number;
  positive: number;
  negative: number;
  warnings: string[];
  kappa?: number;
}

export interface ExamplePools {
  positive: number;
  negative: number;
}

export interface FeedbackResult {
  stored: Record<string, unknown>;
  example_pools: ExamplePools;
}

export interface JobDto {
  id: string;
  kind: string;
  state: string;
  progress: { completed: number; total: number };
  result_ref: string | null;
  error: string | null;
}

export interface ConfusionDto {
  tp: number;
  fp: number;
  fn: number;
  tn: number;
}

export interface CodeEvalDto {
  code_id: string;
  counts: ConfusionDto;
  kappa: number;
  f1: number | null;
  percent_agreement: number;
  kappa_ci_95: [number, number] | null;
  f1_ci_95: [number, number] | null;
  threshold_used: number | null;
  code_tuned_threshold: number | null;
}

export interface EvalReportDto {
  per_code: CodeEvalDto[];
  mean_kappa: number | null;
  pooled_kappa: number | null;
  mean_f1: number | null;
}

export interface DriftPoint {
  doc_index: number;
  fp_rate: number;
  fn_rate: number;
}

export interface DriftDto {
  window: number;
  points: DriftPoint[];
}

export type Verdict = "false_positive" | "false_negative";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, detail: string) {
    super(detail);
  }
}

async function fail(resp: Response): Promise<never> {
  let detail = `${resp.status}`;
  try {
    const body = await resp.json();
    if (body && typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(resp.status, detail);
}

export class ApiClient {
  pollInterval = 300;

  constructor(private fetchImpl: FetchLike, private base = "") {}

  private async get<T>(path: string): Promise<T> {
    const resp = await this.fetchImpl(this.base + path);
    if (!resp.ok) await fail(resp);
    return resp.json();
  }

  private async send<T>(method: string, path: string, body?: unknown): Promise<T> {
    const resp = await this.fetchImpl(this.base + path, {
      method,
      headers: { "content-type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!resp.ok) await fail(resp);
    return resp.json();
  }

  listProjects(): Promise<ProjectSummary[]> {
    return this.get("/projects");
  }

  createProject(name: string): Promise<{ name: string }> {
    return this.send("POST", "/projects", { name });
  }

  uploadDocuments(
    project: string,
    body: Record<string, unknown>,
  ): Promise<{ documents: number; excerpts: number; gold_labels: number }> {
    return this.send("POST", `/projects/${project}/documents`, body);
  }

  listCodebooks(project: string): Promise<CodebookDto[]> {
    return this.get(`/projects/${project}/codebooks`);
  }

  getCodebook(project: string, id: string): Promise<CodebookDto> {
    return this.get(`/projects/${project}/codebooks/${id}`);
  }

  putCodebook(
    project: string,
    id: string,
    patches: Array<Partial<CodeDto> & { id: string }>,
  ): Promise<CodebookDto> {
    return this.send("PUT", `/projects/${project}/codebooks/${id}`, { codes: patches });
  }

  createJob(project: string, kind: string, params: Record<string, unknown>): Promise<JobDto> {
    return this.send("POST", `/projects/${project}/jobs`, { kind, params });
  }

  getJob(id: string): Promise<JobDto> {
    return this.get(`/jobs/${id}`);
  }

  /** Poll a job until it reaches a terminal state, reporting each update. */
  async watchJob(id: string, onUpdate?: (job: JobDto) => void): Promise<JobDto> {
    for (;;) {
      const job = await this.getJob(id);
      if (onUpdate) onUpdate(job);
      if (job.state === "done" || job.state === "failed") return job;
      await new Promise((r) => setTimeout(r, this.pollInterval));
    }
  }

  annotations(
    run: string,
    opts: { page?: number; pageSize?: number; code?: string; minScore?: number } = {},
  ): Promise<AnnotationPage> {
    const q = new URLSearchParams();
    if (opts.page) q.set("page", String(opts.page));
    if (opts.pageSize) q.set("page_size", String(opts.pageSize));
    if (opts.code) q.set("code", opts.code);
    if (opts.minScore !== undefined) q.set("min_score", String(opts.minScore));
    const suffix = q.toString() ? `?${q}` : "";
    return this.get(`/runs/${run}/annotations${suffix}`);
  }

  setThreshold(
    run: string,
    codeId: string,
    threshold: number,
    gold?: string,
  ): Promise<ThresholdResult> {
    const body: Record<string, unknown> = { code_id: codeId, threshold };
    if (gold) body.gold = gold;
    return this.send("POST", `/runs/${run}/threshold`, body);
  }

  sendVerdict(
    run: string,
    annotationId: string,
    verdict: Verdict,
    errorCategory?: string,
  ): Promise<FeedbackResult> {
    const body: Record<string, unknown> = { annotation_id: annotationId, verdict };
    if (errorCategory) body.error_category = errorCategory;
    return this.send("POST", `/runs/${run}/feedback`, body);
  }

  rerun(run: string): Promise<JobDto> {
    return this.send("POST", `/runs/${run}/rerun`);
  }

  evalReport(run: string, opts: { mode?: string; bootstrap?: number } = {}): Promise<EvalReportDto> {
    const q = new URLSearchParams();
    if (opts.mode) q.set("mode", opts.mode);
    if (opts.bootstrap !== undefined) q.set("bootstrap", String(opts.bootstrap));
    const suffix = q.toString() ? `?${q}` : "";
    return this.get(`/runs/${run}/eval${suffix}`);
  }

  drift(run: string, window?: number): Promise<DriftDto> {
    const suffix = window !== undefined ? `?window=${window}` : "";
    return this.get(`/runs/${run}/drift${suffix}`);
  }
}
