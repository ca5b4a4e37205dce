// Typed client for the partlat HTTP service. Response shapes mirror the
// server exactly; this module is the only place that talks to the network.

export interface FrameMeta {
  id: number;
  n: number;
  d: number;
  attr_names: string[];
}

export interface SessionInfo {
  session: string;
  frames: FrameMeta[];
}

export interface TreeNode {
  id: number;
  parent: number | null;
  children: number[];
  // member particle indices, encoded as [start, end) ranges
  members: Array<[number, number]>;
  n_members: number;
  centroid: number[] | null;
  split_k: number | null;
}

export interface TreePayload {
  frame_id: number;
  nodes: TreeNode[];
  op_log: unknown[];
  has_latents: boolean;
}

export type JobState = "pending" | "running" | "done" | "failed";

export interface JobStatus {
  id: string;
  kind: string;
  session: string;
  state: JobState;
  epoch?: number;
  loss?: number;
  error?: string;
  result?: unknown;
}

export interface Projection {
  frame: number;
  indices: number[];
  points: Array<[number, number]>;
  // leaf node id per projected point, aligned with indices
  labels: number[];
  perplexity: number;
  iterations: number;
  seed: number;
  sample_fraction: number;
}

export interface ParticlesPayload {
  frame: number;
  node: number;
  n: number;
  attr: string;
  attr_names: string[];
  positions_b64: string;
  values_b64: string;
}

export interface TraceEntry {
  t: number;
  center: [number, number, number];
  iters: number;
  similarity: number;
  converged: boolean;
}

export interface TrackResult {
  trace: TraceEntry[];
}

export interface TrainParams {
  radius: number;
  latent_dim: number;
  epochs: number;
  batch_size: number;
  sample_fraction: number;
  seed: number;
}

export interface TrackParams {
  frame_start: number;
  frame_end: number;
  region_center: [number, number, number];
  half_extent: number | [number, number, number];
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
    public detail: unknown = null,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

// Everything the UI needs from the server. Tests substitute an in-memory
// implementation with the same contract.
export interface ApiClient {
  createSession(datasetDir: string): Promise<SessionInfo>;
  listFrames(sid: string): Promise<SessionInfo>;
  startTrain(sid: string, params: TrainParams): Promise<string>;
  startInfer(sid: string, frame: number): Promise<string>;
  jobStatus(jobId: string): Promise<JobStatus>;
  getTree(sid: string, frame: number): Promise<TreePayload>;
  splitNode(sid: string, frame: number, node: number, k: number, seed: number): Promise<TreePayload>;
  revokeNode(sid: string, frame: number, node: number): Promise<TreePayload>;
  getProjection(sid: string, frame: number, sampleFraction: number, perplexity: number, seed: number): Promise<Projection>;
  getParticles(sid: string, frame: number, node: number, attr: string | null): Promise<ParticlesPayload>;
  startTrack(sid: string, params: TrackParams): Promise<string>;
}

async function parseError(resp: Response): Promise<ApiError> {
  let code = "http_error";
  let message = `${resp.status} ${resp.statusText}`;
  let detail: unknown = null;
  try {
    const body = await resp.json();
    if (body && typeof body === "object") {
      code = body.code ?? code;
      message = body.message ?? message;
      detail = body.detail ?? null;
    }
  } catch {
    // non-JSON error body; keep the status line
  }
  return new ApiError(resp.status, code, message, detail);
}

export class HttpApi implements ApiClient {
  constructor(private base: string) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const resp = await fetch(this.base + path, {
      method,
      headers: body === undefined ? {} : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!resp.ok) throw await parseError(resp);
    return (await resp.json()) as T;
  }

  createSession(datasetDir: string): Promise<SessionInfo> {
    return this.request("POST", "/sessions", { dataset_dir: datasetDir });
  }

  listFrames(sid: string): Promise<SessionInfo> {
    return this.request("GET", `/sessions/${sid}/frames`);
  }

  async startTrain(sid: string, params: TrainParams): Promise<string> {
    const out = await this.request<{ job: string }>("POST", `/sessions/${sid}/train`, params);
    return out.job;
  }

  async startInfer(sid: string, frame: number): Promise<string> {
    const out = await this.request<{ job: string }>("POST", `/sessions/${sid}/infer`, { frame });
    return out.job;
  }

  jobStatus(jobId: string): Promise<JobStatus> {
    return this.request("GET", `/jobs/${jobId}`);
  }

  getTree(sid: string, frame: number): Promise<TreePayload> {
    return this.request("GET", `/sessions/${sid}/tree/${frame}`);
  }

  splitNode(sid: string, frame: number, node: number, k: number, seed: number): Promise<TreePayload> {
    return this.request("POST", `/sessions/${sid}/tree/${frame}/split`, { node, k, seed });
  }

  revokeNode(sid: string, frame: number, node: number): Promise<TreePayload> {
    return this.request("POST", `/sessions/${sid}/tree/${frame}/revoke`, { node });
  }

  getProjection(sid: string, frame: number, sampleFraction: number, perplexity: number, seed: number): Promise<Projection> {
    const q = `sample_fraction=${sampleFraction}&perplexity=${perplexity}&seed=${seed}`;
    return this.request("GET", `/sessions/${sid}/projection/${frame}?${q}`);
  }

  getParticles(sid: string, frame: number, node: number, attr: string | null): Promise<ParticlesPayload> {
    const q = attr === null ? `node=${node}` : `node=${node}&attr=${encodeURIComponent(attr)}`;
    return this.request("GET", `/sessions/${sid}/particles/${frame}?${q}`);
  }

  async startTrack(sid: string, params: TrackParams): Promise<string> {
    const out = await this.request<{ job: string }>("POST", `/sessions/${sid}/track`, params);
    return out.job;
  }
}

// -- payload decoding helpers

export function decodeRanges(ranges: Array<[number, number]>): number[] {
  const out: number[] = [];
  for (const [a, b] of ranges) {
    for (let i = a; i < b; i++) out.push(i);
  }
  return out;
}

export function b64ToFloat32(b64: string): Float32Array {
  const raw = atob(b64);
  const bytes = new Uint8Array(raw.length);
  for (let i = 0; i < raw.length; i++) bytes[i] = raw.charCodeAt(i);
  const view = new DataView(bytes.buffer);
  const out = new Float32Array(bytes.length / 4);
  for (let i = 0; i < out.length; i++) out[i] = view.getFloat32(i * 4, true);
  return out;
}
