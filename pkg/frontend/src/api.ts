/** Typed client for the avatar_service HTTP API.
 *
 * The fetch implementation is injectable so tests can drive the editor
 * against a scripted mock server.
 */

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface CheckpointsDoc {
  checkpoints: string[];
  theta_range: [number, number];
  phi_range: [number, number];
}

export interface SessionStateDoc {
  session_id: string;
  checkpoint_id: string;
  ds_interp: number;
  s_offsets: Record<string, number>;
  tps_enabled: boolean;
  theta: number;
  phi: number;
  frame: number;
  n_edits: number;
}

export interface RenderedState {
  state: SessionStateDoc;
  render_png_base64: string;
}

export interface EditRequest {
  kind: "pose" | "ds_interp" | "s_channel" | "tps_latent" | "animate_frame";
  theta?: number;
  phi?: number;
  alpha?: number;
  layer?: number;
  channel?: number;
  offset?: number;
  enabled?: boolean;
  frame?: number;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

async function readJson<T>(res: Response): Promise<T> {
  if (!res.ok) {
    const body = await res.text().catch(() => "");
    throw new ApiError(res.status, body || res.statusText);
  }
  return (await res.json()) as T;
}

export class AvatarApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  getCheckpoints(): Promise<CheckpointsDoc> {
    return this.fetchFn(`${this.baseUrl}/checkpoints`).then((r) =>
      readJson<CheckpointsDoc>(r),
    );
  }

  openSession(checkpoint: string, w?: number[]): Promise<RenderedState> {
    return this.fetchFn(`${this.baseUrl}/sessions`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ checkpoint, w }),
    }).then((r) => readJson<RenderedState>(r));
  }

  applyEdit(sessionId: string, edit: EditRequest): Promise<RenderedState> {
    return this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/edits`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(edit),
    }).then((r) => readJson<RenderedState>(r));
  }

  /** Side-effect-free render at an optional pose override. */
  async renderPng(
    sessionId: string,
    pose?: { theta: number; phi: number },
  ): Promise<string> {
    const query =
      pose === undefined ? "" : `?theta=${pose.theta}&phi=${pose.phi}`;
    const res = await this.fetchFn(
      `${this.baseUrl}/sessions/${sessionId}/render${query}`,
    );
    if (!res.ok) {
      throw new ApiError(res.status, res.statusText);
    }
    const bytes = new Uint8Array(await res.arrayBuffer());
    let binary = "";
    for (const b of bytes) binary += String.fromCharCode(b);
    return typeof btoa === "function"
      ? btoa(binary)
      : Buffer.from(bytes).toString("base64");
  }
}

/** FNV-1a hash of a frame's base64 payload; cheap pixel-identity check. */
export function frameHash(pngBase64: string): number {
  let h = 0x811c9dc5;
  for (let i = 0; i < pngBase64.length; i++) {
    h ^= pngBase64.charCodeAt(i);
    h = Math.imul(h, 0x01000193);
  }
  return h >>> 0;
}
