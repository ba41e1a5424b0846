/** Editor state machine.
 *
 * The UI is server-authoritative: ViewState only changes when a server
 * response is applied, and every outbound value is clamped to the bounds
 * advertised by GET /checkpoints. Render traffic is sequenced by a
 * monotone counter; a response older than the newest applied one is
 * discarded, so an out-of-order server can never roll the view back.
 */

import {
  AvatarApi,
  CheckpointsDoc,
  EditRequest,
  RenderedState,
  SessionStateDoc,
  frameHash,
} from "./api.js";

export interface ViewState {
  sessionId: string;
  theta: number;
  phi: number;
  dsInterp: number;
  sOffsets: Record<string, number>;
  tpsEnabled: boolean;
  frame: number;
  framePngBase64: string;
  lastLatencyMs: number;
}

export interface SliderBounds {
  min: number;
  max: number;
}

export interface EditorBounds {
  theta: SliderBounds;
  phi: SliderBounds;
  dsInterp: SliderBounds;
  sOffset: SliderBounds;
}

/** Server-configured pose bounds plus the service's fixed edit ranges:
 * ds_interp blends in [0, 1], per-channel offsets accumulate in [-4, 4]. */
export function boundsFrom(doc: CheckpointsDoc): EditorBounds {
  return {
    theta: { min: doc.theta_range[0], max: doc.theta_range[1] },
    phi: { min: doc.phi_range[0], max: doc.phi_range[1] },
    dsInterp: { min: 0, max: 1 },
    sOffset: { min: -4, max: 4 },
  };
}

function clamp(v: number, b: SliderBounds): number {
  return Math.min(b.max, Math.max(b.min, v));
}

export type EditorError = { kind: "network" | "out_of_range"; message: string };

export class Editor {
  private view: ViewState | null = null;
  private lastError: EditorError | null = null;

  /** Monotone sequence for outbound render-affecting requests. */
  private seq = 0;
  /** Sequence number of the newest applied response. */
  private appliedSeq = 0;
  /** Pose the user most recently asked for (may be ahead of the view). */
  private targetPose: { theta: number; phi: number } | null = null;
  /** Whether a pose request is currently in flight. */
  private poseRequestInFlight = false;

  private frameCache = new Map<number, string>();
  readonly requestLog: string[] = [];

  constructor(
    private readonly api: AvatarApi,
    private readonly bounds: EditorBounds,
    private readonly now: () => number = () => Date.now(),
  ) {}

  get state(): ViewState | null {
    return this.view;
  }

  get error(): EditorError | null {
    return this.lastError;
  }

  get openFrameHash(): number | null {
    return this.openHash;
  }

  private openHash: number | null = null;

  async open(checkpoint: string, w?: number[]): Promise<ViewState> {
    const t0 = this.now();
    const res = await this.api.openSession(checkpoint, w);
    this.applyResponse(res, this.nextSeq(), t0);
    this.openHash = frameHash(res.render_png_base64);
    this.frameCache.clear();
    this.frameCache.set(res.state.frame, res.render_png_base64);
    return this.view!;
  }

  private nextSeq(): number {
    this.seq += 1;
    return this.seq;
  }

  private applyResponse(res: RenderedState, seq: number, t0: number): boolean {
    if (seq < this.appliedSeq) {
      return false; // stale: a newer response has already been applied
    }
    this.appliedSeq = seq;
    this.view = viewFrom(res.state, res.render_png_base64, this.now() - t0);
    this.lastError = null;
    return true;
  }

  /**
   * Orbit by a drag delta. The pose is clamped; a zero-effect drag issues
   * no request; a drag during an in-flight request supersedes it (the
   * newest pose wins and the older response is discarded on arrival).
   */
  async orbit(dTheta: number, dPhi: number): Promise<void> {
    if (!this.view) throw new Error("no open session");
    const from = this.targetPose ?? { theta: this.view.theta, phi: this.view.phi };
    const next = {
      theta: clamp(from.theta + dTheta, this.bounds.theta),
      phi: clamp(from.phi + dPhi, this.bounds.phi),
    };
    if (next.theta === from.theta && next.phi === from.phi) {
      return; // no-op drag: nothing to request
    }
    this.targetPose = next;
    if (this.poseRequestInFlight) {
      return; // the in-flight completion handler will pick up targetPose
    }
    await this.drainPoseRequests();
  }

  private async drainPoseRequests(): Promise<void> {
    this.poseRequestInFlight = true;
    try {
      while (
        this.targetPose &&
        (this.view === null ||
          this.targetPose.theta !== this.view.theta ||
          this.targetPose.phi !== this.view.phi)
      ) {
        const pose = this.targetPose;
        const seq = this.nextSeq();
        const t0 = this.now();
        this.requestLog.push(`pose ${pose.theta} ${pose.phi}`);
        try {
          const res = await this.api.applyEdit(this.view!.sessionId, {
            kind: "pose",
            theta: pose.theta,
            phi: pose.phi,
          });
          this.applyResponse(res, seq, t0);
        } catch (err) {
          this.lastError = { kind: "network", message: String(err) };
          return;
        }
        if (this.targetPose === pose) {
          this.targetPose = null;
        }
      }
    } finally {
      this.poseRequestInFlight = false;
    }
  }

  /** Apply a slider edit; the view reflects only the server-confirmed
   * state. Returns the new view, or null when the edit was rejected. */
  async setSlider(
    name: "ds_interp" | `s:${number}:${number}`,
    value: number,
  ): Promise<ViewState | null> {
    if (!this.view) throw new Error("no open session");
    let edit: EditRequest;
    if (name === "ds_interp") {
      edit = { kind: "ds_interp", alpha: clamp(value, this.bounds.dsInterp) };
    } else {
      const [, layer, channel] = name.split(":");
      const key = `${layer}:${channel}`;
      const current = this.view.sOffsets[key] ?? 0;
      const target = clamp(value, this.bounds.sOffset);
      edit = {
        kind: "s_channel",
        layer: Number(layer),
        channel: Number(channel),
        offset: target - current,
      };
      if (edit.offset === 0) return this.view;
    }
    const seq = this.nextSeq();
    const t0 = this.now();
    this.requestLog.push(`edit ${JSON.stringify(edit)}`);
    try {
      const res = await this.api.applyEdit(this.view.sessionId, edit);
      this.applyResponse(res, seq, t0);
      return this.view;
    } catch (err) {
      this.lastError = isOutOfRange(err)
        ? { kind: "out_of_range", message: String(err) }
        : { kind: "network", message: String(err) };
      return null;
    }
  }

  async toggleDeformation(enabled: boolean): Promise<ViewState | null> {
    if (!this.view) throw new Error("no open session");
    const seq = this.nextSeq();
    const t0 = this.now();
    this.requestLog.push(`tps ${enabled}`);
    try {
      const res = await this.api.applyEdit(this.view.sessionId, {
        kind: "tps_latent",
        enabled,
      });
      this.applyResponse(res, seq, t0);
      return this.view;
    } catch (err) {
      this.lastError = { kind: "network", message: String(err) };
      return null;
    }
  }

  /** Scrub to an animation frame (index clamped). Frames are cached:
   * revisiting one issues no request; a full scrub of n frames issues at
   * most n requests. */
  async scrub(frame: number, nFrames: number): Promise<string> {
    if (!this.view) throw new Error("no open session");
    const idx = Math.max(0, Math.min(nFrames - 1, Math.round(frame)));
    const cached = this.frameCache.get(idx);
    if (cached !== undefined) {
      this.view = { ...this.view, frame: idx, framePngBase64: cached };
      return cached;
    }
    const seq = this.nextSeq();
    const t0 = this.now();
    this.requestLog.push(`frame ${idx}`);
    const res = await this.api.applyEdit(this.view.sessionId, {
      kind: "animate_frame",
      frame: idx,
    });
    if (this.applyResponse(res, seq, t0)) {
      this.frameCache.set(idx, res.render_png_base64);
    }
    return res.render_png_base64;
  }
}

function viewFrom(
  doc: SessionStateDoc,
  png: string,
  latencyMs: number,
): ViewState {
  return {
    sessionId: doc.session_id,
    theta: doc.theta,
    phi: doc.phi,
    dsInterp: doc.ds_interp,
    sOffsets: { ...doc.s_offsets },
    tpsEnabled: doc.tps_enabled,
    frame: doc.frame,
    framePngBase64: png,
    lastLatencyMs: latencyMs,
  };
}

function isOutOfRange(err: unknown): boolean {
  return (
    typeof err === "object" &&
    err !== null &&
    "status" in err &&
    (err as { status: number }).status === 422
  );
}
