/** Typed client for the identification service, versioned API only. */

import type { SourceRect } from "./roi.js";

export interface EllipseParams {
  x: number;
  y: number;
  a: number;
  b: number;
  c: number;
}

export interface OverlayPair {
  query: EllipseParams;
  db: EllipseParams;
  score: number;
}

export interface RankedLabel {
  label_id: number;
  name: string;
  score: number;
  best_image_id: number;
}

export interface Candidate {
  image_id: number;
  label_id: number | null;
  label_name: string | null;
  roi: number[];
  score: number;
  initial_score: number;
  reranked: boolean;
  matches: OverlayPair[];
  /** Working (post-resize) ROI size; present when matches is non-empty. */
  roi_size?: [number, number];
}

export interface QueryResponse {
  generation: number;
  timing_seconds: number;
  query_roi_size: [number, number];
  config: Record<string, unknown>;
  labels: RankedLabel[];
  candidates: Candidate[];
}

export interface ImageRecord {
  image_id: number;
  source_uri: string;
  roi: number[];
  label_id: number | null;
  label_name: string | null;
  ingest_time: string;
  num_keypoints: number;
}

export interface LabelEntry {
  label_id: number;
  name: string;
  image_ids: number[];
}

export interface ServerStatus {
  num_images: number;
  num_labels: number;
  generation: number | null;
  backend: string | null;
  dirty: boolean;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
    this.name = "ApiError";
  }
}

function roiParam(rect: SourceRect): string {
  return `${rect.x},${rect.y},${rect.width},${rect.height}`;
}

async function unwrap<T>(resp: Response): Promise<T> {
  if (resp.ok) {
    return (await resp.json()) as T;
  }
  let detail = resp.statusText;
  try {
    const body = (await resp.json()) as { detail?: unknown };
    if (body.detail !== undefined) {
      detail = typeof body.detail === "string" ? body.detail : JSON.stringify(body.detail);
    }
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(resp.status, detail);
}

export class ApiClient {
  /** base: server origin, or "" when the UI is served by the service itself. */
  constructor(private readonly base: string = "") {}

  private url(path: string): string {
    return `${this.base}/api/v1${path}`;
  }

  config(): Promise<Record<string, unknown>> {
    return fetch(this.url("/config")).then((r) => unwrap(r));
  }

  status(): Promise<ServerStatus> {
    return fetch(this.url("/status")).then((r) => unwrap(r));
  }

  labels(): Promise<LabelEntry[]> {
    return fetch(this.url("/labels"))
      .then((r) => unwrap<{ labels: LabelEntry[] }>(r))
      .then((body) => body.labels);
  }

  image(imageId: number): Promise<ImageRecord> {
    return fetch(this.url(`/images/${imageId}`)).then((r) => unwrap(r));
  }

  imageFileUrl(imageId: number): string {
    return this.url(`/images/${imageId}/file`);
  }

  async query(
    image: Blob,
    roi: SourceRect,
    overrides: Record<string, string> = {},
    signal?: AbortSignal,
  ): Promise<QueryResponse> {
    const form = new FormData();
    form.append("image", image, "query.png");
    form.append("roi", roiParam(roi));
    for (const [key, value] of Object.entries(overrides)) {
      form.append(key, value);
    }
    const resp = await fetch(this.url("/query"), { method: "POST", body: form, signal });
    return unwrap(resp);
  }

  async registerImage(image: Blob, roi: SourceRect, label?: string): Promise<ImageRecord> {
    const form = new FormData();
    form.append("image", image, "sighting.png");
    form.append("roi", roiParam(roi));
    if (label !== undefined) {
      form.append("label", label);
    }
    const resp = await fetch(this.url("/images"), { method: "POST", body: form });
    return unwrap(resp);
  }

  async assignLabel(
    imageId: number,
    name: string,
    expectNew = false,
  ): Promise<{ image_id: number; label_id: number; name: string }> {
    const resp = await fetch(this.url(`/images/${imageId}/label`), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ name, expect_new: expectNew }),
    });
    return unwrap(resp);
  }

  async rebuild(body: { backend?: string; num_trees?: number; seed?: number } = {}): Promise<{
    generation: number;
    backend: string;
    fingerprint: string;
  }> {
    const resp = await fetch(this.url("/rebuild"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    return unwrap(resp);
  }
}
