/** Typed client for the curation service; fetch is injectable for tests. */

import type {
  DecisionRequest,
  DecisionResponse,
  EllipseParams,
  ListResponse,
} from "./types";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class AlreadyDecidedError extends Error {
  constructor(itemId: string) {
    super(`item ${itemId} already decided`);
    this.name = "AlreadyDecidedError";
  }
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
    this.name = "ApiError";
  }
}

export class ReviewApi {
  constructor(
    private readonly baseUrl = "",
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  async listItems(status?: string, offset = 0, limit = 50): Promise<ListResponse> {
    const params = new URLSearchParams({ offset: String(offset), limit: String(limit) });
    if (status) params.set("status", status);
    const res = await this.fetchImpl(`${this.baseUrl}/api/items?${params}`);
    if (!res.ok) throw new ApiError(res.status, await res.text());
    return (await res.json()) as ListResponse;
  }

  imageUrl(itemId: string): string {
    return `${this.baseUrl}/api/items/${itemId}/image.png`;
  }

  maskUrl(itemId: string): string {
    return `${this.baseUrl}/api/items/${itemId}/mask.png`;
  }

  /**
   * Post one decision. The action is accept_with_edit exactly when edited
   * parameters are supplied.
   */
  async decide(
    itemId: string,
    accept: boolean,
    edited?: EllipseParams,
  ): Promise<DecisionResponse> {
    const body: DecisionRequest = !accept
      ? { action: "reject" }
      : edited
        ? { action: "accept_with_edit", ellipse: edited }
        : { action: "accept" };
    const res = await this.fetchImpl(`${this.baseUrl}/api/items/${itemId}/decision`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (res.status === 409) throw new AlreadyDecidedError(itemId);
    if (!res.ok) throw new ApiError(res.status, await res.text());
    return (await res.json()) as DecisionResponse;
  }

  async exportCurated(outPath: string): Promise<{ exported: number }> {
    const res = await this.fetchImpl(`${this.baseUrl}/api/export`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ out: outPath }),
    });
    if (!res.ok) throw new ApiError(res.status, await res.text());
    return (await res.json()) as { exported: number };
  }
}
