/** Payload shapes of the curation service API (schema_version 1). */

export interface EllipseParams {
  cx: number;
  cy: number;
  a: number;
  b: number;
  theta: number;
}

export type ItemStatus = "pending" | "accepted" | "rejected";

export interface ReviewItem {
  id: string;
  image_path: string;
  raw_channel_path: string;
  trimester: string;
  proposed_ellipse: EllipseParams | null;
  quality: number;
  status: ItemStatus;
  source_status: string;
  decided_at: string | null;
  edited_ellipse: EllipseParams | null;
}

export interface Counts {
  pending: number;
  accepted: number;
  rejected: number;
}

export interface ListResponse {
  schema_version: number;
  items: ReviewItem[];
  total: number;
  offset: number;
  limit: number;
  counts: Counts;
}

export interface DecisionResponse {
  schema_version: number;
  item: ReviewItem;
  counts: Counts;
}

export type DecisionAction = "accept" | "reject" | "accept_with_edit";

export interface DecisionRequest {
  action: DecisionAction;
  ellipse?: EllipseParams;
}
