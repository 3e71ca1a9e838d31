/** Review session state: queue cursor, edit state, server-synced counts.
 *
 * The UI never computes masks; the server stores the authoritative result.
 * This module owns everything testable about the session so the DOM layer
 * stays thin.
 */

import { AlreadyDecidedError, ReviewApi } from "./api";
import { canonicalize, ellipsesEqual } from "./ellipse";
import type { Counts, EllipseParams, ReviewItem } from "./types";

export interface ViewState {
  queue: ReviewItem[];
  cursor: number;
  opacity: number;
  edited: EllipseParams | null;
  dirty: boolean;
  counts: Counts;
  error: string | null;
  done: boolean;
}

export function initialState(): ViewState {
  return {
    queue: [],
    cursor: 0,
    opacity: 0.5,
    edited: null,
    dirty: false,
    counts: { pending: 0, accepted: 0, rejected: 0 },
    error: null,
    done: false,
  };
}

export function currentItem(state: ViewState): ReviewItem | null {
  return state.cursor < state.queue.length ? state.queue[state.cursor] : null;
}

export function setOpacity(state: ViewState, value: number): ViewState {
  return { ...state, opacity: Math.min(Math.max(value, 0), 1) };
}

/** Ellipse the preview should draw: the edit when dirty, else the proposal. */
export function previewEllipse(state: ViewState): EllipseParams | null {
  if (state.edited) return state.edited;
  return currentItem(state)?.proposed_ellipse ?? null;
}

export function applyEdit(state: ViewState, params: EllipseParams): ViewState {
  const proposal = currentItem(state)?.proposed_ellipse ?? null;
  const canonical = canonicalize(params);
  const dirty = proposal === null || !ellipsesEqual(canonical, proposal);
  return { ...state, edited: dirty ? canonical : null, dirty };
}

export function resetEdit(state: ViewState): ViewState {
  return { ...state, edited: null, dirty: false };
}

function advance(state: ViewState, counts?: Counts): ViewState {
  const cursor = state.cursor + 1;
  return {
    ...state,
    cursor,
    edited: null,
    dirty: false,
    counts: counts ?? state.counts,
    done: cursor >= state.queue.length,
    error: null,
  };
}

export class ReviewSession {
  state: ViewState = initialState();

  constructor(
    private readonly api: ReviewApi,
    private readonly onChange: (state: ViewState) => void = () => {},
  ) {}

  private update(next: ViewState) {
    this.state = next;
    this.onChange(next);
  }

  async loadQueue(limit = 200): Promise<void> {
    try {
      const res = await this.api.listItems("pending", 0, limit);
      this.update({
        ...this.state,
        queue: res.items,
        cursor: 0,
        edited: null,
        dirty: false,
        counts: res.counts,
        done: res.items.length === 0,
        error: null,
      });
    } catch (err) {
      // keep the queue; surface a retryable banner
      this.update({ ...this.state, error: String(err) });
    }
  }

  edit(params: EllipseParams) {
    this.update(applyEdit(this.state, params));
  }

  reset() {
    this.update(resetEdit(this.state));
  }

  setOpacity(value: number) {
    this.update(setOpacity(this.state, value));
  }

  /**
   * Submit the decision for the current item and advance. A dirty edit turns
   * an accept into accept_with_edit. A concurrent decision (conflict) skips
   * the item without losing state.
   */
  async submit(accept: boolean): Promise<void> {
    const item = currentItem(this.state);
    if (!item) return;
    try {
      const res = await this.api.decide(
        item.id,
        accept,
        accept && this.state.dirty ? (this.state.edited ?? undefined) : undefined,
      );
      this.update(advance(this.state, res.counts));
    } catch (err) {
      if (err instanceof AlreadyDecidedError) {
        this.update(advance(this.state));
        return;
      }
      this.update({ ...this.state, error: String(err) });
    }
  }
}
