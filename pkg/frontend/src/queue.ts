/** Client-side mutation serializer: at most one request in flight.
 *
 * Edits submitted while a request runs are coalesced per key, so a burst of
 * slider moves on one needle collapses to the newest value (last write
 * wins) and responses always arrive in submission order — no stale verdict
 * can overwrite a newer one.
 */

export interface QueueOutcome<T, R> {
  edit: T;
  result?: R;
  error?: unknown;
}

export class EditQueue<T, R> {
  private pending = new Map<string, T>();
  private inflight = false;

  constructor(
    private run: (edit: T) => Promise<R>,
    private onSettled: (outcome: QueueOutcome<T, R>) => void,
  ) {}

  submit(key: string, edit: T): void {
    this.pending.set(key, edit);
    void this.pump();
  }

  get busy(): boolean {
    return this.inflight || this.pending.size > 0;
  }

  private async pump(): Promise<void> {
    if (this.inflight) return;
    const next = this.pending.entries().next();
    if (next.done) return;
    const [key, edit] = next.value;
    this.pending.delete(key);
    this.inflight = true;
    try {
      const result = await this.run(edit);
      this.onSettled({ edit, result });
    } catch (error) {
      this.onSettled({ edit, error });
    } finally {
      this.inflight = false;
      void this.pump();
    }
  }
}
