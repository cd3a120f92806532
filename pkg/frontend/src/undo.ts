/**
 * Snapshot-based undo/redo.
 *
 * Strokes on a 210x210 grid are 44 KB a piece, so whole-grid snapshots
 * are cheaper than bookkeeping deltas and make restoration trivially
 * bit-exact: undo hands back the very bytes that were saved.
 */

export class UndoStack {
    private readonly limit: number;
    private past: Uint8Array[] = [];
    private future: Uint8Array[] = [];

    constructor(limit = 64) {
        if (limit < 1) {
            throw new Error('undo stack needs room for at least one entry');
        }
        this.limit = limit;
    }

    /** Save the pre-edit state. Any redo history is invalidated. */
    record(before: Uint8Array): void {
        this.past.push(before.slice());
        this.future.length = 0;
        while (this.past.length > this.limit) {
            this.past.shift();
        }
    }

    /** Returns the state to restore, or null when there is nothing to undo. */
    undo(current: Uint8Array): Uint8Array | null {
        const snap = this.past.pop();
        if (snap === undefined) {
            return null;
        }
        this.future.push(current.slice());
        return snap;
    }

    /** Returns the state to restore, or null when there is nothing to redo. */
    redo(current: Uint8Array): Uint8Array | null {
        const snap = this.future.pop();
        if (snap === undefined) {
            return null;
        }
        this.past.push(current.slice());
        return snap;
    }

    clear(): void {
        this.past.length = 0;
        this.future.length = 0;
    }

    get undoDepth(): number {
        return this.past.length;
    }

    get redoDepth(): number {
        return this.future.length;
    }
}
