/**
 * Editing session for one annotation view.
 *
 * Owns the mask, the undo history, and the version handshake with the
 * server. The session never lets a conflict touch local pixels: a stale
 * submit leaves the mask exactly as drawn and parks the server's
 * current version in `conflict` so the page can offer a choice between
 * overwriting and continuing to edit.
 */

import { AnnoClient, SubmitOutcome } from './api.js';
import { VOID, paletteBytes } from './classes.js';
import { MaskGrid } from './mask.js';
import { bytesToBase64, encodeIndexedPng } from './png.js';
import { UndoStack } from './undo.js';

export type Tool = 'paint' | 'fill' | 'erase';

export interface BrushState {
    tool: Tool;
    classCode: number;
    radiusPx: number;
}

export interface ConflictState {
    currentVersion: number;
    message: string;
}

export class ViewSession {
    readonly taskId: string;
    readonly view: string;
    readonly mask: MaskGrid;
    readonly undoStack = new UndoStack();

    /** Version the next submit will claim; mirrors the server after each accept. */
    knownVersion: number;
    submittedOnce: boolean;
    conflict: ConflictState | null = null;
    /** Cells changed since the last accepted submit. */
    dirty = false;

    private strokeBefore: Uint8Array | null = null;
    private strokeChanged = false;

    constructor(taskId: string, view: string, sizePx: number, startVersion: number) {
        this.taskId = taskId;
        this.view = view;
        this.mask = new MaskGrid(sizePx, sizePx);
        this.knownVersion = startVersion;
        this.submittedOnce = startVersion > 0;
    }

    beginStroke(): void {
        if (this.strokeBefore === null) {
            this.strokeBefore = this.mask.snapshot();
            this.strokeChanged = false;
        }
    }

    /** Apply the brush at a cell. Call between beginStroke and endStroke. */
    applyAt(x: number, y: number, brush: BrushState): boolean {
        if (this.strokeBefore === null) {
            throw new Error('applyAt outside a stroke');
        }
        if (!this.mask.contains(Math.round(x), Math.round(y))) {
            return false;
        }
        let changed: boolean;
        if (brush.tool === 'fill') {
            changed = this.mask.floodFill(Math.round(x), Math.round(y), brush.classCode);
        } else {
            const code = brush.tool === 'erase' ? VOID : brush.classCode;
            changed = this.mask.paintDisc(x, y, brush.radiusPx, code);
        }
        if (changed) {
            this.strokeChanged = true;
            this.dirty = true;
        }
        return changed;
    }

    /** Close the stroke; it lands on the undo stack only if it changed cells. */
    endStroke(): void {
        if (this.strokeBefore !== null && this.strokeChanged) {
            this.undoStack.record(this.strokeBefore);
        }
        this.strokeBefore = null;
        this.strokeChanged = false;
    }

    undo(): boolean {
        const snap = this.undoStack.undo(this.mask.data);
        if (snap === null) {
            return false;
        }
        this.mask.restore(snap);
        this.dirty = true;
        return true;
    }

    redo(): boolean {
        const snap = this.undoStack.redo(this.mask.data);
        if (snap === null) {
            return false;
        }
        this.mask.restore(snap);
        this.dirty = true;
        return true;
    }

    /** The exact PNG bytes a submit would upload right now. */
    encodeUpload(): Uint8Array {
        return encodeIndexedPng(this.mask.data, this.mask.width, this.mask.height, paletteBytes());
    }

    async submit(client: AnnoClient, annotatorId: string): Promise<SubmitOutcome> {
        const outcome = await client.submitMask(this.taskId, {
            annotatorId,
            expectedVersion: this.knownVersion,
            maskPngB64: bytesToBase64(this.encodeUpload()),
        });
        if (outcome.kind === 'ok') {
            this.knownVersion = outcome.version;
            this.submittedOnce = true;
            this.conflict = null;
            this.dirty = false;
        } else if (outcome.kind === 'conflict') {
            this.conflict = {
                currentVersion: outcome.currentVersion,
                message: outcome.message,
            };
        }
        return outcome;
    }

    /** Resolve a conflict by claiming the server's version; pixels stay local. */
    adoptServerVersion(): void {
        if (this.conflict === null) {
            throw new Error('no conflict to adopt');
        }
        this.knownVersion = this.conflict.currentVersion;
        this.conflict = null;
    }

    dismissConflict(): void {
        this.conflict = null;
    }
}
