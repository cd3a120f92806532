/**
 * The editable label grid backing one annotation view.
 *
 * Cells hold raw class codes (one byte each); everything starts as VOID
 * and painting is the only way cells change. All edits stay on the cell
 * lattice, so whatever this grid holds is exactly what gets uploaded.
 */

import { VOID } from './classes.js';

export class MaskGrid {
    readonly width: number;
    readonly height: number;
    readonly data: Uint8Array;

    constructor(width: number, height: number, fill: number = VOID) {
        if (!Number.isInteger(width) || !Number.isInteger(height) || width <= 0 || height <= 0) {
            throw new Error(`bad grid size ${width}x${height}`);
        }
        this.width = width;
        this.height = height;
        this.data = new Uint8Array(width * height).fill(fill);
    }

    static fromData(width: number, height: number, data: Uint8Array): MaskGrid {
        if (data.length !== width * height) {
            throw new Error(`data is ${data.length} cells, grid wants ${width}x${height}`);
        }
        const grid = new MaskGrid(width, height);
        grid.data.set(data);
        return grid;
    }

    contains(x: number, y: number): boolean {
        return x >= 0 && y >= 0 && x < this.width && y < this.height;
    }

    get(x: number, y: number): number {
        if (!this.contains(x, y)) {
            throw new Error(`cell (${x}, ${y}) outside ${this.width}x${this.height}`);
        }
        return this.data[y * this.width + x]!;
    }

    set(x: number, y: number, code: number): void {
        if (!this.contains(x, y)) {
            throw new Error(`cell (${x}, ${y}) outside ${this.width}x${this.height}`);
        }
        this.data[y * this.width + x] = code;
    }

    /**
     * Stamp a filled disc of `code`. Radius is in cells; a cell is
     * covered when its center lies within the radius, so radius 0
     * paints exactly the cell under the cursor. Returns true when at
     * least one cell changed.
     */
    paintDisc(cx: number, cy: number, radius: number, code: number): boolean {
        const r = Math.max(0, radius);
        const x0 = Math.max(0, Math.floor(cx - r));
        const x1 = Math.min(this.width - 1, Math.ceil(cx + r));
        const y0 = Math.max(0, Math.floor(cy - r));
        const y1 = Math.min(this.height - 1, Math.ceil(cy + r));
        const rsq = r * r;
        let changed = false;
        for (let y = y0; y <= y1; y++) {
            for (let x = x0; x <= x1; x++) {
                const dx = x - cx;
                const dy = y - cy;
                if (dx * dx + dy * dy <= rsq) {
                    const idx = y * this.width + x;
                    if (this.data[idx] !== code) {
                        this.data[idx] = code;
                        changed = true;
                    }
                }
            }
        }
        return changed;
    }

    /**
     * Recolor the 4-connected region of cells sharing the clicked
     * cell's code. A fill onto the same code is a no-op.
     */
    floodFill(x: number, y: number, code: number): boolean {
        const from = this.get(x, y);
        if (from === code) {
            return false;
        }
        const { width, height, data } = this;
        const stack = [y * width + x];
        data[stack[0]!] = code;
        while (stack.length > 0) {
            const idx = stack.pop()!;
            const cx = idx % width;
            const cy = (idx - cx) / width;
            if (cx > 0 && data[idx - 1] === from) {
                data[idx - 1] = code;
                stack.push(idx - 1);
            }
            if (cx < width - 1 && data[idx + 1] === from) {
                data[idx + 1] = code;
                stack.push(idx + 1);
            }
            if (cy > 0 && data[idx - width] === from) {
                data[idx - width] = code;
                stack.push(idx - width);
            }
            if (cy < height - 1 && data[idx + width] === from) {
                data[idx + width] = code;
                stack.push(idx + width);
            }
        }
        return true;
    }

    /** Cell count per class code present in the grid. */
    histogram(): Map<number, number> {
        const counts = new Map<number, number>();
        for (let i = 0; i < this.data.length; i++) {
            const code = this.data[i]!;
            counts.set(code, (counts.get(code) ?? 0) + 1);
        }
        return counts;
    }

    snapshot(): Uint8Array {
        return this.data.slice();
    }

    restore(snap: Uint8Array): void {
        if (snap.length !== this.data.length) {
            throw new Error(`snapshot is ${snap.length} cells, grid wants ${this.data.length}`);
        }
        this.data.set(snap);
    }

    equals(other: MaskGrid): boolean {
        if (other.width !== this.width || other.height !== this.height) {
            return false;
        }
        for (let i = 0; i < this.data.length; i++) {
            if (this.data[i] !== other.data[i]) {
                return false;
            }
        }
        return true;
    }
}
