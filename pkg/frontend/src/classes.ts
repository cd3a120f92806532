/**
 * The annotation taxonomy and its display palette.
 *
 * Codes and colors mirror the server's semantics PNGs byte for byte so a
 * mask painted here and a mask exported by the pipeline look identical in
 * any external viewer. Tree (254) appears in the palette because fused
 * masks coming back from the server can carry it, but it is not paintable
 * and the server rejects it in uploads.
 */

export const VOID = 255;
export const TREE = 254;

export interface ClassEntry {
    code: number;
    name: string;
    color: [number, number, number];
    hotkey: string;
}

export const PAINTABLE: readonly ClassEntry[] = [
    { code: 0, name: 'road', color: [92, 94, 98], hotkey: '0' },
    { code: 1, name: 'sidewalk', color: [168, 162, 148], hotkey: '1' },
    { code: 2, name: 'building', color: [146, 104, 82], hotkey: '2' },
    { code: 3, name: 'vehicle', color: [62, 88, 156], hotkey: '3' },
    { code: 4, name: 'vru', color: [198, 64, 58], hotkey: '4' },
    { code: VOID, name: 'void', color: [255, 0, 255], hotkey: 'v' },
];

const TREE_COLOR: [number, number, number] = [58, 128, 64];

export function classByHotkey(key: string): ClassEntry | undefined {
    return PAINTABLE.find((c) => c.hotkey === key.toLowerCase());
}

export function classByCode(code: number): ClassEntry | undefined {
    if (code === TREE) {
        return { code: TREE, name: 'tree', color: TREE_COLOR, hotkey: '' };
    }
    return PAINTABLE.find((c) => c.code === code);
}

/** 256-entry RGB palette (768 bytes), black where no class is defined. */
export function paletteBytes(): Uint8Array {
    const pal = new Uint8Array(768);
    for (const entry of PAINTABLE) {
        pal.set(entry.color, entry.code * 3);
    }
    pal.set(TREE_COLOR, TREE * 3);
    return pal;
}
