/**
 * Minimal indexed-color PNG writer, plus a reader for its own output.
 *
 * The server wants uploads as 8-bit palette PNGs and checks every chunk
 * CRC, so the writer here produces the plainest stream that satisfies
 * that: one IHDR/PLTE/IDAT/IEND sequence, filter byte 0 on every row,
 * and the pixel data wrapped in stored (uncompressed) zlib blocks. A
 * 210x210 mask is ~45 KB on the wire, which is nothing, and skipping
 * real compression keeps the byte layout simple enough to verify by
 * hand in tests.
 *
 * The reader only accepts what the writer emits (depth 8, color type 3,
 * stored blocks, filter 0). Server-generated PNGs are decoded by the
 * browser's own codec, never by this module.
 */

export class PngError extends Error {
    readonly offset: number;

    constructor(message: string, offset: number) {
        super(`${message} (at byte ${offset})`);
        this.offset = offset;
    }
}

const PNG_SIG = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];

const CRC_TABLE = (() => {
    const table = new Uint32Array(256);
    for (let n = 0; n < 256; n++) {
        let c = n;
        for (let k = 0; k < 8; k++) {
            c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
        }
        table[n] = c >>> 0;
    }
    return table;
})();

export function crc32(bytes: Uint8Array): number {
    let c = 0xffffffff;
    for (let i = 0; i < bytes.length; i++) {
        c = CRC_TABLE[(c ^ bytes[i]) & 0xff]! ^ (c >>> 8);
    }
    return (c ^ 0xffffffff) >>> 0;
}

export function adler32(bytes: Uint8Array): number {
    let a = 1;
    let b = 0;
    for (let i = 0; i < bytes.length; i++) {
        a = (a + bytes[i]!) % 65521;
        b = (b + a) % 65521;
    }
    return (((b << 16) | a) >>> 0);
}

function chunk(type: string, body: Uint8Array): Uint8Array {
    const out = new Uint8Array(12 + body.length);
    const view = new DataView(out.buffer);
    view.setUint32(0, body.length);
    for (let i = 0; i < 4; i++) {
        out[4 + i] = type.charCodeAt(i);
    }
    out.set(body, 8);
    view.setUint32(8 + body.length, crc32(out.subarray(4, 8 + body.length)));
    return out;
}

/** Wrap raw bytes in a zlib stream of stored deflate blocks. */
function zlibStored(raw: Uint8Array): Uint8Array {
    const blocks = Math.max(1, Math.ceil(raw.length / 65535));
    const out = new Uint8Array(2 + blocks * 5 + raw.length + 4);
    out[0] = 0x78;
    out[1] = 0x01;
    let src = 0;
    let dst = 2;
    for (let i = 0; i < blocks; i++) {
        const len = Math.min(65535, raw.length - src);
        out[dst++] = i === blocks - 1 ? 1 : 0;
        out[dst++] = len & 0xff;
        out[dst++] = (len >>> 8) & 0xff;
        out[dst++] = ~len & 0xff;
        out[dst++] = (~len >>> 8) & 0xff;
        out.set(raw.subarray(src, src + len), dst);
        dst += len;
        src += len;
    }
    new DataView(out.buffer).setUint32(dst, adler32(raw));
    return out;
}

export interface IndexedPng {
    width: number;
    height: number;
    palette: Uint8Array;
    indices: Uint8Array;
}

export function encodeIndexedPng(
    indices: Uint8Array,
    width: number,
    height: number,
    palette: Uint8Array,
): Uint8Array {
    if (width <= 0 || height <= 0 || indices.length !== width * height) {
        throw new Error(`index buffer is ${indices.length} bytes, grid wants ${width}x${height}`);
    }
    if (palette.length !== 768) {
        throw new Error(`palette must be 768 bytes, got ${palette.length}`);
    }

    const ihdr = new Uint8Array(13);
    const view = new DataView(ihdr.buffer);
    view.setUint32(0, width);
    view.setUint32(4, height);
    ihdr[8] = 8; // bit depth
    ihdr[9] = 3; // indexed color
    // compression 0, filter 0, interlace 0 stay zero

    const filtered = new Uint8Array(height * (width + 1));
    for (let y = 0; y < height; y++) {
        // leading 0 = no per-row filtering
        filtered.set(indices.subarray(y * width, (y + 1) * width), y * (width + 1) + 1);
    }

    const parts = [
        new Uint8Array(PNG_SIG),
        chunk('IHDR', ihdr),
        chunk('PLTE', palette),
        chunk('IDAT', zlibStored(filtered)),
        chunk('IEND', new Uint8Array(0)),
    ];
    const total = parts.reduce((n, p) => n + p.length, 0);
    const out = new Uint8Array(total);
    let pos = 0;
    for (const part of parts) {
        out.set(part, pos);
        pos += part.length;
    }
    return out;
}

function inflateStored(stream: Uint8Array, offset: number): Uint8Array {
    if (stream.length < 2 || (stream[0]! & 0x0f) !== 8) {
        throw new PngError('not a zlib stream', offset);
    }
    const pieces: Uint8Array[] = [];
    let pos = 2;
    for (;;) {
        if (pos >= stream.length) {
            throw new PngError('zlib stream ends before a final block', offset + pos);
        }
        const header = stream[pos]!;
        if ((header & 0x06) !== 0) {
            throw new PngError('compressed deflate block; this reader only handles stored blocks', offset + pos);
        }
        const len = stream[pos + 1]! | (stream[pos + 2]! << 8);
        const nlen = stream[pos + 3]! | (stream[pos + 4]! << 8);
        if ((len ^ nlen) !== 0xffff) {
            throw new PngError('stored block length check failed', offset + pos + 1);
        }
        if (pos + 5 + len > stream.length) {
            throw new PngError('stored block runs past the stream', offset + pos + 1);
        }
        pieces.push(stream.subarray(pos + 5, pos + 5 + len));
        pos += 5 + len;
        if (header & 1) {
            break;
        }
    }
    if (pos + 4 > stream.length) {
        throw new PngError('zlib stream missing its checksum', offset + pos);
    }
    const total = pieces.reduce((n, p) => n + p.length, 0);
    const raw = new Uint8Array(total);
    let at = 0;
    for (const piece of pieces) {
        raw.set(piece, at);
        at += piece.length;
    }
    const stored = new DataView(stream.buffer, stream.byteOffset + pos, 4).getUint32(0);
    if (stored !== adler32(raw)) {
        throw new PngError('zlib checksum mismatch', offset + pos);
    }
    return raw;
}

export function decodeIndexedPng(buf: Uint8Array): IndexedPng {
    for (let i = 0; i < 8; i++) {
        if (buf[i] !== PNG_SIG[i]) {
            throw new PngError('bad PNG signature', 0);
        }
    }
    let pos = 8;
    let ihdr: Uint8Array | null = null;
    let palette: Uint8Array | null = null;
    const idats: { data: Uint8Array; offset: number }[] = [];
    let sawEnd = false;
    while (!sawEnd) {
        if (pos + 8 > buf.length) {
            throw new PngError('file ends inside a chunk header', pos);
        }
        const view = new DataView(buf.buffer, buf.byteOffset + pos);
        const length = view.getUint32(0);
        const type = String.fromCharCode(buf[pos + 4]!, buf[pos + 5]!, buf[pos + 6]!, buf[pos + 7]!);
        const end = pos + 8 + length;
        if (end + 4 > buf.length) {
            throw new PngError(`file ends inside chunk ${type}`, pos);
        }
        const stored = new DataView(buf.buffer, buf.byteOffset + end).getUint32(0);
        if (crc32(buf.subarray(pos + 4, end)) !== stored) {
            throw new PngError(`chunk ${type} checksum mismatch`, end);
        }
        const body = buf.subarray(pos + 8, end);
        if (type === 'IHDR') {
            ihdr = body;
        } else if (type === 'PLTE') {
            palette = body;
        } else if (type === 'IDAT') {
            idats.push({ data: body, offset: pos + 8 });
        } else if (type === 'IEND') {
            sawEnd = true;
        }
        pos = end + 4;
    }
    if (pos !== buf.length) {
        throw new PngError(`${buf.length - pos} trailing bytes after IEND`, pos);
    }
    if (ihdr === null || ihdr.length !== 13) {
        throw new PngError('missing or malformed IHDR', 8);
    }
    const head = new DataView(ihdr.buffer, ihdr.byteOffset);
    const width = head.getUint32(0);
    const height = head.getUint32(4);
    if (ihdr[8] !== 8 || ihdr[9] !== 3) {
        throw new PngError(`this reader wants 8-bit indexed PNGs, got depth ${ihdr[8]} type ${ihdr[9]}`, 8);
    }
    if (ihdr[12] !== 0) {
        throw new PngError('interlaced PNGs are not supported', 8);
    }
    if (palette === null) {
        throw new PngError('indexed PNG without a PLTE chunk', 8);
    }
    if (idats.length !== 1) {
        // the writer emits exactly one; more would need concatenation
        throw new PngError(`expected one IDAT chunk, found ${idats.length}`, 8);
    }

    const filtered = inflateStored(idats[0]!.data, idats[0]!.offset);
    if (filtered.length !== height * (width + 1)) {
        throw new PngError(`pixel data is ${filtered.length} bytes, grid wants ${height * (width + 1)}`, 8);
    }
    const indices = new Uint8Array(width * height);
    for (let y = 0; y < height; y++) {
        const row = y * (width + 1);
        if (filtered[row] !== 0) {
            throw new PngError(`row ${y} uses filter ${filtered[row]}; this reader only handles filter 0`, 8);
        }
        indices.set(filtered.subarray(row + 1, row + 1 + width), y * width);
    }

    const pal = new Uint8Array(768);
    pal.set(palette.subarray(0, Math.min(768, palette.length)));
    return { width, height, palette: pal, indices };
}

export function bytesToBase64(bytes: Uint8Array): string {
    let bin = '';
    const step = 0x8000;
    for (let i = 0; i < bytes.length; i += step) {
        bin += String.fromCharCode(...bytes.subarray(i, Math.min(i + step, bytes.length)));
    }
    return btoa(bin);
}

export function base64ToBytes(text: string): Uint8Array {
    const bin = atob(text);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) {
        out[i] = bin.charCodeAt(i);
    }
    return out;
}
