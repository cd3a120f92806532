/**
 * Page wiring: connect to the server, pick a sample, paint both views
 * side by side, submit, and watch the strict-agreement fusion react.
 *
 * Rendering rule: every canvas backing store is exactly the grid size
 * and scaling happens only through CSS with image-rendering: pixelated,
 * so one painted cell is one grid cell and the uploaded mask is the
 * rendered mask, byte for byte.
 */

import { AnnoClient, FramePayload, TaskSummary } from './api.js';
import { classByCode, classByHotkey, PAINTABLE, VOID } from './classes.js';
import { BrushState, ViewSession } from './editor.js';
import { base64ToBytes } from './png.js';

const VIEWS = ['recon_a', 'recon_b'] as const;
type ViewName = (typeof VIEWS)[number];

interface ViewPane {
    session: ViewSession;
    frame: FramePayload;
    maskCanvas: HTMLCanvasElement;
    lidarCanvas: HTMLCanvasElement;
    versionLabel: HTMLElement;
    histogramLabel: HTMLElement;
    conflictBox: HTMLElement;
    conflictText: HTMLElement;
    submitButton: HTMLButtonElement;
}

const state = {
    client: null as AnnoClient | null,
    tasksBySample: new Map<string, Map<string, TaskSummary>>(),
    panes: new Map<ViewName, ViewPane>(),
    brush: { tool: 'paint', classCode: 0, radiusPx: 2 } as BrushState,
    hotView: 'recon_a' as ViewName,
    lastVoidFraction: null as number | null,
    pointerDown: false,
};

function byId<T extends HTMLElement>(id: string): T {
    const el = document.getElementById(id);
    if (el === null) {
        throw new Error(`page is missing #${id}`);
    }
    return el as T;
}

function setStatus(text: string, isError = false): void {
    const bar = byId('status');
    bar.textContent = text;
    bar.classList.toggle('error', isError);
}

// ---------------------------------------------------------------- painting

function renderMask(pane: ViewPane): void {
    const { mask } = pane.session;
    const ctx = pane.maskCanvas.getContext('2d')!;
    const img = ctx.createImageData(mask.width, mask.height);
    for (let i = 0; i < mask.data.length; i++) {
        const code = mask.data[i]!;
        if (code === VOID) {
            continue; // transparent, the base frame shows through
        }
        const entry = classByCode(code);
        if (entry === undefined) {
            continue;
        }
        img.data[i * 4] = entry.color[0];
        img.data[i * 4 + 1] = entry.color[1];
        img.data[i * 4 + 2] = entry.color[2];
        img.data[i * 4 + 3] = 170;
    }
    ctx.putImageData(img, 0, 0);
    renderHistogram(pane);
}

function renderHistogram(pane: ViewPane): void {
    const counts = pane.session.mask.histogram();
    const parts: string[] = [];
    for (const entry of PAINTABLE) {
        const n = counts.get(entry.code) ?? 0;
        if (n > 0) {
            parts.push(`${entry.name} ${n}`);
        }
    }
    pane.histogramLabel.textContent = parts.join('  ');
    const dirty = pane.session.dirty ? ' *' : '';
    pane.versionLabel.textContent = `v${pane.session.knownVersion}${dirty}`;
}

function cellCoords(pane: ViewPane, ev: PointerEvent): { x: number; y: number } {
    const rect = pane.maskCanvas.getBoundingClientRect();
    const size = pane.session.mask.width;
    return {
        x: ((ev.clientX - rect.left) / rect.width) * size - 0.5,
        y: ((ev.clientY - rect.top) / rect.height) * size - 0.5,
    };
}

function attachPainting(view: ViewName, surface: HTMLElement): void {
    surface.addEventListener('pointerdown', (ev) => {
        const pane = state.panes.get(view);
        if (pane === undefined) {
            return;
        }
        state.hotView = view;
        state.pointerDown = true;
        surface.setPointerCapture(ev.pointerId);
        const { x, y } = cellCoords(pane, ev);
        pane.session.beginStroke();
        pane.session.applyAt(x, y, state.brush);
        if (state.brush.tool === 'fill') {
            // fill is a click tool, close the stroke immediately
            pane.session.endStroke();
            state.pointerDown = false;
        }
        renderMask(pane);
    });
    surface.addEventListener('pointermove', (ev) => {
        if (!state.pointerDown) {
            return;
        }
        const pane = state.panes.get(view);
        if (pane === undefined || state.brush.tool === 'fill') {
            return;
        }
        const { x, y } = cellCoords(pane, ev);
        pane.session.applyAt(x, y, state.brush);
        renderMask(pane);
    });
    const finish = () => {
        const pane = state.panes.get(view);
        if (pane !== undefined && state.pointerDown) {
            pane.session.endStroke();
            renderMask(pane);
        }
        state.pointerDown = false;
    };
    surface.addEventListener('pointerup', finish);
    surface.addEventListener('pointercancel', finish);
    surface.addEventListener('pointerenter', () => {
        state.hotView = view;
    });
}

// ------------------------------------------------------------------ panes

async function drawBase(pane: ViewPane, canvas: HTMLCanvasElement, pngB64: string): Promise<void> {
    const blob = new Blob([base64ToBytes(pngB64) as BlobPart], { type: 'image/png' });
    const bitmap = await createImageBitmap(blob);
    const ctx = canvas.getContext('2d')!;
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(bitmap, 0, 0);
    bitmap.close();
}

function buildPane(view: ViewName, host: HTMLElement, frame: FramePayload, task: TaskSummary): ViewPane {
    host.textContent = '';
    const size = frame.grid.size_px;
    const scale = Math.max(1, Math.floor(640 / size));

    const title = document.createElement('div');
    title.className = 'pane-title';
    const name = document.createElement('span');
    name.textContent = view;
    const versionLabel = document.createElement('span');
    versionLabel.className = 'version';
    title.append(name, versionLabel);

    const stack = document.createElement('div');
    stack.className = 'stack';
    stack.style.width = `${size * scale}px`;
    stack.style.height = `${size * scale}px`;

    const mkCanvas = (cls: string) => {
        const canvas = document.createElement('canvas');
        canvas.width = size;
        canvas.height = size;
        canvas.className = `layer ${cls}`;
        stack.append(canvas);
        return canvas;
    };
    const baseCanvas = mkCanvas('base');
    const lidarCanvas = mkCanvas('lidar');
    const maskCanvas = mkCanvas('mask');

    const conflictBox = document.createElement('div');
    conflictBox.className = 'conflict hidden';
    const conflictText = document.createElement('div');
    const overwriteBtn = document.createElement('button');
    overwriteBtn.textContent = 'submit mine over theirs';
    const keepBtn = document.createElement('button');
    keepBtn.textContent = 'keep editing';
    conflictBox.append(conflictText, overwriteBtn, keepBtn);

    const histogramLabel = document.createElement('div');
    histogramLabel.className = 'histogram';

    const submitButton = document.createElement('button');
    submitButton.textContent = `submit ${view}`;
    submitButton.className = 'submit';

    host.append(title, stack, conflictBox, histogramLabel, submitButton);

    const session = new ViewSession(task.task_id, view, size, task.version);
    const pane: ViewPane = {
        session,
        frame,
        maskCanvas,
        lidarCanvas,
        versionLabel,
        histogramLabel,
        conflictBox,
        conflictText,
        submitButton,
    };

    void drawBase(pane, baseCanvas, frame.base_png_b64);
    void drawBase(pane, lidarCanvas, frame.lidar_png_b64);
    lidarCanvas.style.visibility = (byId<HTMLInputElement>('lidar-toggle')).checked
        ? 'visible'
        : 'hidden';

    attachPainting(view, stack);
    submitButton.addEventListener('click', () => void submitView(view));
    overwriteBtn.addEventListener('click', () => {
        pane.session.adoptServerVersion();
        pane.conflictBox.classList.add('hidden');
        void submitView(view);
    });
    keepBtn.addEventListener('click', () => {
        pane.session.dismissConflict();
        pane.conflictBox.classList.add('hidden');
    });

    renderMask(pane);
    return pane;
}

async function loadSample(sampleId: string): Promise<void> {
    const client = state.client;
    const tasks = state.tasksBySample.get(sampleId);
    if (client === null || tasks === undefined) {
        return;
    }
    state.panes.clear();
    state.lastVoidFraction = null;
    for (const view of VIEWS) {
        const task = tasks.get(view);
        if (task === undefined) {
            setStatus(`sample ${sampleId} has no ${view} task`, true);
            return;
        }
        const frame = await client.getFrame(task.task_id);
        const pane = buildPane(view, byId(`pane-${view}`), frame, task);
        state.panes.set(view, pane);
    }
    byId('fusion-body').textContent = 'submit both views to see the fusion';
    byId<HTMLImageElement>('fusion-img').removeAttribute('src');
    setStatus(`editing ${sampleId}`);
    await refreshFusion();
}

// ---------------------------------------------------------------- actions

async function submitView(view: ViewName): Promise<void> {
    const pane = state.panes.get(view);
    const client = state.client;
    if (pane === undefined || client === null) {
        return;
    }
    const annotator = byId<HTMLInputElement>('annotator').value.trim() || 'anonymous';
    pane.submitButton.disabled = true;
    try {
        const outcome = await pane.session.submit(client, annotator);
        if (outcome.kind === 'ok') {
            setStatus(`${view} accepted at version ${outcome.version}`);
            await refreshFusion();
        } else if (outcome.kind === 'conflict') {
            pane.conflictText.textContent =
                `${outcome.message}; server is at v${outcome.currentVersion}, ` +
                'your canvas is untouched';
            pane.conflictBox.classList.remove('hidden');
            setStatus(`${view}: version conflict`, true);
        } else {
            setStatus(`${view}: server rejected the mask: ${outcome.detail}`, true);
        }
    } catch (err) {
        setStatus(`${view}: ${String(err)}`, true);
    } finally {
        pane.submitButton.disabled = false;
        renderHistogram(pane);
    }
}

async function refreshFusion(): Promise<void> {
    const client = state.client;
    const first = state.panes.get('recon_a');
    if (client === null || first === undefined) {
        return;
    }
    const sampleId = first.frame.sample_id;
    const fusion = await client.getFusion(sampleId);
    if (fusion === null) {
        return;
    }
    const size = first.session.mask.width;
    const voidCells = Math.round(fusion.void_fraction * size * size);
    const delta =
        state.lastVoidFraction === null
            ? ''
            : ` (${fusion.void_fraction >= state.lastVoidFraction ? '+' : ''}${(
                  (fusion.void_fraction - state.lastVoidFraction) * 100
              ).toFixed(2)} pp)`;
    state.lastVoidFraction = fusion.void_fraction;

    const img = byId<HTMLImageElement>('fusion-img');
    img.src = `data:image/png;base64,${fusion.mask_png_b64}`;
    img.style.width = first.maskCanvas.getBoundingClientRect().width + 'px';

    const lines = [
        `void fraction ${(fusion.void_fraction * 100).toFixed(2)}%${delta}`,
        `void cells ${voidCells} of ${size * size}`,
        `versions ${VIEWS.map((v) => `${v} v${fusion.versions[v]}`).join(', ')}`,
    ];
    const report = await client.getReport(sampleId);
    if (report !== null) {
        const per = Object.entries(report.per_class_iou)
            .map(([code, iou]) => {
                const entry = classByCode(Number(code));
                const label = entry === undefined ? code : entry.name;
                return `${label} ${iou === null ? 'n/a' : iou.toFixed(3)}`;
            })
            .join('  ');
        lines.push(`IoU vs pipeline labels: ${per}`);
        lines.push(
            `mIoU ${report.miou_all === null ? 'n/a' : report.miou_all.toFixed(3)}, ` +
                `accuracy ${report.accuracy === null ? 'n/a' : report.accuracy.toFixed(3)}`,
        );
    }
    byId('fusion-body').textContent = lines.join('\n');
}

async function connect(): Promise<void> {
    const url = byId<HTMLInputElement>('server-url').value.trim();
    try {
        window.localStorage.setItem('annoui.server', url);
    } catch {
        // storage may be unavailable over file origins; not important
    }
    const client = new AnnoClient(url);
    let tasks: TaskSummary[];
    try {
        tasks = await client.listTasks();
    } catch (err) {
        setStatus(`cannot reach server: ${String(err)}`, true);
        return;
    }
    state.client = client;
    state.tasksBySample.clear();
    for (const task of tasks) {
        let group = state.tasksBySample.get(task.sample_id);
        if (group === undefined) {
            group = new Map();
            state.tasksBySample.set(task.sample_id, group);
        }
        group.set(task.view, task);
    }
    const select = byId<HTMLSelectElement>('sample-select');
    select.textContent = '';
    for (const sampleId of state.tasksBySample.keys()) {
        const option = document.createElement('option');
        option.value = sampleId;
        option.textContent = sampleId;
        select.append(option);
    }
    select.disabled = false;
    setStatus(`${state.tasksBySample.size} samples on the batch`);
    if (select.value !== '') {
        await loadSample(select.value);
    }
}

// ----------------------------------------------------------------- toolbar

function rebuildPalette(): void {
    const host = byId('palette');
    host.textContent = '';
    for (const entry of PAINTABLE) {
        const btn = document.createElement('button');
        btn.className = 'swatch';
        btn.style.setProperty('--swatch', `rgb(${entry.color.join(',')})`);
        btn.textContent = `${entry.hotkey} ${entry.name}`;
        btn.classList.toggle('active', state.brush.classCode === entry.code);
        btn.addEventListener('click', () => {
            state.brush.classCode = entry.code;
            rebuildPalette();
        });
        host.append(btn);
    }
}

function bindToolbar(): void {
    for (const tool of ['paint', 'fill', 'erase'] as const) {
        const btn = byId<HTMLButtonElement>(`tool-${tool}`);
        btn.addEventListener('click', () => {
            state.brush.tool = tool;
            for (const other of ['paint', 'fill', 'erase']) {
                byId(`tool-${other}`).classList.toggle('active', other === tool);
            }
        });
    }
    const radius = byId<HTMLInputElement>('brush-radius');
    radius.addEventListener('input', () => {
        state.brush.radiusPx = Number(radius.value);
        byId('radius-label').textContent = `${radius.value} px`;
    });
    byId<HTMLInputElement>('lidar-toggle').addEventListener('change', (ev) => {
        const on = (ev.target as HTMLInputElement).checked;
        for (const pane of state.panes.values()) {
            pane.lidarCanvas.style.visibility = on ? 'visible' : 'hidden';
        }
    });
    byId('undo-btn').addEventListener('click', () => {
        const pane = state.panes.get(state.hotView);
        if (pane !== undefined && pane.session.undo()) {
            renderMask(pane);
        }
    });
    byId('redo-btn').addEventListener('click', () => {
        const pane = state.panes.get(state.hotView);
        if (pane !== undefined && pane.session.redo()) {
            renderMask(pane);
        }
    });
    byId('export-btn').addEventListener('click', () => {
        const client = state.client;
        if (client === null) {
            return;
        }
        client
            .exportMasks()
            .then((res) => setStatus(`exported ${res.exported.length} sample(s) to ${res.dir}`))
            .catch((err) => setStatus(String(err), true));
    });
}

function bindKeyboard(): void {
    window.addEventListener('keydown', (ev) => {
        if (ev.target instanceof HTMLInputElement || ev.target instanceof HTMLSelectElement) {
            return;
        }
        if ((ev.ctrlKey || ev.metaKey) && ev.key.toLowerCase() === 'z') {
            const pane = state.panes.get(state.hotView);
            if (pane !== undefined) {
                const moved = ev.shiftKey ? pane.session.redo() : pane.session.undo();
                if (moved) {
                    renderMask(pane);
                }
            }
            ev.preventDefault();
            return;
        }
        if ((ev.ctrlKey || ev.metaKey) && ev.key.toLowerCase() === 'y') {
            const pane = state.panes.get(state.hotView);
            if (pane !== undefined && pane.session.redo()) {
                renderMask(pane);
            }
            ev.preventDefault();
            return;
        }
        const entry = classByHotkey(ev.key);
        if (entry !== undefined) {
            state.brush.classCode = entry.code;
            rebuildPalette();
        }
    });
}

function init(): void {
    let saved: string | null = null;
    try {
        saved = window.localStorage.getItem('annoui.server');
    } catch {
        saved = null;
    }
    byId<HTMLInputElement>('server-url').value = saved ?? 'http://127.0.0.1:8000';
    byId('connect-btn').addEventListener('click', () => void connect());
    byId<HTMLSelectElement>('sample-select').addEventListener('change', (ev) =>
        void loadSample((ev.target as HTMLSelectElement).value),
    );
    rebuildPalette();
    bindToolbar();
    bindKeyboard();
    setStatus('not connected');
}

init();
