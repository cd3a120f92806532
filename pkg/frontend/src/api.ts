/**
 * Typed client for the annotation review server.
 *
 * Submission conflicts (someone else bumped the task version) are part
 * of the normal workflow, so `submitMask` reports them as a value
 * instead of throwing; the same goes for the server rejecting a mask
 * payload. Real transport or server failures still throw ApiError.
 */

export interface TaskSummary {
    task_id: string;
    sample_id: string;
    view: string;
    status: string;
    annotator_id: string | null;
    version: number;
}

export interface FrameGrid {
    extent_m: number;
    size_px: number;
    cell_m: number;
}

export interface FramePayload {
    task_id: string;
    sample_id: string;
    view: string;
    grid: FrameGrid;
    base_png_b64: string;
    lidar_png_b64: string;
}

export type SubmitOutcome =
    | { kind: 'ok'; version: number; status: string }
    | { kind: 'conflict'; currentVersion: number; message: string }
    | { kind: 'rejected'; detail: string };

export interface FusionPayload {
    sample_id: string;
    void_fraction: number;
    versions: Record<string, number>;
    mask_png_b64: string;
}

export interface ReportPayload {
    sample_id: string;
    versions: Record<string, number>;
    void_fraction: number;
    per_class_iou: Record<string, number | null>;
    miou_all: number | null;
    miou_static: number | null;
    miou_dyn: number | null;
    ignored_fraction: number;
    undefined_classes: number[];
    accuracy: number | null;
}

export interface ExportResult {
    dir: string;
    exported: string[];
    mean_void_fraction: number | null;
}

export class ApiError extends Error {
    readonly status: number;

    constructor(status: number, message: string) {
        super(message);
        this.status = status;
    }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

function detailText(body: unknown): string {
    if (body && typeof body === 'object' && 'detail' in body) {
        const detail = (body as { detail: unknown }).detail;
        return typeof detail === 'string' ? detail : JSON.stringify(detail);
    }
    return JSON.stringify(body);
}

export class AnnoClient {
    readonly baseUrl: string;
    private readonly fetchImpl: FetchLike;

    constructor(baseUrl: string, fetchImpl?: FetchLike) {
        this.baseUrl = baseUrl.replace(/\/+$/, '');
        // bind so a bare global fetch keeps its expected receiver
        this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
    }

    private async getJson(path: string): Promise<unknown> {
        const res = await this.fetchImpl(this.baseUrl + path);
        const body: unknown = await res.json();
        if (!res.ok) {
            throw new ApiError(res.status, detailText(body));
        }
        return body;
    }

    async listTasks(): Promise<TaskSummary[]> {
        return (await this.getJson('/tasks')) as TaskSummary[];
    }

    async getFrame(taskId: string): Promise<FramePayload> {
        return (await this.getJson(`/tasks/${encodeURIComponent(taskId)}/frame`)) as FramePayload;
    }

    async submitMask(
        taskId: string,
        args: { annotatorId: string; expectedVersion: number; maskPngB64: string },
    ): Promise<SubmitOutcome> {
        const res = await this.fetchImpl(
            `${this.baseUrl}/tasks/${encodeURIComponent(taskId)}/mask`,
            {
                method: 'PUT',
                headers: { 'content-type': 'application/json' },
                body: JSON.stringify({
                    annotator_id: args.annotatorId,
                    expected_version: args.expectedVersion,
                    mask_png_b64: args.maskPngB64,
                }),
            },
        );
        const body: unknown = await res.json();
        if (res.ok) {
            const out = body as { version: number; status: string };
            return { kind: 'ok', version: out.version, status: out.status };
        }
        if (res.status === 409) {
            const detail = (body as { detail?: { message?: string; current_version?: number } }).detail ?? {};
            return {
                kind: 'conflict',
                currentVersion: detail.current_version ?? -1,
                message: detail.message ?? 'version conflict',
            };
        }
        if (res.status === 422) {
            return { kind: 'rejected', detail: detailText(body) };
        }
        throw new ApiError(res.status, detailText(body));
    }

    /** Null until both views of the sample are submitted. */
    async getFusion(sampleId: string): Promise<FusionPayload | null> {
        try {
            return (await this.getJson(`/samples/${encodeURIComponent(sampleId)}/fusion`)) as FusionPayload;
        } catch (err) {
            if (err instanceof ApiError && err.status === 404) {
                return null;
            }
            throw err;
        }
    }

    /** Null until both views of the sample are submitted. */
    async getReport(sampleId: string): Promise<ReportPayload | null> {
        try {
            return (await this.getJson(`/samples/${encodeURIComponent(sampleId)}/report`)) as ReportPayload;
        } catch (err) {
            if (err instanceof ApiError && err.status === 404) {
                return null;
            }
            throw err;
        }
    }

    async exportMasks(sampleIds?: string[]): Promise<ExportResult> {
        const res = await this.fetchImpl(`${this.baseUrl}/export`, {
            method: 'POST',
            headers: { 'content-type': 'application/json' },
            body: JSON.stringify({ sample_ids: sampleIds ?? null }),
        });
        const body: unknown = await res.json();
        if (!res.ok) {
            throw new ApiError(res.status, detailText(body));
        }
        return body as ExportResult;
    }
}
