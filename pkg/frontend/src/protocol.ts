// Session-protocol client. The UI is a thin client: every pose, projection,
// match verdict and estimate comes from the service; nothing is computed here.

export interface PoseDict {
    xr: number
    yr: number
    zr: number
    xt: number
    yt: number
    zt: number
}

export interface ComponentMatch {
    delta: number
    tolerance: number
    ok: boolean
}

export interface MatchReport {
    matched: boolean
    components: Record<string, ComponentMatch>
}

export interface Projection {
    outline: number[][]
    corners: number[][]
}

export interface Instruction {
    kind: string
    axis: string
    amount: number[]
    direction: string
    text: string
}

export interface GuidanceStep {
    pose: PoseDict
    outline: number[][]
    corners: number[][]
    instruction: Instruction
}

export interface GuidancePayload {
    target: PoseDict
    steps: GuidanceStep[]
}

export interface EstimateState {
    params: Record<string, number>
    variances: number[]
    rms: number
}

export interface ConvergenceInfo {
    threshold: number
    flags: boolean[]
    ratios: number[] | null
}

export interface SessionState {
    phase: "startup" | "collecting" | "converged"
    frame_count: number
    estimate: EstimateState | null
    convergence: ConvergenceInfo
    z: number | null
    stats: Record<string, number>
    startup_target: PoseDict
    image_size: [number, number]
    frame_cap: number
}

export interface PoseResponse {
    match: MatchReport
    visible: boolean
    projection: Projection | null
}

export interface CaptureResponse {
    accepted: boolean
    reason?: string
    report?: MatchReport
    state: SessionState
}

interface Envelope<T> {
    ok: boolean
    result?: T
    error?: { type: string; message: string }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>

export class ProtocolError extends Error {}

export class SessionClient {
    readonly base: string
    sessionId: string | null = null
    guidanceFetches = 0
    private readonly fetchImpl: FetchLike

    constructor(base: string, fetchImpl?: FetchLike) {
        this.base = base.replace(/\/$/, "")
        this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init))
    }

    private async post<T>(path: string, payload: unknown): Promise<T> {
        const resp = await this.fetchImpl(this.base + path, {
            method: "POST",
            headers: { "Content-Type": "application/json" },
            body: JSON.stringify(payload),
        })
        const body = (await resp.json()) as Envelope<T>
        if (!body.ok || body.result === undefined) {
            throw new ProtocolError(body.error ? `${body.error.type}: ${body.error.message}` : `HTTP ${resp.status}`)
        }
        return body.result
    }

    async open(seed?: number): Promise<string> {
        const result = await this.post<{ session_id: string }>("/session", seed === undefined ? {} : { seed })
        this.sessionId = result.session_id
        return this.sessionId
    }

    private cmd<T>(command: string, extra: Record<string, unknown> = {}): Promise<T> {
        if (!this.sessionId) {
            return Promise.reject(new ProtocolError("no session open"))
        }
        return this.post<T>(`/session/${this.sessionId}`, { cmd: command, ...extra })
    }

    getState(): Promise<SessionState> {
        return this.cmd<SessionState>("get_state")
    }

    // Counted so the lazy-loading contract (one fetch per target) is checkable.
    getGuidance(): Promise<GuidancePayload> {
        this.guidanceFetches += 1
        return this.cmd<GuidancePayload>("get_guidance")
    }

    setVirtualPose(pose: PoseDict): Promise<PoseResponse> {
        return this.cmd<PoseResponse>("set_virtual_pose", { pose })
    }

    capture(): Promise<CaptureResponse> {
        return this.cmd<CaptureResponse>("capture")
    }

    skipTarget(): Promise<{ state: SessionState }> {
        return this.cmd<{ state: SessionState }>("skip_target")
    }

    reset(): Promise<{ state: SessionState }> {
        return this.cmd<{ state: SessionState }>("reset")
    }

    configure(options: Record<string, unknown>): Promise<{ state: SessionState }> {
        return this.cmd<{ state: SessionState }>("configure", options)
    }
}
