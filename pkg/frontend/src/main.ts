// Virtual calibration lab. Steer a simulated board with sliders/keyboard,
// follow the four decomposition steps to each suggested pose, capture, and
// watch the estimate converge. Thin client: all math lives in the service.

import type {
    GuidancePayload,
    MatchReport,
    PoseDict,
    Projection,
    SessionState,
} from "./protocol.js"
import { ProtocolError, SessionClient } from "./protocol.js"
import { activeStep, applySteer, captureEnabled, offScript, STEP_COMPONENTS, STEP_LABELS } from "./steps.js"
import { drawScene } from "./render.js"

const AXES: (keyof PoseDict)[] = ["xr", "yr", "zr", "xt", "yt", "zt"]
const FINE = { rot: 1, trans: 1 }
const COARSE = { rot: 5, trans: 10 }

const PARAM_NAMES = ["alpha", "beta", "u0", "v0", "k1", "k2", "k3", "p1", "p2"]

function el<T extends HTMLElement>(id: string): T {
    const node = document.getElementById(id)
    if (!node) throw new Error(`missing element #${id}`)
    return node as T
}

class LabApp {
    private client: SessionClient | null = null
    private state: SessionState | null = null
    private guidance: GuidancePayload | null = null
    private report: MatchReport | null = null
    private projection: Projection | null = null
    private boardVisible = false
    private pose: PoseDict = { xr: 0, yr: 0, zr: 0, xt: 0, yt: 0, zt: 1200 }
    private sendQueue: Promise<void> = Promise.resolve()
    private pendingPose: PoseDict | null = null

    private readonly canvas = el<HTMLCanvasElement>("scene")
    private readonly ctx = this.canvas.getContext("2d")!

    connect = async () => {
        const base = (el<HTMLInputElement>("server-url")).value
        const seed = parseInt((el<HTMLInputElement>("seed")).value, 10) || 0
        this.client = new SessionClient(base)
        try {
            await this.client.open(seed)
            this.state = await this.client.getState()
        } catch (err) {
            this.banner(`connection failed: ${err}`)
            this.client = null
            return
        }
        this.banner("")
        this.pose = { ...this.state.startup_target, xr: 0, yr: 0, zr: 0 }
        this.syncSliders()
        await this.pushPose()
        this.refreshUi()
    }

    private banner(text: string) {
        const bar = el<HTMLDivElement>("banner")
        bar.textContent = text
        bar.style.display = text ? "block" : "none"
        for (const id of ["capture", "skip", "reset"]) {
            el<HTMLButtonElement>(id).disabled = !!text && id !== "reset"
        }
    }

    /** Serialize pose updates; only the latest queued pose is sent. */
    private pushPose(): Promise<void> {
        this.pendingPose = { ...this.pose }
        this.sendQueue = this.sendQueue.then(async () => {
            if (!this.client || !this.pendingPose) return
            const pose = this.pendingPose
            this.pendingPose = null
            try {
                const resp = await this.client.setVirtualPose(pose)
                this.report = resp.match
                this.projection = resp.projection
                this.boardVisible = resp.visible
                this.banner("")
            } catch (err) {
                if (err instanceof ProtocolError) {
                    this.banner(String(err.message))
                } else {
                    this.banner("connection lost")
                }
            }
            this.refreshUi()
        })
        return this.sendQueue
    }

    steer(axis: keyof PoseDict, delta: number) {
        const { pose, clamped } = applySteer(this.pose, axis, delta)
        this.pose = pose
        this.syncSliders()
        if (clamped) {
            this.flashNote(`${axis} clamped to the ±70° search box`)
        } else if (this.report && offScript(this.report, axis)) {
            this.flashNote(`steering ${axis} is off the current step`)
        }
        void this.pushPose()
    }

    setAxis(axis: keyof PoseDict, value: number) {
        const { pose } = applySteer(this.pose, axis, value - this.pose[axis])
        this.pose = pose
        void this.pushPose()
    }

    private flashNote(text: string) {
        const note = el<HTMLDivElement>("note")
        note.textContent = text
        note.style.opacity = "1"
        setTimeout(() => (note.style.opacity = "0"), 1500)
    }

    capture = async () => {
        if (!this.client) return
        try {
            const result = await this.client.capture()
            this.state = result.state
            if (result.accepted) {
                this.guidance = null // new target: fetch once when needed
                await this.loadGuidance()
            } else {
                this.flashNote(`capture rejected: ${result.reason ?? "no reason"}`)
            }
        } catch (err) {
            this.banner(`capture failed: ${err}`)
        }
        this.refreshUi()
    }

    skip = async () => {
        if (!this.client) return
        try {
            await this.client.skipTarget()
            this.guidance = null
            await this.loadGuidance()
        } catch (err) {
            this.flashNote(`skip failed: ${err}`)
        }
        this.refreshUi()
    }

    reset = async () => {
        if (!this.client) return
        await this.client.reset()
        this.state = await this.client.getState()
        this.guidance = null
        this.report = null
        this.pose = { ...this.state.startup_target, xr: 0, yr: 0, zr: 0 }
        this.syncSliders()
        await this.pushPose()
        this.refreshUi()
    }

    /** One guidance fetch per target: cached until the next capture/skip. */
    private async loadGuidance() {
        if (!this.client || !this.state) return
        if (this.state.phase !== "collecting" || this.guidance) return
        try {
            this.guidance = await this.client.getGuidance()
        } catch (err) {
            this.flashNote(`guidance unavailable: ${err}`)
        }
    }

    private syncSliders() {
        for (const axis of AXES) {
            el<HTMLInputElement>(`slider-${axis}`).value = String(this.pose[axis])
            el<HTMLInputElement>(`num-${axis}`).value = this.pose[axis].toFixed(1)
        }
    }

    private refreshUi() {
        const state = this.state
        el<HTMLSpanElement>("phase").textContent = state ? state.phase : "disconnected"
        el<HTMLSpanElement>("frames").textContent = state
            ? `${state.frame_count}/${state.frame_cap}` : "-"

        const report = this.report
        const active = report ? activeStep(report) : 0
        const strip = el<HTMLDivElement>("steps")
        strip.querySelectorAll(".step").forEach((node, i) => {
            node.classList.toggle("active", i === active && state?.phase !== "converged")
            node.classList.toggle("done", !!report && i < active)
        })

        const instruction = el<HTMLDivElement>("instruction")
        if (state?.phase === "startup") {
            instruction.textContent =
                "move the board back until fully visible at the 45° start tilt, then capture"
        } else if (state?.phase === "converged") {
            instruction.textContent = "converged — parameters below"
        } else if (this.guidance) {
            instruction.textContent = this.guidance.steps[active].instruction.text
        } else if (state) {
            void this.loadGuidance().then(() => this.refreshUi())
            instruction.textContent = "fetching guidance..."
        }

        const badges = el<HTMLDivElement>("badges")
        badges.innerHTML = ""
        if (report) {
            for (const axis of AXES) {
                const comp = report.components[axis]
                const badge = document.createElement("span")
                badge.className = "badge " + (comp?.ok ? "ok" : "bad")
                badge.textContent = `${axis} ${comp ? comp.delta.toFixed(1) : "?"}`
                badges.appendChild(badge)
            }
        }

        el<HTMLButtonElement>("capture").disabled =
            !state || state.phase === "converged" ||
            (state.phase === "collecting" && !(report && captureEnabled(report))) ||
            (state.phase === "startup" && !this.boardVisible)
        el<HTMLButtonElement>("skip").disabled = !state || state.phase !== "collecting"

        const table = el<HTMLTableSectionElement>("params")
        table.innerHTML = ""
        if (state?.estimate) {
            PARAM_NAMES.forEach((name, i) => {
                const row = table.insertRow()
                row.insertCell().textContent = name
                row.insertCell().textContent = state.estimate!.params[name].toPrecision(6)
                row.insertCell().textContent = state.estimate!.variances[i].toExponential(2)
                const flag = row.insertCell()
                flag.textContent = state.convergence.flags[i] ? "converged" : "-"
            })
            el<HTMLSpanElement>("rms").textContent = state.estimate.rms.toFixed(4)
        }

        const step = state?.phase === "collecting" && this.guidance ? this.guidance.steps[active] : null
        drawScene(this.ctx, {
            imageWidth: state?.image_size[0] ?? 1280,
            imageHeight: state?.image_size[1] ?? 720,
            current: this.projection,
            targetStep: step,
            boardVisible: this.boardVisible,
        })
    }

    bind() {
        el<HTMLButtonElement>("connect").addEventListener("click", () => void this.connect())
        el<HTMLButtonElement>("capture").addEventListener("click", () => void this.capture())
        el<HTMLButtonElement>("skip").addEventListener("click", () => void this.skip())
        el<HTMLButtonElement>("reset").addEventListener("click", () => void this.reset())

        for (const axis of AXES) {
            const slider = el<HTMLInputElement>(`slider-${axis}`)
            slider.addEventListener("input", () => this.setAxis(axis, parseFloat(slider.value)))
            const num = el<HTMLInputElement>(`num-${axis}`)
            num.addEventListener("change", () => this.setAxis(axis, parseFloat(num.value)))
        }

        window.addEventListener("keydown", (ev) => {
            const fine = !ev.shiftKey
            const rot = fine ? FINE.rot : COARSE.rot
            const trans = fine ? FINE.trans : COARSE.trans
            const moves: Record<string, [keyof PoseDict, number]> = {
                ArrowLeft: ["yr", -rot],
                ArrowRight: ["yr", rot],
                ArrowUp: ["xr", -rot],
                ArrowDown: ["xr", rot],
                q: ["zr", -rot],
                e: ["zr", rot],
                a: ["xt", -trans],
                d: ["xt", trans],
                w: ["yt", -trans],
                s: ["yt", trans],
                "-": ["zt", -trans * 5],
                "=": ["zt", trans * 5],
            }
            const move = moves[ev.key]
            if (move && this.client) {
                ev.preventDefault()
                this.steer(move[0], move[1])
            }
        })

        const strip = el<HTMLDivElement>("steps")
        STEP_LABELS.forEach((label, i) => {
            const box = document.createElement("div")
            box.className = "step"
            box.textContent = `${i + 1}. ${label}`
            strip.appendChild(box)
        })
        this.refreshUi()
    }
}

const app = new LabApp()
app.bind()
