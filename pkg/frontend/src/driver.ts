// Headless session driver that follows the UI's step machinery: steer one
// dimension at a time in decomposition order, capture when the match report
// allows it. Every command is logged so a plain protocol client can replay
// the identical sequence (same realized poses, same frames, same estimate).

import type { PoseDict, SessionClient, SessionState } from "./protocol.js"
import { STEP_COMPONENTS, activeStep, captureEnabled } from "./steps.js"

export type CommandLogEntry =
    | { kind: "pose"; pose: PoseDict }
    | { kind: "capture" }
    | { kind: "skip" }

export interface DriveResult {
    state: SessionState
    log: CommandLogEntry[]
    targetsFetched: number
}

function clonePose(pose: PoseDict): PoseDict {
    return { xr: pose.xr, yr: pose.yr, zr: pose.zr, xt: pose.xt, yt: pose.yt, zt: pose.zt }
}

export async function driveUiSession(client: SessionClient, maxRounds = 40): Promise<DriveResult> {
    const log: CommandLogEntry[] = []

    const steer = async (pose: PoseDict) => {
        log.push({ kind: "pose", pose: clonePose(pose) })
        return client.setVirtualPose(pose)
    }
    const capture = async () => {
        log.push({ kind: "capture" })
        return client.capture()
    }

    let state = await client.getState()

    // Startup: walk onto the startup target one component group at a time,
    // exactly as the step strip asks, then confirm.
    const start = state.startup_target
    const pose: PoseDict = { xr: 0, yr: 0, zr: 0, xt: start.xt, yt: start.yt, zt: start.zt }
    await steer(pose)
    for (const group of STEP_COMPONENTS.slice(1)) {
        for (const axis of group) {
            pose[axis] = start[axis]
        }
        await steer(pose)
    }
    await capture()

    let targetsFetched = 0
    for (let round = 0; round < maxRounds; round++) {
        state = await client.getState()
        if (state.phase !== "collecting") {
            return { state, log, targetsFetched }
        }
        const payload = await client.getGuidance() // one fetch per target
        targetsFetched += 1
        const target = payload.target

        // Follow the four steps in order; after each steer the service's
        // match report confirms the step advanced before moving on.
        let report = null
        for (let step = 0; step < STEP_COMPONENTS.length; step++) {
            for (const axis of STEP_COMPONENTS[step]) {
                pose[axis] = target[axis]
            }
            const resp = await steer(pose)
            report = resp.match
            const expected = Math.min(step + 1, STEP_COMPONENTS.length - 1)
            if (activeStep(report) < expected && !report.matched) {
                throw new Error(`step ${step + 1} did not complete: active=${activeStep(report)}`)
            }
        }
        if (!report || !captureEnabled(report)) {
            throw new Error("capture gate closed after following all steps")
        }
        const result = await capture()
        if (!result.accepted) {
            // Matched but not visible to the camera: re-plan.
            log.push({ kind: "skip" })
            await client.skipTarget()
        }
    }
    throw new Error("session did not finish within the round budget")
}

/** Replay a recorded command sequence verbatim over a fresh session. */
export async function replaySession(client: SessionClient, log: CommandLogEntry[]): Promise<SessionState> {
    for (const entry of log) {
        if (entry.kind === "pose") {
            await client.setVirtualPose(entry.pose)
        } else if (entry.kind === "capture") {
            await client.capture()
        } else {
            await client.skipTarget()
        }
    }
    return client.getState()
}
