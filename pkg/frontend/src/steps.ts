// Guidance-step progression. The four steps mirror the pose decomposition:
// translate, rotate about X, rotate about Y, rotate about Z. The active step
// is the first whose components are outside tolerance; it can only advance
// in that order, and capture unlocks when the whole report matches.

import type { MatchReport, PoseDict } from "./protocol.js"

export const STEP_COMPONENTS: ReadonlyArray<ReadonlyArray<keyof PoseDict>> = [
    ["xt", "yt", "zt"],
    ["xr"],
    ["yr"],
    ["zr"],
]

export const STEP_LABELS = ["translate", "rotate X", "rotate Y", "rotate Z"]

export const ROTATION_LIMIT_DEG = 70

export function stepDone(report: MatchReport, step: number): boolean {
    return STEP_COMPONENTS[step].every((name) => report.components[name]?.ok ?? false)
}

/** 0-based index of the active step; 3 once everything matches. */
export function activeStep(report: MatchReport): number {
    for (let i = 0; i < STEP_COMPONENTS.length; i++) {
        if (!stepDone(report, i)) {
            return i
        }
    }
    return STEP_COMPONENTS.length - 1
}

export function captureEnabled(report: MatchReport): boolean {
    return report.matched
}

/** Steering an axis outside the active step is allowed but flagged. */
export function offScript(report: MatchReport, axis: keyof PoseDict): boolean {
    return !STEP_COMPONENTS[activeStep(report)].includes(axis)
}

export function clampRotationDeg(value: number): { value: number; clamped: boolean } {
    if (value > ROTATION_LIMIT_DEG) return { value: ROTATION_LIMIT_DEG, clamped: true }
    if (value < -ROTATION_LIMIT_DEG) return { value: -ROTATION_LIMIT_DEG, clamped: true }
    return { value, clamped: false }
}

export function applySteer(pose: PoseDict, axis: keyof PoseDict, delta: number): { pose: PoseDict; clamped: boolean } {
    const next = { ...pose }
    let clamped = false
    if (axis === "xr" || axis === "yr" || axis === "zr") {
        const r = clampRotationDeg(pose[axis] + delta)
        next[axis] = r.value
        clamped = r.clamped
    } else {
        next[axis] = pose[axis] + delta
    }
    return { pose: next, clamped }
}
