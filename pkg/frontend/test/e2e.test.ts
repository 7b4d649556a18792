// End-to-end against the real service: a UI-machinery session and a plain
// protocol replay with the same seed and realized poses must produce the
// identical final estimate, and the guidance payload is fetched exactly
// once per target.

import { afterAll, beforeAll, describe, expect, it } from "vitest"
import { spawn, type ChildProcess } from "node:child_process"
import { mkdtempSync, writeFileSync } from "node:fs"
import { tmpdir } from "node:os"
import { join } from "node:path"
import { SessionClient } from "../src/protocol.js"
import { driveUiSession, replaySession } from "../src/driver.js"

const PORT = 8732
const BASE = `http://127.0.0.1:${PORT}`

let server: ChildProcess | null = null

async function waitForHealth(timeoutMs = 30_000): Promise<void> {
    const deadline = Date.now() + timeoutMs
    while (Date.now() < deadline) {
        try {
            const resp = await fetch(`${BASE}/healthz`)
            if (resp.ok) return
        } catch {
            // not up yet
        }
        await new Promise((r) => setTimeout(r, 250))
    }
    throw new Error("service did not become healthy")
}

beforeAll(async () => {
    const dir = mkdtempSync(join(tmpdir(), "camcal-ui-"))
    const config = join(dir, "session.json")
    // Targets come from the generation strategy directly (no annealing) so
    // the e2e run stays fast; the protocol surface is identical.
    writeFileSync(config, JSON.stringify({
        select: "generated",
        frame_cap: 6,
        stop_on_convergence: false,
    }))
    server = spawn("python3", ["-m", "camcal.cli", "serve", "--port", String(PORT), "--config", config], {
        stdio: "ignore",
    })
    await waitForHealth()
}, 40_000)

afterAll(() => {
    server?.kill("SIGTERM")
})

describe("UI end-to-end", () => {
    it("UI session and protocol replay with the same seed produce the identical estimate", async () => {
        const uiClient = new SessionClient(BASE)
        await uiClient.open(11)
        const ui = await driveUiSession(uiClient)
        expect(ui.state.phase).toBe("converged")
        expect(ui.state.estimate).not.toBeNull()

        // Lazy-loading contract, measured on both sides of the wire.
        expect(uiClient.guidanceFetches).toBe(ui.targetsFetched)
        expect(ui.state.stats.guidance_requests).toBe(ui.targetsFetched)
        expect(ui.state.stats.payload_computes).toBe(ui.targetsFetched)

        const replayClient = new SessionClient(BASE)
        await replayClient.open(11)
        const replayed = await replaySession(replayClient, ui.log)
        expect(replayed.phase).toBe("converged")
        // Exact match of all nine parameters: the UI layer adds no state.
        expect(replayed.estimate!.params).toEqual(ui.state.estimate!.params)
        expect(replayed.estimate!.variances).toEqual(ui.state.estimate!.variances)
        expect(replayed.estimate!.rms).toBe(ui.state.estimate!.rms)
    }, 120_000)

    it("capture stays gated until the report matches and steps advance in order", async () => {
        const client = new SessionClient(BASE)
        await client.open(3)
        const state = await client.getState()
        const start = state.startup_target
        await client.setVirtualPose(start)
        await client.capture()

        const payload = await client.getGuidance()
        const target = payload.target
        expect(payload.steps).toHaveLength(4)
        expect(payload.steps[3].pose).toEqual(target)

        // Far from the target: capture must be rejected.
        const away = { ...target, xr: target.xr > 0 ? target.xr - 40 : target.xr + 40 }
        const mismatch = await client.setVirtualPose(away)
        expect(mismatch.match.matched).toBe(false)
        const rejected = await client.capture()
        expect(rejected.accepted).toBe(false)

        // Walk the steps; the report's component verdicts advance in order.
        const pose = { xr: 0, yr: 0, zr: 0, xt: target.xt, yt: target.yt, zt: target.zt }
        const r1 = await client.setVirtualPose(pose)
        expect(r1.match.components.xt.ok && r1.match.components.zt.ok).toBe(true)

        pose.xr = target.xr
        const r2 = await client.setVirtualPose(pose)
        expect(r2.match.components.xr.ok).toBe(true)

        pose.yr = target.yr
        pose.zr = target.zr
        const r3 = await client.setVirtualPose(pose)
        expect(r3.match.matched).toBe(true)
        const accepted = await client.capture()
        expect(accepted.accepted).toBe(true)
        expect(accepted.state.frame_count).toBe(2)
    }, 60_000)
})
