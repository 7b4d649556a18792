// Canvas drawing for the virtual lab: the camera's view of the board plus
// the active guidance step's target outline. Pure pixel plumbing; all
// coordinates arrive from the service.

import type { GuidanceStep, Projection } from "./protocol.js"

export interface SceneView {
    imageWidth: number
    imageHeight: number
    current: Projection | null
    targetStep: GuidanceStep | null
    boardVisible: boolean
}

function polyline(ctx: CanvasRenderingContext2D, pts: number[][], scale: number, close: boolean): void {
    if (pts.length === 0) return
    ctx.beginPath()
    ctx.moveTo(pts[0][0] * scale, pts[0][1] * scale)
    for (let i = 1; i < pts.length; i++) {
        ctx.lineTo(pts[i][0] * scale, pts[i][1] * scale)
    }
    if (close) ctx.closePath()
    ctx.stroke()
}

function dots(ctx: CanvasRenderingContext2D, pts: number[][], scale: number, radius: number): void {
    for (const [u, v] of pts) {
        ctx.beginPath()
        ctx.arc(u * scale, v * scale, radius, 0, 2 * Math.PI)
        ctx.fill()
    }
}

export function drawScene(ctx: CanvasRenderingContext2D, view: SceneView): void {
    const scale = ctx.canvas.width / view.imageWidth
    ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height)

    ctx.fillStyle = "#101418"
    ctx.fillRect(0, 0, ctx.canvas.width, view.imageHeight * scale)
    ctx.strokeStyle = "#39424e"
    ctx.lineWidth = 1
    ctx.strokeRect(0.5, 0.5, view.imageWidth * scale - 1, view.imageHeight * scale - 1)

    if (view.targetStep) {
        ctx.strokeStyle = "#d8b24a"
        ctx.lineWidth = 2
        ctx.setLineDash([8, 5])
        polyline(ctx, view.targetStep.outline, scale, true)
        ctx.setLineDash([])
        ctx.fillStyle = "rgba(216, 178, 74, 0.55)"
        dots(ctx, view.targetStep.corners, scale, 1.5)
    }

    if (view.current) {
        ctx.strokeStyle = view.boardVisible ? "#5dd08c" : "#d05d5d"
        ctx.lineWidth = 2
        polyline(ctx, view.current.outline, scale, true)
        ctx.fillStyle = view.boardVisible ? "#5dd08c" : "#d05d5d"
        dots(ctx, view.current.corners, scale, 2)
    }
}
