/** Ellipse rendering geometry from the server's compact shape encoding.
 *
 * A keypoint's affine shape arrives as the lower-triangular matrix
 * A = [[a, 0], [b, c]] mapping the unit circle onto the ellipse. Axis
 * lengths and orientation come from the eigendecomposition of M = A A^T,
 * done client-side so the payload stays three numbers per shape.
 */

import type { EllipseParams } from "./api.js";

export interface EllipseGeometry {
  cx: number;
  cy: number;
  semiMajor: number;
  semiMinor: number;
  /** Major-axis angle from +x, degrees in (-90, 90]. */
  angleDeg: number;
}

export function decomposeShape(e: EllipseParams): EllipseGeometry {
  if (!(e.a > 0) || !(e.c > 0)) {
    throw new Error(`invalid shape: need a > 0 and c > 0, got a=${e.a} c=${e.c}`);
  }
  const p = e.a * e.a;
  const q = e.a * e.b;
  const r = e.b * e.b + e.c * e.c;
  const gap = Math.sqrt(Math.max((p - r) * (p - r) + 4 * q * q, 0));
  const high = (p + r + gap) / 2;
  const low = Math.max((p + r - gap) / 2, 0);
  const theta = 0.5 * Math.atan2(2 * q, p - r);
  return {
    cx: e.x,
    cy: e.y,
    semiMajor: Math.sqrt(high),
    semiMinor: Math.sqrt(low),
    angleDeg: (theta * 180) / Math.PI,
  };
}

/** Map ellipse geometry from working-ROI coordinates onto source pixels.
 *
 * roiSize is the post-resize working size the keypoints live in; roi places
 * that window inside the source image. The resize is isotropic, so axes
 * scale by a single factor.
 */
export function roiToSource(
  g: EllipseGeometry,
  roi: { x: number; y: number; width: number; height: number },
  roiSize: [number, number],
): EllipseGeometry {
  const sx = roi.width / roiSize[0];
  const sy = roi.height / roiSize[1];
  const axisScale = (sx + sy) / 2;
  return {
    cx: roi.x + g.cx * sx,
    cy: roi.y + g.cy * sy,
    semiMajor: g.semiMajor * axisScale,
    semiMinor: g.semiMinor * axisScale,
    angleDeg: g.angleDeg,
  };
}
