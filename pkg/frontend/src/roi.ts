/** ROI selection: display <-> source coordinate mapping and drag gestures.
 *
 * The server receives source-pixel-exact integer rectangles no matter how
 * the image is zoomed for display. The mapping is a pure axis-aligned scale,
 * so it is invertible whenever both sizes are positive.
 */

export interface SourceRect {
  x: number;
  y: number;
  width: number;
  height: number;
}

export interface DisplayRect {
  x: number;
  y: number;
  width: number;
  height: number;
}

export interface DisplayMapping {
  sourceWidth: number;
  sourceHeight: number;
  displayWidth: number;
  displayHeight: number;
}

export interface RoiSelection {
  mapping: DisplayMapping;
  /** What the user sees: the source rect projected back onto the display. */
  display: DisplayRect;
  /** What the server gets: integer source pixels. */
  source: SourceRect;
}

export function makeMapping(
  sourceWidth: number,
  sourceHeight: number,
  displayWidth: number,
  displayHeight: number,
): DisplayMapping {
  if (sourceWidth <= 0 || sourceHeight <= 0 || displayWidth <= 0 || displayHeight <= 0) {
    throw new Error("mapping requires positive source and display sizes");
  }
  return { sourceWidth, sourceHeight, displayWidth, displayHeight };
}

export function displayToSource(m: DisplayMapping, x: number, y: number): { x: number; y: number } {
  return {
    x: (x * m.sourceWidth) / m.displayWidth,
    y: (y * m.sourceHeight) / m.displayHeight,
  };
}

export function sourceToDisplay(m: DisplayMapping, x: number, y: number): { x: number; y: number } {
  return {
    x: (x * m.displayWidth) / m.sourceWidth,
    y: (y * m.displayHeight) / m.sourceHeight,
  };
}

function clampPoint(m: DisplayMapping, x: number, y: number): { x: number; y: number } {
  return {
    x: Math.min(Math.max(x, 0), m.displayWidth),
    y: Math.min(Math.max(y, 0), m.displayHeight),
  };
}

/** Snap a display rect to integer source pixels: clamped and never empty. */
export function sourceRectFromDisplay(m: DisplayMapping, rect: DisplayRect): SourceRect {
  const topLeft = displayToSource(m, rect.x, rect.y);
  const bottomRight = displayToSource(m, rect.x + rect.width, rect.y + rect.height);
  let x0 = Math.round(topLeft.x);
  let y0 = Math.round(topLeft.y);
  let x1 = Math.round(bottomRight.x);
  let y1 = Math.round(bottomRight.y);
  x0 = Math.min(Math.max(x0, 0), m.sourceWidth - 1);
  y0 = Math.min(Math.max(y0, 0), m.sourceHeight - 1);
  x1 = Math.min(Math.max(x1, x0 + 1), m.sourceWidth);
  y1 = Math.min(Math.max(y1, y0 + 1), m.sourceHeight);
  return { x: x0, y: y0, width: x1 - x0, height: y1 - y0 };
}

export function displayRectFromSource(m: DisplayMapping, rect: SourceRect): DisplayRect {
  const topLeft = sourceToDisplay(m, rect.x, rect.y);
  const bottomRight = sourceToDisplay(m, rect.x + rect.width, rect.y + rect.height);
  return {
    x: topLeft.x,
    y: topLeft.y,
    width: bottomRight.x - topLeft.x,
    height: bottomRight.y - topLeft.y,
  };
}

export function selectionFromSource(m: DisplayMapping, source: SourceRect): RoiSelection {
  if (source.width < 1 || source.height < 1) {
    throw new Error("ROI must cover at least one source pixel");
  }
  const clamped: SourceRect = {
    x: Math.min(Math.max(Math.round(source.x), 0), m.sourceWidth - 1),
    y: Math.min(Math.max(Math.round(source.y), 0), m.sourceHeight - 1),
    width: 0,
    height: 0,
  };
  clamped.width = Math.min(Math.round(source.width), m.sourceWidth - clamped.x);
  clamped.height = Math.min(Math.round(source.height), m.sourceHeight - clamped.y);
  return {
    mapping: m,
    display: displayRectFromSource(m, clamped),
    source: clamped,
  };
}

/** Default when the user draws nothing: the whole image is the animal. */
export function fullImageSelection(m: DisplayMapping): RoiSelection {
  return selectionFromSource(m, {
    x: 0,
    y: 0,
    width: m.sourceWidth,
    height: m.sourceHeight,
  });
}

/** Drags smaller than this many display pixels in both axes are treated as
 * stray clicks, not selections. */
const DEAD_ZONE_PX = 3;

export class RoiDragger {
  private anchor: { x: number; y: number } | null = null;
  private current: { x: number; y: number } | null = null;

  constructor(readonly mapping: DisplayMapping) {}

  get active(): boolean {
    return this.anchor !== null;
  }

  begin(x: number, y: number): void {
    this.anchor = clampPoint(this.mapping, x, y);
    this.current = this.anchor;
  }

  update(x: number, y: number): void {
    if (this.anchor !== null) {
      this.current = clampPoint(this.mapping, x, y);
    }
  }

  /** The in-progress rectangle for live feedback, or null when not dragging. */
  preview(): DisplayRect | null {
    if (this.anchor === null || this.current === null) {
      return null;
    }
    return {
      x: Math.min(this.anchor.x, this.current.x),
      y: Math.min(this.anchor.y, this.current.y),
      width: Math.abs(this.current.x - this.anchor.x),
      height: Math.abs(this.current.y - this.anchor.y),
    };
  }

  /** Finish the gesture. Returns null for dead-zone clicks; otherwise the
   * selection, with its display rect snapped to the integer source rect. */
  end(): RoiSelection | null {
    const rect = this.preview();
    this.anchor = null;
    this.current = null;
    if (rect === null || (rect.width < DEAD_ZONE_PX && rect.height < DEAD_ZONE_PX)) {
      return null;
    }
    const source = sourceRectFromDisplay(this.mapping, rect);
    return {
      mapping: this.mapping,
      display: displayRectFromSource(this.mapping, source),
      source,
    };
  }
}
