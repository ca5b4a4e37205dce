// Physical-space panel: 3D point rendering of the selected node's
// particles, colored by a chosen attribute. The camera always faces the
// centroid of the rendered subset. Shift+drag draws the cubic
// region-selection box; plain drag orbits, wheel zooms.

import { cssColor } from "../colormap.js";
import type { Camera, Region } from "../state.js";

export const MAX_RENDER_POINTS = 200_000;
const SIZE = 460;

export interface PhysicalData {
  frame: number;
  node: number;
  attr: string;
  positions: Float32Array; // length 3n, normalized [0,1] coords
  values: Float32Array; // length n
}

export interface BoxMarker {
  center: [number, number, number];
  halfExtent: [number, number, number];
  kind: "region" | "trace";
}

export interface PhysicalHandlers {
  onCamera(camera: Camera): void;
  onRegion(region: Region): void;
}

export function decimationStride(n: number, cap: number = MAX_RENDER_POINTS): number {
  return n <= cap ? 1 : Math.ceil(n / cap);
}

export function subsetCentroid(positions: Float32Array, stride: number): [number, number, number] {
  const n = Math.floor(positions.length / 3);
  let cx = 0;
  let cy = 0;
  let cz = 0;
  let m = 0;
  for (let i = 0; i < n; i += stride) {
    cx += positions[3 * i];
    cy += positions[3 * i + 1];
    cz += positions[3 * i + 2];
    m += 1;
  }
  if (m === 0) return [0.5, 0.5, 0.5];
  return [cx / m, cy / m, cz / m];
}

// orbit transform: yaw about the vertical axis, then pitch about the
// horizontal screen axis; orthographic mapping to pixels
export function projectPoint(
  p: [number, number, number],
  centroid: [number, number, number],
  camera: Camera,
): [number, number, number] {
  const x0 = p[0] - centroid[0];
  const y0 = p[1] - centroid[1];
  const z0 = p[2] - centroid[2];
  const cy = Math.cos(camera.yaw);
  const sy = Math.sin(camera.yaw);
  const x1 = x0 * cy + z0 * sy;
  const z1 = -x0 * sy + z0 * cy;
  const cp = Math.cos(camera.pitch);
  const sp = Math.sin(camera.pitch);
  const y2 = y0 * cp - z1 * sp;
  const z2 = y0 * sp + z1 * cp;
  const s = SIZE * 0.72 * camera.zoom;
  return [SIZE / 2 + x1 * s, SIZE / 2 - y2 * s, z2];
}

// inverse of projectPoint on the centroid depth plane (z2 = 0)
export function unprojectPoint(
  sx: number,
  sy: number,
  centroid: [number, number, number],
  camera: Camera,
): [number, number, number] {
  const s = SIZE * 0.72 * camera.zoom;
  const x1 = (sx - SIZE / 2) / s;
  const y2 = -(sy - SIZE / 2) / s;
  const cp = Math.cos(camera.pitch);
  const sp = Math.sin(camera.pitch);
  const y0 = y2 * cp;
  const z1 = -y2 * sp;
  const cy = Math.cos(camera.yaw);
  const sy_ = Math.sin(camera.yaw);
  const x0 = x1 * cy - z1 * sy_;
  const z0 = x1 * sy_ + z1 * cy;
  return [x0 + centroid[0], y0 + centroid[1], z0 + centroid[2]];
}

export function screenRectToRegion(
  x0: number,
  y0: number,
  x1: number,
  y1: number,
  centroid: [number, number, number],
  camera: Camera,
): Region {
  const cx = (x0 + x1) / 2;
  const cyPix = (y0 + y1) / 2;
  const center = unprojectPoint(cx, cyPix, centroid, camera);
  const s = SIZE * 0.72 * camera.zoom;
  const hx = Math.abs(x1 - x0) / 2 / s;
  const hy = Math.abs(y1 - y0) / 2 / s;
  const h = Math.max(hx, hy, 1e-4);
  const clamp = (v: number) => Math.max(0, Math.min(1, v));
  return {
    center: [clamp(center[0]), clamp(center[1]), clamp(center[2])],
    halfExtent: [h, h, h],
  };
}

export function renderPhysical(
  container: HTMLElement,
  data: PhysicalData | null,
  camera: Camera,
  box: BoxMarker | null,
  handlers: PhysicalHandlers,
): void {
  container.textContent = "";
  if (!data) {
    const empty = document.createElement("p");
    empty.className = "placeholder";
    empty.textContent = "no particles loaded";
    container.appendChild(empty);
    return;
  }

  const n = Math.floor(data.positions.length / 3);
  const stride = decimationStride(n);
  const centroid = subsetCentroid(data.positions, stride);

  const wrap = document.createElement("div");
  wrap.className = "physical-wrap";
  wrap.style.position = "relative";
  wrap.style.width = `${SIZE}px`;
  wrap.style.height = `${SIZE}px`;

  const canvas = document.createElement("canvas");
  canvas.width = SIZE;
  canvas.height = SIZE;
  canvas.className = "physical-canvas";
  canvas.setAttribute("data-testid", "physical-canvas");
  canvas.setAttribute("data-rendered", String(Math.ceil(n / stride)));
  wrap.appendChild(canvas);

  const ctx = canvas.getContext("2d");
  if (ctx) {
    ctx.fillStyle = "#10141c";
    ctx.fillRect(0, 0, SIZE, SIZE);
    let vmin = Infinity;
    let vmax = -Infinity;
    for (let i = 0; i < n; i += stride) {
      vmin = Math.min(vmin, data.values[i]);
      vmax = Math.max(vmax, data.values[i]);
    }
    const vspan = vmax - vmin || 1;
    for (let i = 0; i < n; i += stride) {
      const p: [number, number, number] = [
        data.positions[3 * i],
        data.positions[3 * i + 1],
        data.positions[3 * i + 2],
      ];
      const [sx, sy] = projectPoint(p, centroid, camera);
      ctx.fillStyle = cssColor((data.values[i] - vmin) / vspan);
      ctx.fillRect(sx - 1, sy - 1, 2, 2);
    }
  }

  if (box) {
    const marker = document.createElement("div");
    marker.className = `track-box ${box.kind}`;
    marker.setAttribute("data-testid", "track-box");
    marker.setAttribute("data-cx", String(box.center[0]));
    marker.setAttribute("data-cy", String(box.center[1]));
    marker.setAttribute("data-cz", String(box.center[2]));
    const [sx, sy] = projectPoint(box.center, centroid, camera);
    const s = SIZE * 0.72 * camera.zoom;
    const hw = box.halfExtent[0] * s;
    const hh = box.halfExtent[1] * s;
    marker.style.position = "absolute";
    marker.style.left = `${sx - hw}px`;
    marker.style.top = `${sy - hh}px`;
    marker.style.width = `${2 * hw}px`;
    marker.style.height = `${2 * hh}px`;
    wrap.appendChild(marker);
  }

  // drag to orbit; shift+drag for box selection
  let dragStart: [number, number] | null = null;
  let dragBox = false;
  let rubber: HTMLDivElement | null = null;

  canvas.addEventListener("mousedown", (ev) => {
    const rect = canvas.getBoundingClientRect();
    dragStart = [ev.clientX - rect.left, ev.clientY - rect.top];
    dragBox = ev.shiftKey;
    if (dragBox) {
      rubber = document.createElement("div");
      rubber.className = "rubber-band";
      rubber.style.position = "absolute";
      wrap.appendChild(rubber);
    }
  });
  canvas.addEventListener("mousemove", (ev) => {
    if (!dragStart) return;
    const rect = canvas.getBoundingClientRect();
    const x = ev.clientX - rect.left;
    const y = ev.clientY - rect.top;
    if (dragBox && rubber) {
      rubber.style.left = `${Math.min(dragStart[0], x)}px`;
      rubber.style.top = `${Math.min(dragStart[1], y)}px`;
      rubber.style.width = `${Math.abs(x - dragStart[0])}px`;
      rubber.style.height = `${Math.abs(y - dragStart[1])}px`;
    } else if (!dragBox) {
      handlers.onCamera({
        yaw: camera.yaw + (x - dragStart[0]) * 0.01,
        pitch: camera.pitch + (y - dragStart[1]) * 0.01,
        zoom: camera.zoom,
      });
      dragStart = [x, y];
    }
  });
  canvas.addEventListener("mouseup", (ev) => {
    if (!dragStart) return;
    const rect = canvas.getBoundingClientRect();
    const x = ev.clientX - rect.left;
    const y = ev.clientY - rect.top;
    if (dragBox) {
      handlers.onRegion(screenRectToRegion(dragStart[0], dragStart[1], x, y, centroid, camera));
      rubber?.remove();
    }
    dragStart = null;
    dragBox = false;
    rubber = null;
  });
  canvas.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    const factor = ev.deltaY > 0 ? 0.9 : 1.1;
    handlers.onCamera({ ...camera, zoom: Math.max(0.1, Math.min(10, camera.zoom * factor)) });
  });

  container.appendChild(wrap);

  const note = document.createElement("p");
  note.className = "panel-note";
  note.setAttribute("data-testid", "physical-note");
  if (stride > 1) {
    note.textContent = `showing ${Math.ceil(n / stride).toLocaleString()} of ` +
      `${n.toLocaleString()} particles (stride ${stride})`;
  } else {
    note.textContent = `${n.toLocaleString()} particles, attribute "${data.attr}"`;
  }
  container.appendChild(note);
}
