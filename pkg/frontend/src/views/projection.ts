// 2D latent projection panel: scatter of the server's sampled points,
// members of the selected node highlighted, everything else dimmed.

import type { Projection } from "../api.js";

const SVG_NS = "http://www.w3.org/2000/svg";
const SIZE = 420;
const PAD = 18;

export function renderProjection(
  container: HTMLElement,
  projection: Projection | null,
  highlighted: Set<number>,
): void {
  container.textContent = "";
  if (!projection || projection.points.length === 0) {
    const empty = document.createElement("p");
    empty.className = "placeholder";
    empty.textContent = "no projection (infer latents first)";
    container.appendChild(empty);
    return;
  }

  let minX = Infinity;
  let maxX = -Infinity;
  let minY = Infinity;
  let maxY = -Infinity;
  for (const [x, y] of projection.points) {
    minX = Math.min(minX, x);
    maxX = Math.max(maxX, x);
    minY = Math.min(minY, y);
    maxY = Math.max(maxY, y);
  }
  const spanX = maxX - minX || 1;
  const spanY = maxY - minY || 1;
  const span = Math.max(spanX, spanY);
  const scale = (SIZE - 2 * PAD) / span;

  const svg = document.createElementNS(SVG_NS, "svg");
  svg.setAttribute("viewBox", `0 0 ${SIZE} ${SIZE}`);
  svg.setAttribute("class", "projection-svg");
  svg.setAttribute("data-testid", "projection-svg");

  for (let i = 0; i < projection.points.length; i++) {
    const [x, y] = projection.points[i];
    const particle = projection.indices[i];
    const hl = highlighted.has(particle);
    const c = document.createElementNS(SVG_NS, "circle");
    c.setAttribute("cx", String(PAD + (x - minX) * scale));
    c.setAttribute("cy", String(SIZE - PAD - (y - minY) * scale));
    c.setAttribute("r", hl ? "4" : "2.5");
    c.setAttribute("class", hl ? "proj-point hl" : "proj-point dim");
    c.setAttribute("data-index", String(particle));
    c.setAttribute("data-label", String(projection.labels[i]));
    svg.appendChild(c);
  }

  container.appendChild(svg);

  const note = document.createElement("p");
  note.className = "panel-note";
  note.textContent = `${projection.points.length} sampled points, ` +
    `${highlighted.size} in selected node`;
  container.appendChild(note);
}
