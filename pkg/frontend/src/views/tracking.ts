// Tracking panel: pick a frame span, launch a tracking job for the
// box-selected region, then play the returned trace back as a moving box.

import type { FrameMeta, TraceEntry } from "../api.js";
import type { Region } from "../state.js";

export interface TrackingHandlers {
  onStart(frameStart: number, frameEnd: number): void;
  onPlayToggle(): void;
  onScrub(cursor: number): void;
}

function frameSelect(id: string, frames: FrameMeta[], value: number): HTMLSelectElement {
  const sel = document.createElement("select");
  sel.id = id;
  for (const f of frames) {
    const opt = document.createElement("option");
    opt.value = String(f.id);
    opt.textContent = `frame ${f.id}`;
    if (f.id === value) opt.selected = true;
    sel.appendChild(opt);
  }
  return sel;
}

export function renderTracking(
  container: HTMLElement,
  frames: FrameMeta[],
  region: Region | null,
  trace: TraceEntry[] | null,
  playCursor: number,
  playing: boolean,
  status: string | null,
  handlers: TrackingHandlers,
): void {
  container.textContent = "";

  const regionLine = document.createElement("p");
  regionLine.className = "panel-note";
  regionLine.setAttribute("data-testid", "region-readout");
  regionLine.textContent = region
    ? `region center (${region.center.map((c) => c.toFixed(3)).join(", ")}), ` +
      `half extent ${region.halfExtent[0].toFixed(3)}`
    : "no region selected (shift+drag in the physical view)";
  container.appendChild(regionLine);

  const controls = document.createElement("div");
  controls.className = "track-controls";
  const startSel = frameSelect("track-start", frames, frames.length ? frames[0].id : 0);
  const endSel = frameSelect("track-end", frames, frames.length ? frames[frames.length - 1].id : 0);
  const startBtn = document.createElement("button");
  startBtn.id = "track-launch";
  startBtn.textContent = "Track";
  startBtn.disabled = region === null || frames.length === 0;
  startBtn.addEventListener("click", () => {
    handlers.onStart(Number(startSel.value), Number(endSel.value));
  });
  controls.append("from ", startSel, " to ", endSel, " ", startBtn);
  container.appendChild(controls);

  if (status) {
    const st = document.createElement("p");
    st.className = "panel-note";
    st.setAttribute("data-testid", "track-status");
    st.textContent = status;
    container.appendChild(st);
  }

  if (trace && trace.length > 0) {
    const entry = trace[playCursor];
    const playback = document.createElement("div");
    playback.className = "track-playback";

    const playBtn = document.createElement("button");
    playBtn.id = "track-play";
    playBtn.textContent = playing ? "Pause" : "Play";
    playBtn.addEventListener("click", () => handlers.onPlayToggle());
    playback.appendChild(playBtn);

    const scrub = document.createElement("input");
    scrub.type = "range";
    scrub.id = "track-scrub";
    scrub.min = "0";
    scrub.max = String(trace.length - 1);
    scrub.value = String(playCursor);
    scrub.addEventListener("input", () => handlers.onScrub(Number(scrub.value)));
    playback.appendChild(scrub);

    const readout = document.createElement("span");
    readout.className = "panel-note";
    readout.setAttribute("data-testid", "trace-readout");
    readout.textContent = `step ${playCursor + 1}/${trace.length} | t=${entry.t} | ` +
      `similarity ${entry.similarity.toFixed(3)}` +
      (entry.converged ? "" : " | not converged");
    playback.appendChild(readout);

    container.appendChild(playback);
  }
}
