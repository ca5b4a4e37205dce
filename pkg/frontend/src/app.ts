// Application controller: builds the page, owns the store, and maps every
// user action to exactly one service call. Views re-render from server
// responses only; nothing analytic is computed client-side.

import type { ApiClient, JobStatus } from "./api.js";
import { ApiError, b64ToFloat32 } from "./api.js";
import { Store } from "./state.js";
import { renderTree } from "./views/tree.js";
import { renderProjection } from "./views/projection.js";
import type { BoxMarker, PhysicalData } from "./views/physical.js";
import { renderPhysical } from "./views/physical.js";
import { renderTracking } from "./views/tracking.js";

const PROJECTION_FRACTION = 0.05;
const PROJECTION_PERPLEXITY = 12;
const PROJECTION_SEED = 0;

export interface AppOptions {
  pollMs?: number;
}

export interface AppActions {
  connect(datasetDir: string): Promise<void>;
  selectFrame(frameId: number): Promise<void>;
  train(params: { radius: number; latent_dim: number; epochs: number; sample_fraction: number }): Promise<void>;
  infer(): Promise<void>;
  selectNode(nodeId: number): Promise<void>;
  split(): Promise<void>;
  revoke(): Promise<void>;
  setColorAttr(attr: string): Promise<void>;
  startTrack(frameStart: number, frameEnd: number): Promise<void>;
  playToggle(): void;
  scrub(cursor: number): Promise<void>;
  dismissBanner(): void;
}

export interface App {
  store: Store;
  actions: AppActions;
  dispose(): void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text !== undefined) node.textContent = text;
  return node;
}

export function createApp(root: HTMLElement, api: ApiClient, opts: AppOptions = {}): App {
  const pollMs = opts.pollMs ?? 500;
  const store = new Store();
  let physical: PhysicalData | null = null;
  const particleCache = new Map<string, PhysicalData>();
  let playTimer: ReturnType<typeof setInterval> | null = null;
  const pollTimers = new Set<ReturnType<typeof setInterval>>();

  // -- static skeleton

  root.textContent = "";
  const banner = el("div", { id: "banner", hidden: "" });
  const bannerText = el("span", { id: "banner-text" });
  const bannerClose = el("button", { id: "banner-close" }, "dismiss");
  banner.append(bannerText, " ", bannerClose);

  const header = el("header", { class: "topbar" });
  const datasetInput = el("input", { id: "dataset-dir", placeholder: "dataset directory" });
  const connectBtn = el("button", { id: "connect" }, "Open session");
  const frameSel = el("select", { id: "frame-select" });
  const sessionLabel = el("span", { id: "session-label", class: "panel-note" }, "no session");
  header.append(datasetInput, connectBtn, " frame ", frameSel, sessionLabel);

  const modelBar = el("div", { class: "model-bar" });
  const radiusInput = el("input", { id: "train-radius", value: "0.1", size: "6" });
  const dimInput = el("input", { id: "train-dim", value: "4", size: "4" });
  const epochsInput = el("input", { id: "train-epochs", value: "20", size: "5" });
  const fracInput = el("input", { id: "train-fraction", value: "0.1", size: "5" });
  const trainBtn = el("button", { id: "train-btn" }, "Train");
  const inferBtn = el("button", { id: "infer-btn" }, "Infer latents");
  const jobLabel = el("span", { id: "job-label", class: "panel-note" });
  modelBar.append(
    "radius ", radiusInput, " latent dim ", dimInput, " epochs ", epochsInput,
    " sample ", fracInput, " ", trainBtn, " ", inferBtn, jobLabel,
  );

  const grid = el("div", { class: "grid" });
  const treePanel = el("section", { class: "panel", id: "tree-panel" });
  const treeTitle = el("h2", {}, "Cluster tree");
  const treeControls = el("div", { class: "tree-controls" });
  const kInput = el("input", { id: "k-input", type: "number", min: "2", value: "2", size: "3" });
  const splitBtn = el("button", { id: "split-btn" }, "Split");
  const revokeBtn = el("button", { id: "revoke-btn" }, "Revoke");
  treeControls.append("k ", kInput, " ", splitBtn, " ", revokeBtn);
  const treeBody = el("div", { id: "tree-body" });
  treePanel.append(treeTitle, treeControls, treeBody);

  const projPanel = el("section", { class: "panel", id: "projection-panel" });
  projPanel.append(el("h2", {}, "Latent projection"));
  const projBody = el("div", { id: "projection-body" });
  projPanel.append(projBody);

  const physPanel = el("section", { class: "panel", id: "physical-panel" });
  const physTitle = el("h2", {}, "Physical view");
  const attrSel = el("select", { id: "attr-select" });
  const physBody = el("div", { id: "physical-body" });
  physPanel.append(physTitle, attrSel, physBody);

  const trackPanel = el("section", { class: "panel", id: "tracking-panel" });
  trackPanel.append(el("h2", {}, "Tracking"));
  const trackBody = el("div", { id: "tracking-body" });
  trackPanel.append(trackBody);

  grid.append(treePanel, projPanel, physPanel, trackPanel);
  root.append(banner, header, modelBar, grid);

  // -- error surface

  function showError(err: unknown): void {
    const message = err instanceof ApiError ? err.message
      : err instanceof Error ? err.message : String(err);
    store.update({ banner: message });
  }

  function guarded(fn: () => Promise<void>): Promise<void> {
    return fn().catch(showError);
  }

  // -- job polling (500 ms)

  function pollJob(jobId: string, onTick?: (st: JobStatus) => void): Promise<JobStatus> {
    return new Promise((resolve, reject) => {
      const timer = setInterval(async () => {
        try {
          const st = await api.jobStatus(jobId);
          onTick?.(st);
          if (st.state === "done" || st.state === "failed") {
            clearInterval(timer);
            pollTimers.delete(timer);
            resolve(st);
          }
        } catch (err) {
          clearInterval(timer);
          pollTimers.delete(timer);
          reject(err);
        }
      }, pollMs);
      pollTimers.add(timer);
    });
  }

  // -- data loading

  async function loadParticles(frameId: number, nodeId: number): Promise<void> {
    const s = store.state;
    if (!s.session) return;
    const key = `${frameId}:${nodeId}:${s.colorAttr ?? ""}`;
    let data = particleCache.get(key);
    if (!data) {
      const payload = await api.getParticles(s.session, frameId, nodeId, s.colorAttr);
      data = {
        frame: payload.frame,
        node: payload.node,
        attr: payload.attr,
        positions: b64ToFloat32(payload.positions_b64),
        values: b64ToFloat32(payload.values_b64),
      };
      particleCache.set(key, data);
    }
    physical = data;
    store.update({});
  }

  async function loadProjection(frameId: number): Promise<void> {
    const s = store.state;
    if (!s.session) return;
    const projection = await api.getProjection(
      s.session, frameId, PROJECTION_FRACTION, PROJECTION_PERPLEXITY, PROJECTION_SEED);
    store.update({ projection });
  }

  async function loadFrame(frameId: number): Promise<void> {
    const s = store.state;
    if (!s.session) return;
    const tree = await api.getTree(s.session, frameId);
    store.update({ frame: frameId, tree, projection: null });
    if (tree.has_latents) {
      await loadProjection(frameId);
    }
    await loadParticles(frameId, store.state.selectedNode);
  }

  // -- actions (one service call per user action)

  const actions: AppActions = {
    async connect(datasetDir: string): Promise<void> {
      await guarded(async () => {
        const info = await api.createSession(datasetDir);
        const firstFrame = info.frames.length ? info.frames[0].id : 0;
        const firstAttr = info.frames.length ? info.frames[0].attr_names[0] : null;
        store.update({
          session: info.session,
          frames: info.frames,
          colorAttr: firstAttr,
          trace: null,
          trackStatus: null,
          region: null,
        });
        await loadFrame(firstFrame);
      });
    },

    async selectFrame(frameId: number): Promise<void> {
      await guarded(() => loadFrame(frameId));
    },

    async train(params): Promise<void> {
      await guarded(async () => {
        const s = store.state;
        if (!s.session) throw new Error("no session");
        const job = await api.startTrain(s.session, {
          radius: params.radius,
          latent_dim: params.latent_dim,
          epochs: params.epochs,
          batch_size: 32,
          sample_fraction: params.sample_fraction,
          seed: 0,
        });
        jobLabel.textContent = "training...";
        const st = await pollJob(job, (tick) => {
          if (tick.epoch !== undefined) jobLabel.textContent = `training epoch ${tick.epoch}`;
        });
        jobLabel.textContent = st.state === "done" ? "trained" : `train failed: ${st.error}`;
        if (st.state === "failed") throw new ApiError(500, "train_failed", st.error ?? "training failed");
      });
    },

    async infer(): Promise<void> {
      await guarded(async () => {
        const s = store.state;
        if (!s.session) throw new Error("no session");
        const job = await api.startInfer(s.session, s.frame);
        jobLabel.textContent = "inferring...";
        const st = await pollJob(job);
        jobLabel.textContent = st.state === "done" ? "latents ready" : `infer failed: ${st.error}`;
        if (st.state === "failed") throw new ApiError(500, "infer_failed", st.error ?? "inference failed");
        await loadFrame(s.frame);
      });
    },

    async selectNode(nodeId: number): Promise<void> {
      store.update({ selectedNode: nodeId });
      await guarded(() => loadParticles(store.state.frame, store.state.selectedNode));
    },

    async split(): Promise<void> {
      const s = store.state;
      if (s.mutationInFlight || !s.session || !s.tree) return;
      store.update({ mutationInFlight: true });
      try {
        const tree = await api.splitNode(s.session, s.frame, s.selectedNode, s.pendingK, 0);
        store.update({ tree });
        await loadProjection(s.frame);
      } catch (err) {
        showError(err);
      } finally {
        store.update({ mutationInFlight: false });
      }
    },

    async revoke(): Promise<void> {
      const s = store.state;
      if (s.mutationInFlight || !s.session || !s.tree) return;
      store.update({ mutationInFlight: true });
      try {
        const tree = await api.revokeNode(s.session, s.frame, s.selectedNode);
        store.update({ tree });
        await loadProjection(s.frame);
      } catch (err) {
        showError(err);
      } finally {
        store.update({ mutationInFlight: false });
      }
    },

    async setColorAttr(attr: string): Promise<void> {
      store.update({ colorAttr: attr });
      await guarded(() => loadParticles(store.state.frame, store.state.selectedNode));
    },

    async startTrack(frameStart: number, frameEnd: number): Promise<void> {
      await guarded(async () => {
        const s = store.state;
        if (!s.session) throw new Error("no session");
        if (!s.region) throw new Error("no region selected");
        const job = await api.startTrack(s.session, {
          frame_start: frameStart,
          frame_end: frameEnd,
          region_center: s.region.center,
          half_extent: s.region.halfExtent,
        });
        store.update({ trackStatus: "tracking...", trace: null, playCursor: 0, playing: false });
        const st = await pollJob(job, (tick) => {
          store.update({ trackStatus: `tracking (${tick.state})` });
        });
        if (st.state === "failed") {
          store.update({ trackStatus: `failed: ${st.error}` });
          throw new ApiError(500, "track_failed", st.error ?? "tracking failed");
        }
        const result = st.result as { trace: import("./api.js").TraceEntry[] };
        store.update({
          trace: result.trace,
          playCursor: 0,
          trackStatus: `done (${result.trace.length} steps)`,
        });
      });
    },

    playToggle(): void {
      const playing = !store.state.playing;
      store.update({ playing });
      if (playTimer) {
        clearInterval(playTimer);
        playTimer = null;
      }
      if (playing) {
        playTimer = setInterval(() => {
          const s = store.state;
          if (!s.trace || s.playCursor >= s.trace.length - 1) {
            if (playTimer) clearInterval(playTimer);
            playTimer = null;
            store.update({ playing: false });
            return;
          }
          void actions.scrub(s.playCursor + 1);
        }, pollMs);
      }
    },

    async scrub(cursor: number): Promise<void> {
      store.update({ playCursor: cursor });
      const s = store.state;
      if (s.trace && s.trace.length > 0) {
        // playback shows each trace step over that step's own frame
        const frameId = s.trace[s.playCursor].t;
        await guarded(() => loadParticles(frameId, 0));
      }
    },

    dismissBanner(): void {
      store.update({ banner: null });
    },
  };

  // -- static control wiring

  connectBtn.addEventListener("click", () => void actions.connect(datasetInput.value));
  frameSel.addEventListener("change", () => void actions.selectFrame(Number(frameSel.value)));
  trainBtn.addEventListener("click", () => void actions.train({
    radius: Number(radiusInput.value),
    latent_dim: Number(dimInput.value),
    epochs: Number(epochsInput.value),
    sample_fraction: Number(fracInput.value),
  }));
  inferBtn.addEventListener("click", () => void actions.infer());
  kInput.addEventListener("change", () => store.update({ pendingK: Math.max(2, Number(kInput.value)) }));
  splitBtn.addEventListener("click", () => void actions.split());
  revokeBtn.addEventListener("click", () => void actions.revoke());
  attrSel.addEventListener("change", () => void actions.setColorAttr(attrSel.value));
  bannerClose.addEventListener("click", () => actions.dismissBanner());

  // -- render loop

  function currentBox(): BoxMarker | null {
    const s = store.state;
    if (s.trace && s.trace.length > 0) {
      const half = s.region ? s.region.halfExtent : [0.05, 0.05, 0.05] as [number, number, number];
      return { center: s.trace[s.playCursor].center, halfExtent: half, kind: "trace" };
    }
    if (s.region) {
      return { center: s.region.center, halfExtent: s.region.halfExtent, kind: "region" };
    }
    return null;
  }

  function render(): void {
    const s = store.state;

    if (s.banner) {
      banner.removeAttribute("hidden");
      bannerText.textContent = s.banner;
    } else {
      banner.setAttribute("hidden", "");
    }

    sessionLabel.textContent = s.session ? ` session ${s.session}` : " no session";
    if (frameSel.children.length !== s.frames.length) {
      frameSel.textContent = "";
      for (const f of s.frames) {
        const opt = el("option", { value: String(f.id) }, `frame ${f.id}`);
        frameSel.appendChild(opt);
      }
    }
    frameSel.value = String(s.frame);

    if (attrSel.children.length !== (s.frames[0]?.attr_names.length ?? 0)) {
      attrSel.textContent = "";
      for (const a of s.frames[0]?.attr_names ?? []) {
        attrSel.appendChild(el("option", { value: a }, a));
      }
    }
    if (s.colorAttr) attrSel.value = s.colorAttr;

    splitBtn.toggleAttribute("disabled", s.mutationInFlight || !s.tree?.has_latents);
    revokeBtn.toggleAttribute("disabled", s.mutationInFlight || !s.tree);

    renderTree(treeBody, s.tree, s.selectedNode, {
      onSelect: (id) => void actions.selectNode(id),
    });
    renderProjection(projBody, s.projection, s.highlighted);
    renderPhysical(physBody, physical, s.camera, currentBox(), {
      onCamera: (camera) => store.update({ camera }),
      onRegion: (region) => store.update({ region }),
    });
    renderTracking(trackBody, s.frames, s.region, s.trace, s.playCursor, s.playing,
      s.trackStatus, {
        onStart: (a, b) => void actions.startTrack(a, b),
        onPlayToggle: () => actions.playToggle(),
        onScrub: (c) => void actions.scrub(c),
      });
  }

  const unsubscribe = store.subscribe(render);
  render();

  return {
    store,
    actions,
    dispose(): void {
      unsubscribe();
      if (playTimer) clearInterval(playTimer);
      for (const t of pollTimers) clearInterval(t);
      pollTimers.clear();
    },
  };
}
