// Single view-state store. The server is the only source of analytic truth:
// every field here is either a server response kept verbatim or pure view
// chrome (camera, cursors, pending inputs).

import type { FrameMeta, Projection, TraceEntry, TreePayload } from "./api.js";
import { decodeRanges } from "./api.js";

export interface Camera {
  yaw: number;
  pitch: number;
  zoom: number;
}

export interface Region {
  center: [number, number, number];
  halfExtent: [number, number, number];
}

export interface ViewState {
  session: string | null;
  frames: FrameMeta[];
  frame: number;
  tree: TreePayload | null;
  selectedNode: number;
  projection: Projection | null;
  // particle indices of the selected node's members within the projection
  // sample; always a subset of projection.indices
  highlighted: Set<number>;
  camera: Camera;
  colorAttr: string | null;
  pendingK: number;
  region: Region | null;
  trace: TraceEntry[] | null;
  playCursor: number;
  playing: boolean;
  trackStatus: string | null;
  mutationInFlight: boolean;
  banner: string | null;
}

export function initialState(): ViewState {
  return {
    session: null,
    frames: [],
    frame: 0,
    tree: null,
    selectedNode: 0,
    projection: null,
    highlighted: new Set(),
    camera: { yaw: 0.6, pitch: 0.35, zoom: 1.0 },
    colorAttr: null,
    pendingK: 2,
    region: null,
    trace: null,
    playCursor: 0,
    playing: false,
    trackStatus: null,
    mutationInFlight: false,
    banner: null,
  };
}

// Member particle set of a node, decoded from the server's range encoding.
export function nodeMembers(tree: TreePayload, nodeId: number): Set<number> {
  const node = tree.nodes.find((n) => n.id === nodeId);
  if (!node) return new Set();
  return new Set(decodeRanges(node.members));
}

// The highlight contract: particles of the selected node that are also in
// the projection sample, both sides taken from server responses as-is.
export function memberSampleIntersection(
  tree: TreePayload,
  nodeId: number,
  sampleIndices: number[],
): Set<number> {
  const members = nodeMembers(tree, nodeId);
  const out = new Set<number>();
  for (const idx of sampleIndices) {
    if (members.has(idx)) out.add(idx);
  }
  return out;
}

export type Listener = (state: ViewState) => void;

export class Store {
  state: ViewState = initialState();
  private listeners: Listener[] = [];

  subscribe(fn: Listener): () => void {
    this.listeners.push(fn);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== fn);
    };
  }

  update(patch: Partial<ViewState>): void {
    Object.assign(this.state, patch);
    this.enforceInvariants();
    for (const fn of this.listeners) fn(this.state);
  }

  // invariants: the selected node exists in the last-fetched tree, and the
  // highlight set is exactly the member/sample intersection for it
  private enforceInvariants(): void {
    const s = this.state;
    if (s.tree) {
      if (!s.tree.nodes.some((n) => n.id === s.selectedNode)) {
        s.selectedNode = 0;
      }
    } else {
      s.selectedNode = 0;
    }
    if (s.tree && s.projection) {
      s.highlighted = memberSampleIntersection(s.tree, s.selectedNode, s.projection.indices);
    } else {
      s.highlighted = new Set();
    }
    if (s.trace) {
      s.playCursor = Math.max(0, Math.min(s.playCursor, s.trace.length - 1));
    } else {
      s.playCursor = 0;
      s.playing = false;
    }
  }
}
