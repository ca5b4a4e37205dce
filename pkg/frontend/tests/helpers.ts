import { vi } from "vitest";

import type { App } from "../src/app.js";
import { createApp } from "../src/app.js";
import { FakeService } from "./fake_service.js";

export async function flush(): Promise<void> {
  for (let i = 0; i < 16; i++) await Promise.resolve();
}

export function mountApp(fake: FakeService): { app: App; root: HTMLElement } {
  const root = document.createElement("div");
  document.body.appendChild(root);
  const app = createApp(root, fake, { pollMs: 500 });
  return { app, root };
}

// connect, train, and infer so the frame has latents and a projection
export async function bootWithLatents(
  fake: FakeService,
): Promise<{ app: App; root: HTMLElement }> {
  const { app, root } = mountApp(fake);
  await app.actions.connect("data/demo");
  let job = app.actions.train({ radius: 0.1, latent_dim: 4, epochs: 1, sample_fraction: 0.5 });
  await vi.advanceTimersByTimeAsync(600);
  await job;
  job = app.actions.infer();
  await vi.advanceTimersByTimeAsync(600);
  await job;
  return { app, root };
}

export function highlightedIndices(root: HTMLElement): Set<number> {
  const out = new Set<number>();
  for (const c of root.querySelectorAll(".proj-point.hl")) {
    out.add(Number(c.getAttribute("data-index")));
  }
  return out;
}

export function projectedIndices(root: HTMLElement): Set<number> {
  const out = new Set<number>();
  for (const c of root.querySelectorAll(".proj-point")) {
    out.add(Number(c.getAttribute("data-index")));
  }
  return out;
}

export function clickNode(root: HTMLElement, nodeId: number): void {
  const g = root.querySelector(`.tree-node[data-node-id="${nodeId}"]`);
  if (!g) throw new Error(`no rendered tree node ${nodeId}`);
  g.dispatchEvent(new MouseEvent("click", { bubbles: true }));
}

export function click(root: HTMLElement, selector: string): void {
  const btn = root.querySelector(selector);
  if (!btn) throw new Error(`no element ${selector}`);
  btn.dispatchEvent(new MouseEvent("click", { bubbles: true }));
}
