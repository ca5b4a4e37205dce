// Cluster tree panel: vertical layout with every leaf aligned on the
// bottom row. Renders only server-confirmed tree state.

import type { TreeNode, TreePayload } from "../api.js";

const SVG_NS = "http://www.w3.org/2000/svg";

interface LaidOutNode {
  node: TreeNode;
  x: number;
  y: number;
}

export function layoutTree(tree: TreePayload): Map<number, LaidOutNode> {
  const byId = new Map<number, TreeNode>();
  for (const n of tree.nodes) byId.set(n.id, n);

  const depth = new Map<number, number>();
  const xPos = new Map<number, number>();
  let leafCount = 0;
  let maxInternalDepth = 0;

  const visit = (id: number, d: number): number => {
    const node = byId.get(id);
    if (!node) return 0;
    depth.set(id, d);
    if (node.children.length === 0) {
      xPos.set(id, leafCount);
      leafCount += 1;
      return xPos.get(id)!;
    }
    maxInternalDepth = Math.max(maxInternalDepth, d);
    let sum = 0;
    for (const c of node.children) sum += visit(c, d + 1);
    const x = sum / node.children.length;
    xPos.set(id, x);
    return x;
  };
  visit(0, 0);

  const bottom = maxInternalDepth + 1;
  const out = new Map<number, LaidOutNode>();
  for (const n of tree.nodes) {
    const isLeaf = n.children.length === 0;
    const y = isLeaf ? (tree.nodes.length === 1 ? 0 : bottom) : depth.get(n.id)!;
    out.set(n.id, { node: n, x: xPos.get(n.id) ?? 0, y });
  }
  return out;
}

export interface TreeViewHandlers {
  onSelect(nodeId: number): void;
}

export function renderTree(
  container: HTMLElement,
  tree: TreePayload | null,
  selectedNode: number,
  handlers: TreeViewHandlers,
): void {
  container.textContent = "";
  if (!tree) {
    const empty = document.createElement("p");
    empty.className = "placeholder";
    empty.textContent = "no tree loaded";
    container.appendChild(empty);
    return;
  }

  const laid = layoutTree(tree);
  let maxX = 0;
  let maxY = 0;
  for (const { x, y } of laid.values()) {
    maxX = Math.max(maxX, x);
    maxY = Math.max(maxY, y);
  }
  const stepX = 86;
  const stepY = 78;
  const margin = 46;
  const width = maxX * stepX + 2 * margin;
  const height = maxY * stepY + 2 * margin;

  const svg = document.createElementNS(SVG_NS, "svg");
  svg.setAttribute("viewBox", `0 0 ${width} ${height}`);
  svg.setAttribute("class", "tree-svg");
  svg.setAttribute("data-testid", "tree-svg");

  const px = (x: number) => margin + x * stepX;
  const py = (y: number) => margin + y * stepY;

  for (const { node, x, y } of laid.values()) {
    for (const childId of node.children) {
      const child = laid.get(childId);
      if (!child) continue;
      const line = document.createElementNS(SVG_NS, "line");
      line.setAttribute("x1", String(px(x)));
      line.setAttribute("y1", String(py(y)));
      line.setAttribute("x2", String(px(child.x)));
      line.setAttribute("y2", String(py(child.y)));
      line.setAttribute("class", "tree-edge");
      svg.appendChild(line);
    }
  }

  for (const { node, x, y } of laid.values()) {
    const g = document.createElementNS(SVG_NS, "g");
    const isLeaf = node.children.length === 0;
    const classes = ["tree-node", isLeaf ? "leaf" : "internal"];
    if (node.id === selectedNode) classes.push("selected");
    g.setAttribute("class", classes.join(" "));
    g.setAttribute("data-node-id", String(node.id));
    g.setAttribute("data-n-members", String(node.n_members));
    g.setAttribute("data-row", String(y));
    g.setAttribute("transform", `translate(${px(x)},${py(y)})`);

    const circle = document.createElementNS(SVG_NS, "circle");
    circle.setAttribute("r", "17");
    g.appendChild(circle);

    const label = document.createElementNS(SVG_NS, "text");
    label.setAttribute("class", "node-id");
    label.setAttribute("text-anchor", "middle");
    label.setAttribute("dy", "4");
    label.textContent = String(node.id);
    g.appendChild(label);

    const count = document.createElementNS(SVG_NS, "text");
    count.setAttribute("class", "node-count");
    count.setAttribute("text-anchor", "middle");
    count.setAttribute("dy", "31");
    count.textContent = String(node.n_members);
    g.appendChild(count);

    g.addEventListener("click", () => handlers.onSelect(node.id));
    svg.appendChild(g);
  }

  container.appendChild(svg);
}
