import init, { core_subgraph, balance_cohort, pretrain_curve } from "./pkg/tosg_demo.js";

const $ = (id) => document.getElementById(id);
const SVG = "http://www.w3.org/2000/svg";
const num = (id) => Number($(id).value);

function el(tag, attrs, parent) {
  const e = document.createElementNS(SVG, tag);
  for (const [k, v] of Object.entries(attrs)) e.setAttribute(k, v);
  parent.appendChild(e);
  return e;
}

function fail(info, err) {
  info.textContent = String(err.message ?? err);
  info.className = "err";
}

// nodes on a circle, heavier edges drawn thicker
function drawCore(view) {
  const svg = $("core-svg");
  svg.replaceChildren();
  const w = svg.width.baseVal.value, h = svg.height.baseVal.value;
  const r = Math.min(w, h) / 2 - 50;
  const pos = new Map();
  view.nodes.forEach((n, i) => {
    const a = (2 * Math.PI * i) / view.nodes.length - Math.PI / 2;
    pos.set(n.gene, [w / 2 + r * Math.cos(a), h / 2 + r * Math.sin(a)]);
  });
  const wmax = Math.max(1e-9, ...view.edges.map((e) => e[2]));
  for (const [a, b, wt] of view.edges) {
    const [x1, y1] = pos.get(a), [x2, y2] = pos.get(b);
    el("line", { x1, y1, x2, y2, stroke: "#789", "stroke-width": 0.5 + 4 * (wt / wmax) }, svg);
  }
  const imax = Math.max(1e-9, ...view.nodes.map((n) => n.importance));
  const planted = new Set(view.planted);
  for (const n of view.nodes) {
    const [x, y] = pos.get(n.gene);
    el("circle", {
      cx: x, cy: y, r: 6 + 10 * (n.importance / imax),
      fill: planted.has(n.gene) ? "#e07040" : "#8ab",
      stroke: n.significant ? "#000" : "none", "stroke-width": 2,
    }, svg);
    el("text", { x: x + 14, y: y + 4, "font-size": 12 }, svg).textContent = n.gene;
  }
}

function runCore() {
  const info = $("core-info");
  info.className = "note";
  try {
    const view = JSON.parse(core_subgraph(num("xi"), num("eps"), num("core-seed")));
    const hits = view.nodes.filter((n) => view.planted.includes(n.gene)).length;
    info.textContent = `${view.nodes.length} nodes, ${view.edges.length} edges; ` +
      `${hits} of ${view.planted.length} planted genes recovered (orange); ` +
      `outlined nodes have p < 0.05; head training accuracy ${view.train_accuracy.toFixed(2)}`;
    drawCore(view);
  } catch (e) {
    fail(info, e);
    $("core-svg").replaceChildren();
  }
}

function runBalance() {
  const info = $("bal-info");
  info.className = "note";
  const table = $("bal-table");
  try {
    const view = JSON.parse(balance_cohort(num("delta"), $("upsample").checked, num("bal-seed")));
    info.textContent = `${view.strata.length} strata kept, ${view.discarded} discarded; ` +
      `${view.cases} cases vs ${view.controls} controls over ${view.distinct_rows} distinct cells`;
    table.replaceChildren();
    const head = table.insertRow();
    for (const t of ["tissue / cell type / sex / stage", "cases", "controls"]) {
      head.appendChild(document.createElement("th")).textContent = t;
    }
    for (const s of view.strata) {
      const row = table.insertRow();
      for (const v of [s.key, s.cases, s.controls]) row.insertCell().textContent = v;
    }
  } catch (e) {
    fail(info, e);
    table.replaceChildren();
  }
}

function polyline(svg, xs, ys, ymin, ymax, color) {
  const w = svg.width.baseVal.value, h = svg.height.baseVal.value, pad = 30;
  const xmax = Math.max(1, xs[xs.length - 1]);
  const pts = xs.map((x, i) => {
    const px = pad + (w - 2 * pad) * (x / xmax);
    const py = h - pad - (h - 2 * pad) * ((ys[i] - ymin) / Math.max(1e-9, ymax - ymin));
    return `${px},${py}`;
  });
  el("polyline", { points: pts.join(" "), fill: "none", stroke: color, "stroke-width": 2 }, svg);
}

function runPretrain() {
  const info = $("pre-info");
  info.className = "note";
  const svg = $("pre-svg");
  svg.replaceChildren();
  try {
    const view = JSON.parse(pretrain_curve(num("epochs"), num("lr"), num("mask"), 0));
    if (view.epochs.length === 0) {
      info.textContent = "zero epochs: the initial model is returned untrained";
      return;
    }
    polyline(svg, view.epochs, view.loss, Math.min(...view.loss), Math.max(...view.loss), "#c55");
    polyline(svg, view.epochs, view.auc, 0.4, 1.0, "#27a");
    const fin = view.final_auc == null ? "n/a" : view.final_auc.toFixed(3);
    const rec = view.recovered == null ? "n/a" : view.recovered.toFixed(3);
    info.textContent = `red: training loss, blue: masked-edge AUC; held-out AUC ${fin}, recovered ${rec}`;
  } catch (e) {
    fail(info, e);
  }
}

await init();
$("core-run").onclick = runCore;
$("bal-run").onclick = runBalance;
$("pre-run").onclick = runPretrain;
runCore();
runBalance();
runPretrain();
