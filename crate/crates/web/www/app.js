import init, { preset, solveExpert, trainCompare, verifyIdentity } from "./pkg/sqil_web.js";

const $ = (id) => document.getElementById(id);
const CELL = 56;
const COLORS = { wall: "#444", goal: "#3a3", hazard: "#d44" };

function status(msg) { $("status").textContent = msg || ""; }

function run(fn) {
  status("working...");
  // let the status paint before blocking the thread
  setTimeout(() => {
    try { fn(); status(""); } catch (e) { status(String(e.message || e)); }
  }, 10);
}

function board(title, lines, layout, arrows, values, visited) {
  const div = document.createElement("div");
  div.className = "board";
  const h = document.createElement("h3");
  h.textContent = title;
  div.appendChild(h);
  const canvas = document.createElement("canvas");
  canvas.width = layout.width * CELL;
  canvas.height = layout.height * CELL;
  div.appendChild(canvas);
  for (const line of lines) {
    const p = document.createElement("p");
    p.textContent = line;
    div.appendChild(p);
  }
  const ctx = canvas.getContext("2d");
  const finite = values.filter((v) => v !== null);
  const lo = Math.min(...finite), hi = Math.max(...finite);
  ctx.textAlign = "center";
  ctx.textBaseline = "middle";
  layout.kinds.forEach((kind, c) => {
    // cell rows count up from the bottom
    const x = (c % layout.width) * CELL, y = (layout.height - 1 - Math.floor(c / layout.width)) * CELL;
    if (COLORS[kind]) {
      ctx.fillStyle = COLORS[kind];
    } else {
      const t = hi > lo ? (values[c] - lo) / (hi - lo) : 0.5;
      ctx.fillStyle = `hsl(210, 60%, ${92 - 40 * t}%)`;
    }
    ctx.fillRect(x, y, CELL, CELL);
    ctx.strokeStyle = visited && visited.has(c) ? "#fa0" : "#fff";
    ctx.lineWidth = visited && visited.has(c) ? 3 : 1;
    ctx.strokeRect(x + 1, y + 1, CELL - 2, CELL - 2);
    ctx.fillStyle = "#000";
    if (arrows[c]) {
      ctx.font = "24px sans-serif";
      ctx.fillText(arrows[c], x + CELL / 2, y + CELL / 2);
    }
    const tag = layout.demo_init.includes(c) ? "D" : layout.train_init.includes(c) ? "T" : "";
    if (tag) {
      ctx.font = "bold 12px sans-serif";
      ctx.fillText(tag, x + 9, y + 10);
    }
  });
  return div;
}

const pct = (m) => (m ? `${(100 * m.success).toFixed(0)}% success, return ${m.return.toFixed(1)}` : "n/a");

function loadPreset() {
  $("scenario").value = preset($("preset").value);
  $("boards").innerHTML = "";
}

function solve() {
  const r = JSON.parse(solveExpert($("scenario").value, Number($("expert-gamma").value), 200, 0));
  $("boards").replaceChildren(board("expert", [
    `from D: ${pct(r.demo_init)}`,
    `from T: ${pct(r.train_init)}`,
  ], r.layout, r.arrows, r.values));
}

function train() {
  const r = JSON.parse(trainCompare(
    $("scenario").value, $("methods").value,
    BigInt($("seed").value), Number($("demos").value), Number($("steps").value)));
  const visited = new Set(r.visited);
  const boards = r.methods.map((m) => board(m.method, [
    `from D: ${pct(m.demo_init)}`,
    `from T: ${pct(m.train_init)}`,
    `${m.steps} steps, final loss ${m.final_loss.toFixed(3)}`,
  ], r.layout, m.arrows, m.values, visited));
  const note = document.createElement("p");
  note.textContent = `expert demos: ${pct(r.expert)}; orange outline = states in the demonstrations; best checkpoint shown`;
  $("boards").replaceChildren(note, ...boards);
}

function identity() {
  const r = JSON.parse(verifyIdentity(BigInt($("id-seed").value)));
  const fmt = (xs) => xs.map((x) => x.toFixed(5)).join(" ");
  $("identity-out").textContent =
    `${r.params} parameters, ${r.demo_transitions} demo transitions\n` +
    `analytic max rel. diff   ${r.analytic_discrepancy.toExponential(2)}\n` +
    `finite-diff max rel. diff ${r.fd_discrepancy.toExponential(2)}\n` +
    `RBC grad   ${fmt(r.lhs)}\nSQIL form  ${fmt(r.rhs)}`;
}

await init();
$("load").onclick = () => run(loadPreset);
$("solve").onclick = () => run(solve);
$("train").onclick = () => run(train);
$("identity").onclick = () => run(identity);
loadPreset();
