import init, { attention, synth, train_both } from "./pkg/resvit_web.js";

const $ = (id) => document.getElementById(id);
const status = $("status");

function heatmap(values, rows, cols, cell, colour) {
  const c = document.createElement("canvas");
  c.width = cols * cell;
  c.height = rows * cell;
  const ctx = c.getContext("2d");
  let max = 0;
  for (const v of values) max = Math.max(max, v);
  for (let i = 0; i < rows; i++) {
    for (let j = 0; j < cols; j++) {
      ctx.fillStyle = colour(values[i * cols + j], max);
      ctx.fillRect(j * cell, i * cell, cell, cell);
    }
  }
  return c;
}

const blues = (v, max) => `hsl(215 80% ${96 - 66 * (max > 0 ? v / max : 0)}%)`;
const grays = (v) => `hsl(0 0% ${Math.round(100 * Math.min(1, Math.max(0, v)))}%)`;

function figure(canvas, caption, best) {
  const f = document.createElement("figure");
  if (best) f.className = "best";
  f.append(canvas);
  const cap = document.createElement("figcaption");
  cap.textContent = caption;
  f.append(cap);
  return f;
}

function guarded(fn) {
  return () => {
    try {
      fn();
      status.textContent = "";
    } catch (e) {
      status.textContent = String(e);
    }
  };
}

const drawAttention = guarded(() => {
  const n = +$("att-n").value;
  const view = JSON.parse(
    attention(n, +$("att-h").value, +$("att-s").value, $("att-p").value, +$("att-seed").value),
  );
  const cell = Math.max(4, Math.floor(160 / n));
  const out = $("att-out");
  out.replaceChildren();
  view.heads.forEach((h, i) => {
    const cap = `head ${i}: norm ${h.norm.toFixed(4)}${i === view.selected ? " (selected)" : ""}`;
    out.append(figure(heatmap(h.attention, n, n, cell, blues), cap, i === view.selected));
  });
});

const drawSynth = guarded(() => {
  const view = JSON.parse(synth(+$("syn-k").value, +$("syn-noise").value, +$("syn-seed").value));
  const out = $("syn-out");
  out.replaceChildren();
  for (const s of view.samples) {
    out.append(figure(heatmap(s.pixels, view.size, view.size, 5, grays), `class ${s.label}`));
  }
});

function plotCurves(curves) {
  const c = $("tr-plot");
  const ctx = c.getContext("2d");
  const pad = 30;
  const w = c.width - 2 * pad;
  const h = c.height - 2 * pad;
  ctx.clearRect(0, 0, c.width, c.height);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w, h);
  ctx.fillStyle = "#555";
  ctx.fillText("accuracy", 2, pad - 8);
  ctx.fillText("1", 18, pad + 4);
  ctx.fillText("0", 18, pad + h);
  const colours = { standard: "#1c7ed6", residual: "#d9480f" };
  for (const curve of curves) {
    for (const [key, dash] of [["train_accuracy", []], ["test_accuracy", [5, 4]]]) {
      const ys = curve[key];
      ctx.beginPath();
      ctx.setLineDash(dash);
      ctx.strokeStyle = colours[curve.variant];
      ys.forEach((y, i) => {
        const x = pad + (ys.length === 1 ? w / 2 : (i / (ys.length - 1)) * w);
        const py = pad + (1 - y) * h;
        if (i === 0) ctx.moveTo(x, py);
        else ctx.lineTo(x, py);
      });
      ctx.stroke();
    }
  }
  ctx.setLineDash([]);
  let y = pad + 14;
  for (const [name, col] of Object.entries(colours)) {
    ctx.fillStyle = col;
    ctx.fillText(`${name} (solid train, dashed test)`, pad + 10, y);
    y += 14;
  }
}

const runTraining = guarded(() => {
  const curves = JSON.parse(train_both(+$("tr-epochs").value, +$("tr-seed").value));
  plotCurves(curves);
  $("tr-summary").textContent = curves
    .map((c) => `${c.variant}: final test accuracy ${c.test_accuracy.at(-1).toFixed(3)}`)
    .join("; ");
});

await init();
for (const id of ["att-n", "att-h", "att-s", "att-p", "att-seed"]) $(id).addEventListener("input", drawAttention);
for (const id of ["syn-k", "syn-noise", "syn-seed"]) $(id).addEventListener("input", drawSynth);
$("tr-run").addEventListener("click", () => {
  status.textContent = "training…";
  setTimeout(runTraining, 10);
});
drawAttention();
drawSynth();
status.textContent = "";
