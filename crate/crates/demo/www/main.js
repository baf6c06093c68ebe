import init, { synth_affinity, sparsify_incidence, train_forecast } from "./pkg/sthyper_demo.js";

const COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const num = (id) => Number(document.getElementById(id).value);

function call(fn, ...args) {
  const out = JSON.parse(fn(...args));
  if (out.error) throw new Error(out.error);
  return out;
}

function lines(canvas, series, colors) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const all = series.flat().filter(Number.isFinite);
  const lo = Math.min(...all), hi = Math.max(...all);
  const len = Math.max(...series.map((s) => s.length));
  const x = (i) => (i / Math.max(len - 1, 1)) * (canvas.width - 10) + 5;
  const y = (v) => canvas.height - 5 - ((v - lo) / (hi - lo || 1)) * (canvas.height - 10);
  series.forEach((s, n) => {
    ctx.strokeStyle = colors[n];
    ctx.beginPath();
    s.forEach((v, i) => {
      if (!Number.isFinite(v)) return;
      i === 0 || !Number.isFinite(s[i - 1]) ? ctx.moveTo(x(i), y(v)) : ctx.lineTo(x(i), y(v));
    });
    ctx.stroke();
  });
}

function heatmap(canvas, m) {
  const ctx = canvas.getContext("2d");
  const rows = m.length, cols = m[0].length;
  const w = canvas.width / cols, h = canvas.height / rows;
  const hi = Math.max(...m.flat()) || 1;
  m.forEach((row, i) =>
    row.forEach((v, j) => {
      const shade = Math.round(255 * (1 - v / hi));
      ctx.fillStyle = `rgb(${shade},${shade},255)`;
      ctx.fillRect(j * w, i * h, w, h);
    }));
}

function showAffinity() {
  const out = call(synth_affinity, num("groups"), num("vpg"), num("length"), num("noise"), BigInt(num("seed")));
  lines(document.getElementById("series"), out.series, out.labels.map((g) => COLORS[g % COLORS.length]));
  heatmap(document.getElementById("affinity"), out.affinity);
}

function showIncidence() {
  const out = call(sparsify_incidence, num("alpha"), num("beta"), num("k"), BigInt(Date.now() % 100000));
  heatmap(document.getElementById("dense"), out.dense);
  heatmap(document.getElementById("sparse"), out.sparse);
}

function showTraining() {
  const summary = document.getElementById("train-summary");
  summary.textContent = "training...";
  setTimeout(() => {
    const out = call(train_forecast, num("epochs"), 0.1, BigInt(num("model-seed")));
    lines(document.getElementById("loss"), [out.train_loss, out.val_loss], ["#1f77b4", "#d62728"]);
    // First variable: observed input, then target and forecast after it.
    const pad = out.input[0].map(() => NaN);
    const observed = out.input[0].concat(out.target[0].map(() => NaN));
    lines(document.getElementById("forecast"),
      [observed, pad.concat(out.target[0]), pad.concat(out.forecast[0])],
      ["#555", "#2ca02c", "#d62728"]);
    summary.textContent =
      `best epoch ${out.best_epoch}\n` +
      `window MAE ${out.mae.toFixed(4)} (persistence ${out.persistence_mae.toFixed(4)})\n` +
      `learned groups ${out.groups.join(" ")} (ARI ${out.ari.toFixed(3)})\n` +
      `temporal weights ${out.omega.map((w) => w.map((v) => v.toFixed(3)).join("/")).join("  ")}`;
  }, 20);
}

function guard(fn) {
  return () => {
    try {
      fn();
    } catch (e) {
      document.getElementById("train-summary").textContent = `error: ${e.message}`;
    }
  };
}

await init();
document.getElementById("run-affinity").onclick = guard(showAffinity);
document.getElementById("run-incidence").onclick = guard(showIncidence);
document.getElementById("run-train").onclick = guard(showTraining);
showAffinity();
showIncidence();
