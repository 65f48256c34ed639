import init, { rate_curve, simulate_point, tradeoff, phase_histogram } from "./pkg/passive_bb84_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => parseFloat($(id).value);
const PAD = { l: 60, r: 60, t: 15, b: 35 };

function scale(canvas, xr, yr) {
  const w = canvas.width - PAD.l - PAD.r;
  const h = canvas.height - PAD.t - PAD.b;
  const sx = (x) => PAD.l + ((x - xr[0]) / (xr[1] - xr[0])) * w;
  const sy = (y) => PAD.t + h - ((y - yr[0]) / (yr[1] - yr[0])) * h;
  return { sx, sy };
}

function frame(canvas, xr, yr, xlabel, ylabel) {
  const g = canvas.getContext("2d");
  const w = canvas.width - PAD.l - PAD.r;
  const h = canvas.height - PAD.t - PAD.b;
  g.clearRect(0, 0, canvas.width, canvas.height);
  g.strokeStyle = "#888";
  g.strokeRect(PAD.l, PAD.t, w, h);
  g.fillStyle = "#222";
  g.font = "12px sans-serif";
  g.fillText(xlabel, PAD.l + w / 2 - 30, canvas.height - 6);
  g.fillText(ylabel, 4, PAD.t + 10);
  g.fillText(xr[0].toPrecision(3), PAD.l, PAD.t + h + 14);
  g.fillText(xr[1].toPrecision(3), PAD.l + w - 24, PAD.t + h + 14);
  g.fillText(yr[1].toPrecision(3), 4, PAD.t + 24);
  g.fillText(yr[0].toPrecision(3), 4, PAD.t + h);
  return { g, ...scale(canvas, xr, yr) };
}

function line(f, xs, ys, colour) {
  f.g.strokeStyle = colour;
  f.g.beginPath();
  xs.forEach((x, i) => (i ? f.g.lineTo(f.sx(x), f.sy(ys[i])) : f.g.moveTo(f.sx(x), f.sy(ys[i]))));
  f.g.stroke();
}

function columns(flat, width) {
  const cols = Array.from({ length: width }, () => []);
  flat.forEach((v, i) => cols[i % width].push(v));
  return cols;
}

let curve = null;
let simulated = [];

function linkArgs() {
  return [num("mu"), num("dphi"), num("vis"), num("f"), $("trusted").checked];
}

function drawCurve() {
  try {
    const [loss, rate, qber] = columns(rate_curve(...linkArgs(), 14, 0.25), 3);
    curve = { loss, rate, qber };
  } catch (e) {
    $("curveout").textContent = `error: ${e}`;
    return;
  }
  const top = Math.max(1, ...curve.rate, ...simulated.map((p) => p.rate + p.se));
  const f = frame($("curve"), [0, 14], [0, top], "channel loss (dB)", "bit/s");
  line(f, curve.loss, curve.rate, "#1f5fbf");
  f.g.fillStyle = "#c0392b";
  for (const p of simulated) {
    f.g.fillRect(f.sx(p.loss) - 3, f.sy(p.rate) - 3, 6, 6);
    f.g.strokeStyle = "#c0392b";
    f.g.beginPath();
    f.g.moveTo(f.sx(p.loss), f.sy(Math.max(0, p.rate - p.se)));
    f.g.lineTo(f.sx(p.loss), f.sy(p.rate + p.se));
    f.g.stroke();
  }
  const zero = curve.loss.find((_, i) => curve.rate[i] === 0);
  $("curveout").textContent =
    `0 dB: ${curve.rate[0].toFixed(1)} bit/s, model QBER ${(100 * curve.qber[0]).toFixed(2)}%` +
    (zero === undefined ? "" : `; no key from ${zero} dB`);
}

function simulate() {
  const loss = num("simloss");
  try {
    const [rate, se, qber, duty, bits] = simulate_point(7, num("simn") | 0, loss, ...linkArgs());
    simulated.push({ loss, rate, se });
    drawCurve();
    $("curveout").textContent +=
      `\nsimulated ${loss} dB: ${rate.toFixed(1)} ± ${se.toFixed(1)} bit/s, QBER ${(100 * qber).toFixed(2)}%, ` +
      `duty ${duty.toFixed(3)}, final key ${bits} bits`;
  } catch (e) {
    $("curveout").textContent = `error: ${e}`;
  }
}

function drawTradeoff() {
  const [t, , accept, qber] = columns(tradeoff(num("tvis"), 1.75, 1.995, 60), 4);
  const c = $("tradeoff");
  const f = frame(c, [t[0], t[t.length - 1]], [0, Math.max(...accept)], "comparator level (units of I)", "accepted/s");
  line(f, t, accept, "#1f5fbf");
  const qmax = Math.max(...qber) * 1.05;
  const q = { g: f.g, ...scale(c, [t[0], t[t.length - 1]], [0, qmax]) };
  line(q, t, qber, "#c0392b");
  f.g.fillStyle = "#c0392b";
  f.g.fillText(`QBER, red (axis top ${(100 * qmax).toFixed(1)}%)`, c.width - PAD.r - 130, PAD.t + 14);
}

function drawHistogram() {
  const bins = 40;
  const v = phase_histogram(num("hseed") | 0, num("hn") | 0, bins);
  const obs = Array.from(v.slice(0, bins));
  const exp = Array.from(v.slice(bins));
  const f = frame($("histogram"), [0, 2], [0, Math.max(...obs, ...exp)], "I(1 + cos Δφ) / I", "count");
  const w = (f.sx(2) - f.sx(0)) / bins;
  f.g.fillStyle = "#9db8e0";
  obs.forEach((o, k) => f.g.fillRect(f.sx((2 * k) / bins), f.sy(o), w - 1, f.sy(0) - f.sy(o)));
  line(f, exp.map((_, k) => (2 * (k + 0.5)) / bins), exp, "#c0392b");
}

await init();
for (const id of ["mu", "dphi", "vis", "f", "trusted"]) {
  $(id).addEventListener("input", () => {
    simulated = [];
    drawCurve();
  });
}
$("simulate").addEventListener("click", simulate);
$("trade").addEventListener("click", drawTradeoff);
$("hist").addEventListener("click", drawHistogram);
drawCurve();
drawTradeoff();
drawHistogram();
