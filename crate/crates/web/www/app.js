import init, { bounds, sweep, tta } from "./pkg/shiftap_web.js";

const $ = (id) => document.getElementById(id);
const canvas = $("canvas");
const ctx = canvas.getContext("2d");
const pct = (v) => (100 * v).toFixed(1);

function settings() {
  const num = (id) => Number($(id).value);
  return JSON.stringify({
    n_images: num("n_images"),
    max_shift: num("max_shift"),
    n_categories: num("n_categories"),
    box_jitter_sigma: num("box_jitter_sigma"),
    score_jitter_sigma: num("score_jitter_sigma"),
    drop_prob: { kind: $("drop_kind").value, p: num("drop_p") },
    fp_rate: num("fp_rate"),
    seed: num("seed"),
  });
}

function run(action) {
  $("error").textContent = "";
  try {
    action();
  } catch (e) {
    $("error").textContent = e.message ?? String(e);
  }
}

function clear() {
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  $("legend").textContent = "";
}

// Grid of shifts, shaded by how many images the search sent there.
function drawShiftGrid(counts, side, x0, title) {
  const cell = Math.min(40, 300 / side);
  const max = Math.max(1, ...counts);
  ctx.fillStyle = "#222";
  ctx.fillText(title, x0, 20);
  for (let dy = 0; dy < side; dy++) {
    for (let dx = 0; dx < side; dx++) {
      const c = counts[dy * side + dx];
      ctx.fillStyle = `rgba(30, 90, 200, ${0.1 + 0.9 * (c / max)})`;
      ctx.fillRect(x0 + dx * cell, 30 + dy * cell, cell - 2, cell - 2);
      if (cell >= 24) {
        ctx.fillStyle = "#000";
        ctx.fillText(String(c), x0 + dx * cell + 4, 30 + dy * cell + cell / 2);
      }
    }
  }
}

function showBounds() {
  const v = JSON.parse(bounds(settings(), Number($("iterations").value)));
  $("summary").textContent =
    `AP50 ${pct(v.baseline.ap50)} (worst ${pct(v.worst.ap50)}, best ${pct(v.best.ap50)}, ` +
    `delta ${pct(v.delta_ap50)}); AP ${pct(v.baseline.ap)} (delta ${pct(v.delta_ap)}); ` +
    `${v.eval_count} candidate evaluations per direction`;
  clear();
  const side = v.max_shift + 1;
  drawShiftGrid(v.worst_shift_counts, side, 20, "worst assignment: images per (dx, dy)");
  drawShiftGrid(v.best_shift_counts, side, 340, "best assignment: images per (dx, dy)");
  $("csv").textContent = v.csv;
}

function showSweep() {
  const shifts = $("shifts").value.split(",").map((s) => Number(s.trim())).filter((n) => Number.isInteger(n));
  const v = JSON.parse(sweep(settings(), Uint32Array.from(shifts)));
  clear();
  const rows = v.rows;
  const lines = [
    ["worst AP50", "#c33", (r) => r.worst_ap50 - r.baseline_ap50],
    ["best AP50", "#36c", (r) => r.best_ap50 - r.baseline_ap50],
    ["worst AP", "#e99", (r) => r.worst_ap - r.baseline_ap],
    ["best AP", "#9bd", (r) => r.best_ap - r.baseline_ap],
  ];
  const values = rows.flatMap((r) => lines.map(([, , f]) => f(r)));
  const lo = Math.min(0, ...values), hi = Math.max(0, ...values);
  const maxShift = Math.max(1, ...rows.map((r) => r.max_shift));
  const px = (m) => 50 + (m / maxShift) * (canvas.width - 80);
  const py = (d) => canvas.height - 30 - ((d - lo) / (hi - lo || 1)) * (canvas.height - 60);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(px(0), py(0));
  ctx.lineTo(px(maxShift), py(0));
  ctx.stroke();
  ctx.fillStyle = "#222";
  for (const r of rows) ctx.fillText(String(r.max_shift), px(r.max_shift) - 3, canvas.height - 10);
  ctx.fillText(`+${pct(hi)}`, 5, py(hi) + 4);
  ctx.fillText(pct(lo), 5, py(lo) + 4);
  for (const [name, color, f] of lines) {
    ctx.strokeStyle = color;
    ctx.lineWidth = 2;
    ctx.beginPath();
    rows.forEach((r, i) => (i ? ctx.lineTo : ctx.moveTo).call(ctx, px(r.max_shift), py(f(r))));
    ctx.stroke();
    const span = document.createElement("span");
    span.style.color = color;
    span.textContent = `■ ${name}`;
    $("legend").appendChild(span);
  }
  ctx.lineWidth = 1;
  $("summary").textContent = "Difference to the unshifted baseline, AP points, per maximum shift.";
  $("csv").textContent = v.table + "\n" + v.series;
}

function showTta() {
  const v = JSON.parse(tta(settings(), Number($("nms_iou").value), $("class_aware").checked, Number($("image_index").value)));
  $("summary").textContent =
    `AP50 ${pct(v.baseline.ap50)} unshifted, ${pct(v.tta.ap50)} after merging all shifts; ` +
    `AP ${pct(v.baseline.ap)} / ${pct(v.tta.ap)}. Image ${v.image_id}: ${v.pooled.length} pooled boxes, ` +
    `${v.kept.length} kept (${v.nms_only_zero_shift} from the unshifted copy alone).`;
  clear();
  const scale = Math.min(canvas.width / 2, canvas.height) / v.image_size;
  const panel = (x0, boxes, title, style) => {
    ctx.fillStyle = "#222";
    ctx.fillText(title, x0 + 4, 12);
    ctx.strokeStyle = "#ccc";
    ctx.strokeRect(x0, 16, v.image_size * scale, v.image_size * scale);
    for (const g of v.ground_truth) {
      ctx.strokeStyle = "#2a2";
      ctx.lineWidth = 2;
      ctx.strokeRect(x0 + g.bbox[0] * scale, 16 + g.bbox[1] * scale, g.bbox[2] * scale, g.bbox[3] * scale);
    }
    ctx.lineWidth = 1;
    for (const b of boxes) {
      ctx.strokeStyle = style(b);
      ctx.strokeRect(x0 + b.bbox[0] * scale, 16 + b.bbox[1] * scale, b.bbox[2] * scale, b.bbox[3] * scale);
    }
  };
  panel(0, v.pooled, "all shifts", (b) => `rgba(200, 60, 60, ${0.2 + 0.8 * b.score})`);
  panel(canvas.width / 2, v.kept, "after NMS", () => "#36c");
  $("legend").innerHTML = '<span style="color:#2a2">■ ground truth</span><span style="color:#c33">■ detection (opacity = score)</span>';
  $("csv").textContent = "";
}

await init();
ctx.font = "12px system-ui, sans-serif";
$("run_bounds").onclick = () => run(showBounds);
$("run_sweep").onclick = () => run(showSweep);
$("run_tta").onclick = () => run(showTta);
run(showBounds);
