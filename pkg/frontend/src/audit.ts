// Audit screen: per-code evaluation table (kappa/F1 with CIs, tuned
// thresholds) and the rolling FP/FN drift curve as an inline SVG.

import { ApiClient, DriftDto, EvalReportDto } from "./api.js";
import { clear, el, fmt, fmtCi } from "./dom.js";

const SVG_NS = "http://www.w3.org/2000/svg";

export class AuditScreen {
  constructor(private api: ApiClient, private runId: string) {}

  async mount(root: HTMLElement): Promise<void> {
    clear(root);
    const [report, drift] = await Promise.all([
      this.api.evalReport(this.runId),
      this.api.drift(this.runId),
    ]);
    root.append(
      el("h2", {}, [`Audit — ${this.runId}`]),
      renderEvalTable(report),
      el("h3", {}, [`Drift (window ${drift.window})`]),
      renderDrift(drift),
    );
  }
}

export function renderEvalTable(report: EvalReportDto): HTMLTableElement {
  const body = el("tbody");
  for (const c of report.per_code) {
    const threshold = c.code_tuned_threshold ?? c.threshold_used;
    body.append(
      el("tr", { "data-code": c.code_id }, [
        el("td", {}, [c.code_id]),
        el("td", {}, [threshold === null ? "–" : String(threshold)]),
        el("td", { class: "kappa" }, [fmtCi(c.kappa, c.kappa_ci_95)]),
        el("td", { class: "f1" }, [fmtCi(c.f1, c.f1_ci_95)]),
        el("td", {}, [fmt(c.percent_agreement)]),
      ]),
    );
  }
  if (report.mean_kappa !== null) {
    body.append(
      el("tr", { class: "summary" }, [
        el("td", {}, ["mean"]),
        el("td", {}, [""]),
        el("td", {}, [fmt(report.mean_kappa)]),
        el("td", {}, [fmt(report.mean_f1)]),
        el("td", {}, [""]),
      ]),
    );
  }
  if (report.pooled_kappa !== null) {
    body.append(
      el("tr", { class: "summary" }, [
        el("td", {}, ["pooled"]),
        el("td", {}, [""]),
        el("td", {}, [fmt(report.pooled_kappa)]),
        el("td", {}, [""]),
        el("td", {}, [""]),
      ]),
    );
  }
  return el("table", { class: "eval-table", id: "eval-table" }, [
    el("thead", {}, [
      el("tr", {}, [
        el("th", {}, ["Code"]),
        el("th", {}, ["Threshold"]),
        el("th", {}, ["Cohen's κ [95% CI]"]),
        el("th", {}, ["F1 [95% CI]"]),
        el("th", {}, ["% agreement"]),
      ]),
    ]),
    body,
  ]);
}

export function renderDrift(drift: DriftDto, width = 480, height = 120): SVGSVGElement {
  const svg = document.createElementNS(SVG_NS, "svg") as SVGSVGElement;
  svg.setAttribute("width", String(width));
  svg.setAttribute("height", String(height));
  svg.setAttribute("id", "drift-chart");
  svg.setAttribute("role", "img");
  svg.setAttribute("aria-label", "rolling false positive and false negative rates");
  const n = drift.points.length;
  if (n === 0) return svg;
  const x = (i: number) => (n === 1 ? 0 : (i / (n - 1)) * (width - 2) + 1);
  const y = (rate: number) => height - 1 - rate * (height - 2);
  for (const [key, cls] of [
    ["fp_rate", "fp-line"],
    ["fn_rate", "fn-line"],
  ] as const) {
    const line = document.createElementNS(SVG_NS, "polyline");
    line.setAttribute("class", cls);
    line.setAttribute("fill", "none");
    line.setAttribute(
      "points",
      drift.points.map((p, i) => `${x(i).toFixed(1)},${y(p[key]).toFixed(1)}`).join(" "),
    );
    svg.append(line);
  }
  return svg;
}
