// Coding review screen: paginated annotations sorted by score, a
// debounced threshold slider, per-row FP/FN verdict buttons, and the
// feedback rerun trigger. All counts and kappas are re-fetched from the
// service; nothing is derived locally.

import { ApiClient, AnnotationRow, ExamplePools, Verdict } from "./api.js";
import { clear, debounce, el, fmt } from "./dom.js";

export const ERROR_CATEGORIES = [
  "",
  "context_missing",
  "sarcasm_or_irony",
  "definition_too_broad",
  "definition_too_narrow",
  "annotation_noise",
  "other",
];

export const THRESHOLD_DEBOUNCE_MS = 200;

export class ReviewScreen {
  threshold = 8;
  page = 1;
  pageSize = 10;
  verdictCount = 0;
  pools: ExamplePools | null = null;
  lastRerun: string | null = null;

  private rowsBody!: HTMLTableSectionElement;
  private positiveEl!: HTMLElement;
  private negativeEl!: HTMLElement;
  private kappaEl!: HTMLElement;
  private pageEl!: HTMLElement;
  private badgeEl!: HTMLElement;
  private rerunBtn!: HTMLButtonElement;
  private statusEl!: HTMLElement;
  private applyDebounced: (t: number) => void;

  constructor(
    private api: ApiClient,
    private runId: string,
    private codeId: string,
    private gold: string | null = "gold",
  ) {
    this.applyDebounced = debounce(
      (t: number) => void this.applyThreshold(t),
      THRESHOLD_DEBOUNCE_MS,
    );
  }

  async mount(root: HTMLElement): Promise<void> {
    clear(root);

    const slider = el("input", {
      type: "range",
      min: "1",
      max: "10",
      step: "1",
      value: String(this.threshold),
      id: "threshold-slider",
      "aria-label": "confidence threshold",
    });
    const sliderValue = el("span", { id: "threshold-value" }, [String(this.threshold)]);
    slider.addEventListener("input", () => {
      const t = parseInt(slider.value, 10);
      sliderValue.textContent = String(t);
      this.applyDebounced(t);
    });

    this.positiveEl = el("span", { id: "positive-count" }, ["–"]);
    this.negativeEl = el("span", { id: "negative-count" }, ["–"]);
    this.kappaEl = el("span", { id: "live-kappa" }, ["–"]);
    this.statusEl = el("div", { id: "review-status", role: "status" });

    this.badgeEl = el("span", { id: "feedback-badge", class: "badge" }, ["0 examples"]);
    this.rerunBtn = el("button", { id: "rerun-btn" }, ["Re-run with feedback"]);
    this.rerunBtn.disabled = true;
    this.rerunBtn.addEventListener("click", () => void this.rerun());

    this.rowsBody = el("tbody");
    this.pageEl = el("span", { id: "page-info" });
    const prev = el("button", { id: "prev-page" }, ["Prev"]);
    const next = el("button", { id: "next-page" }, ["Next"]);
    prev.addEventListener("click", () => void this.loadPage(this.page - 1));
    next.addEventListener("click", () => void this.loadPage(this.page + 1));

    root.append(
      el("section", { class: "controls" }, [
        el("label", { for: "threshold-slider" }, ["Threshold "]),
        slider,
        sliderValue,
        el("span", { class: "counts" }, [
          " positive: ",
          this.positiveEl,
          " negative: ",
          this.negativeEl,
          " κ: ",
          this.kappaEl,
        ]),
      ]),
      el("section", { class: "feedback-bar" }, [this.rerunBtn, " ", this.badgeEl]),
      this.statusEl,
      el("table", { class: "annotations" }, [
        el("thead", {}, [
          el("tr", {}, [
            el("th", {}, ["Score"]),
            el("th", {}, ["Excerpt"]),
            el("th", {}, ["Label"]),
            el("th", {}, ["Verdict"]),
          ]),
        ]),
        this.rowsBody,
      ]),
      el("nav", { class: "pager" }, [prev, " ", this.pageEl, " ", next]),
    );

    await this.loadPage(1);
  }

  async loadPage(page: number): Promise<void> {
    if (page < 1) return;
    const data = await this.api.annotations(this.runId, {
      page,
      pageSize: this.pageSize,
      code: this.codeId,
    });
    if (page > data.pages) return;
    this.page = page;
    this.positiveEl.textContent = String(data.positive);
    this.negativeEl.textContent = String(data.total - data.positive);
    this.pageEl.textContent = `page ${data.page} / ${data.pages}`;
    clear(this.rowsBody);
    for (const row of data.items) this.rowsBody.append(this.renderRow(row));
  }

  private renderRow(row: AnnotationRow): HTMLTableRowElement {
    const category = el("select", { "aria-label": "error category" });
    for (const c of ERROR_CATEGORIES) {
      category.append(el("option", { value: c }, [c || "(no category)"]));
    }
    const fpBtn = el("button", { class: "verdict-fp" }, ["FP"]);
    const fnBtn = el("button", { class: "verdict-fn" }, ["FN"]);
    fpBtn.addEventListener("click", () =>
      void this.verdict(row, "false_positive", category.value),
    );
    fnBtn.addEventListener("click", () =>
      void this.verdict(row, "false_negative", category.value),
    );
    return el("tr", { "data-annotation": row.id }, [
      el("td", { class: "score" }, [row.score === null ? "–" : String(row.score)]),
      el("td", { class: "excerpt" }, [row.excerpt_text]),
      el("td", { class: "label" }, [row.positive ? "positive" : "negative"]),
      el("td", {}, [fpBtn, " ", fnBtn, " ", category]),
    ]);
  }

  async applyThreshold(t: number): Promise<void> {
    this.threshold = t;
    try {
      const res = await this.api.setThreshold(
        this.runId,
        this.codeId,
        t,
        this.gold ?? undefined,
      );
      this.positiveEl.textContent = String(res.positive);
      this.negativeEl.textContent = String(res.negative);
      this.kappaEl.textContent = res.kappa === undefined ? "–" : fmt(res.kappa);
      this.statusEl.textContent = "";
      await this.loadPage(this.page);
    } catch (err) {
      this.statusEl.textContent = `threshold failed: ${(err as Error).message}`;
    }
  }

  async verdict(row: AnnotationRow, verdict: Verdict, category: string): Promise<void> {
    try {
      const res = await this.api.sendVerdict(
        this.runId,
        row.id,
        verdict,
        category || undefined,
      );
      this.pools = res.example_pools;
      this.verdictCount += 1;
      this.badgeEl.textContent = `${this.verdictCount} examples`;
      this.rerunBtn.disabled = false;
      this.statusEl.textContent = "";
    } catch (err) {
      this.statusEl.textContent = `verdict failed: ${(err as Error).message}`;
    }
  }

  async rerun(): Promise<void> {
    this.rerunBtn.disabled = true;
    try {
      const job = await this.api.rerun(this.runId);
      const finished = await this.api.watchJob(job.id, (j) => {
        this.statusEl.textContent = `rerun ${j.state} (${j.progress.completed}/${j.progress.total})`;
      });
      if (finished.state === "failed") {
        this.statusEl.textContent = `rerun failed: ${finished.error}`;
      } else {
        this.lastRerun = finished.result_ref;
        this.statusEl.textContent = `rerun complete: ${finished.result_ref}`;
      }
    } catch (err) {
      this.statusEl.textContent = `rerun failed: ${(err as Error).message}`;
    } finally {
      this.rerunBtn.disabled = false;
    }
  }
}
