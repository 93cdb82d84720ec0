// Project screen: pick/create a project, upload documents, and launch
// codebook generation with a research lens and theme-count bounds,
// watching job progress as it streams in.

import { ApiClient, JobDto } from "./api.js";
import { clear, el } from "./dom.js";

export class ProjectScreen {
  selected: string | null = null;
  lastCodebook: string | null = null;

  private listEl!: HTMLElement;
  private progressEl!: HTMLElement;
  private uploadStatus!: HTMLElement;

  constructor(private api: ApiClient) {}

  async mount(root: HTMLElement): Promise<void> {
    clear(root);
    this.listEl = el("ul", { id: "project-list" });
    this.progressEl = el("div", { id: "job-progress", role: "status" });
    this.uploadStatus = el("div", { id: "upload-status", role: "status" });

    const nameInput = el("input", { id: "new-project-name", placeholder: "project name" });
    const createBtn = el("button", { id: "create-project" }, ["Create"]);
    createBtn.addEventListener("click", async () => {
      try {
        await this.api.createProject(nameInput.value);
        await this.refreshProjects();
      } catch (err) {
        this.uploadStatus.textContent = `create failed: ${(err as Error).message}`;
      }
    });

    const content = el("textarea", { id: "upload-content", rows: "6" });
    const format = el("select", { id: "upload-format" });
    for (const f of ["plain-text", "delimited-table", "line-delimited-records"]) {
      format.append(el("option", { value: f }, [f]));
    }
    const bodyCol = el("input", { id: "upload-body-column", placeholder: "body column" });
    const uploadBtn = el("button", { id: "upload-btn" }, ["Upload"]);
    uploadBtn.addEventListener("click", () => void this.upload(content.value, format.value, bodyCol.value));

    const lens = el("input", { id: "lens-input", placeholder: "research lens" });
    const minThemes = el("input", { id: "themes-min", type: "number", value: "3" });
    const maxThemes = el("input", { id: "themes-max", type: "number", value: "10" });
    const genBtn = el("button", { id: "gen-codebook-btn" }, ["Generate codebook"]);
    genBtn.addEventListener("click", () =>
      void this.genCodebook(lens.value, parseInt(minThemes.value, 10), parseInt(maxThemes.value, 10)),
    );

    root.append(
      el("section", { class: "projects" }, [
        el("h2", {}, ["Projects"]),
        this.listEl,
        nameInput,
        createBtn,
      ]),
      el("section", { class: "upload" }, [
        el("h2", {}, ["Upload documents"]),
        content,
        format,
        bodyCol,
        uploadBtn,
        this.uploadStatus,
      ]),
      el("section", { class: "generate" }, [
        el("h2", {}, ["Generate codebook"]),
        el("label", { for: "lens-input" }, ["Lens "]),
        lens,
        minThemes,
        maxThemes,
        genBtn,
        this.progressEl,
      ]),
    );
    await this.refreshProjects();
  }

  async refreshProjects(): Promise<void> {
    const projects = await this.api.listProjects();
    clear(this.listEl);
    for (const p of projects) {
      const pick = el("button", { class: "pick-project", "data-name": p.name }, [p.name]);
      pick.addEventListener("click", () => {
        this.selected = p.name;
      });
      this.listEl.append(
        el("li", {}, [
          pick,
          ` — ${p.documents} documents, ${p.codebooks.length} codebooks, ${p.runs.length} runs`,
        ]),
      );
    }
    if (this.selected === null && projects.length) this.selected = projects[0].name;
  }

  async upload(content: string, format: string, bodyColumn: string): Promise<void> {
    if (!this.selected) return;
    try {
      const res = await this.api.uploadDocuments(this.selected, {
        content,
        format,
        body_column: bodyColumn || undefined,
        kind: "post",
      });
      this.uploadStatus.textContent =
        `${res.documents} documents, ${res.excerpts} excerpts, ${res.gold_labels} gold labels`;
      await this.refreshProjects();
    } catch (err) {
      this.uploadStatus.textContent = `upload failed: ${(err as Error).message}`;
    }
  }

  async genCodebook(lens: string, themesMin: number, themesMax: number): Promise<void> {
    if (!this.selected) return;
    try {
      const job = await this.api.createJob(this.selected, "gen_codebook", {
        lens: lens || undefined,
        min: themesMin,
        max: themesMax,
      });
      const finished = await this.api.watchJob(job.id, (j: JobDto) => {
        this.progressEl.textContent = `${j.state}: ${j.progress.completed}/${j.progress.total}`;
      });
      if (finished.state === "failed") {
        this.progressEl.textContent = `failed: ${finished.error}`;
      } else {
        this.lastCodebook = finished.result_ref;
        this.progressEl.textContent = `done: codebook ${finished.result_ref}`;
      }
    } catch (err) {
      this.progressEl.textContent = `failed: ${(err as Error).message}`;
    }
  }
}
