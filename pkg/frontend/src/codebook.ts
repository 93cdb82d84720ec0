// Codebook screen: hierarchy tree with inline editing of the fields the
// service allows (name, definition, inclusion/exclusion criteria) and a
// view of the per-code example pools. Saves go through PUT, which bumps
// the codebook version server-side.

import { ApiClient, CodebookDto, CodeDto } from "./api.js";
import { clear, el } from "./dom.js";

export class CodebookScreen {
  book: CodebookDto | null = null;

  private root!: HTMLElement;
  private statusEl!: HTMLElement;

  constructor(private api: ApiClient, private project: string, private codebookId: string) {}

  async mount(root: HTMLElement): Promise<void> {
    this.root = root;
    this.statusEl = el("div", { id: "codebook-status", role: "status" });
    await this.refresh();
  }

  async refresh(): Promise<void> {
    this.book = await this.api.getCodebook(this.project, this.codebookId);
    this.render();
  }

  private render(): void {
    const book = this.book!;
    clear(this.root);
    this.root.append(
      el("h2", {}, [`Codebook ${book.id} (v${book.version})`]),
      el("p", { id: "codebook-lens" }, [book.lens ? `Lens: ${book.lens}` : "No lens"]),
      this.statusEl,
      this.renderTree(book.codes, null),
    );
  }

  private renderTree(codes: CodeDto[], parent: string | null): HTMLUListElement {
    const list = el("ul", { class: parent === null ? "code-tree" : "code-children" });
    for (const code of codes.filter((c) => c.parent_id === parent)) {
      list.append(
        el("li", { "data-code": code.id }, [
          this.renderCode(code),
          this.renderTree(codes, code.id),
        ]),
      );
    }
    return list;
  }

  private renderCode(code: CodeDto): HTMLElement {
    const name = el("input", { class: "edit-name", value: code.name });
    const definition = el("textarea", { class: "edit-definition", rows: "2" });
    definition.value = code.definition;
    const inclusion = el("textarea", { class: "edit-inclusion", rows: "2" });
    inclusion.value = code.inclusion_criteria.join("\n");
    const exclusion = el("textarea", { class: "edit-exclusion", rows: "2" });
    exclusion.value = code.exclusion_criteria.join("\n");

    const save = el("button", { class: "save-code" }, ["Save"]);
    save.addEventListener("click", async () => {
      try {
        this.book = await this.api.putCodebook(this.project, this.codebookId, [
          {
            id: code.id,
            name: name.value,
            definition: definition.value,
            inclusion_criteria: splitLines(inclusion.value),
            exclusion_criteria: splitLines(exclusion.value),
          },
        ]);
        this.render();
        this.statusEl.textContent = `saved ${code.id} (v${this.book.version})`;
      } catch (err) {
        this.statusEl.textContent = `save failed: ${(err as Error).message}`;
      }
    });

    const pools = el("span", { class: "pools" }, [
      `examples: ${code.positive_examples.length}+ / ${code.negative_examples.length}−`,
    ]);
    return el("div", { class: "code-row" }, [
      name,
      definition,
      inclusion,
      exclusion,
      save,
      pools,
    ]);
  }
}

function splitLines(s: string): string[] {
  return s
    .split("\n")
    .map((line) => line.trim())
    .filter((line) => line.length > 0);
}
