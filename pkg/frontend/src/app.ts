// Hash-routed single-page shell. Every screen re-derives its state from
// the API on navigation, so a reload reconstructs identical views.
//
// Routes:
//   #/                          project screen
//   #/codebook/<project>/<id>   codebook editor
//   #/review/<run>/<code>       coding review
//   #/audit/<run>               eval + drift audit

import { ApiClient } from "./api.js";
import { AuditScreen } from "./audit.js";
import { CodebookScreen } from "./codebook.js";
import { ProjectScreen } from "./project.js";
import { ReviewScreen } from "./review.js";
import { clear, el } from "./dom.js";

export async function route(api: ApiClient, root: HTMLElement, hash: string): Promise<void> {
  const parts = hash.replace(/^#\/?/, "").split("/").filter(Boolean);
  clear(root);
  const body = el("main");
  root.append(renderNav(), body);
  if (parts[0] === "codebook" && parts.length === 3) {
    await new CodebookScreen(api, parts[1], parts[2]).mount(body);
  } else if (parts[0] === "review" && parts.length === 3) {
    await new ReviewScreen(api, parts[1], parts[2]).mount(body);
  } else if (parts[0] === "audit" && parts.length === 2) {
    await new AuditScreen(api, parts[1]).mount(body);
  } else {
    await new ProjectScreen(api).mount(body);
  }
}

function renderNav(): HTMLElement {
  return el("nav", { class: "topnav" }, [
    el("a", { href: "#/" }, ["Projects"]),
  ]);
}

export function start(): void {
  const api = new ApiClient((url, init) => fetch(url, init));
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app root");
  const render = () => void route(api, root, window.location.hash);
  window.addEventListener("hashchange", render);
  render();
}

if (typeof window !== "undefined" && document.getElementById("app")) {
  start();
}
