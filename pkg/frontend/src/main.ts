/** Browser bootstrap: ?case=<id> selects the case, default demo-1. */

import { ApiClient } from "./api.js";
import { PlanningConsole } from "./app.js";

const params = new URLSearchParams(window.location.search);
const caseId = params.get("case") ?? "demo-1";
const api = new ApiClient("");

const app = new PlanningConsole(api, caseId);
document.getElementById("app")?.appendChild(app.root);
void app.load().catch((error) => {
  const note = document.createElement("p");
  note.className = "load-error";
  note.textContent = `failed to load case ${caseId}: ${error}`;
  document.getElementById("app")?.appendChild(note);
});
