/**
 * Browser entry point: wires the controller to the DOM with a single
 * delegated click/submit listener keyed on data-action attributes.
 */

import { ReviewApi } from "./api.js";
import { AppController } from "./controller.js";
import { renderScreen } from "./render.js";

const root = document.getElementById("app");
if (!root) {
  throw new Error("missing #app root element");
}

const controller = new AppController(new ReviewApi());
controller.onChange(() => {
  root.innerHTML = renderScreen(controller.screen);
});

function selectedSession(): string {
  const field = document.getElementById("session-select") as
    | HTMLSelectElement
    | HTMLInputElement
    | null;
  return field ? field.value : "";
}

function annotatorId(): string {
  const field = document.getElementById("annotator-input") as HTMLInputElement | null;
  return field ? field.value : "";
}

root.addEventListener("submit", (event) => {
  const form = event.target as HTMLElement;
  if (form.dataset.action === "begin") {
    event.preventDefault();
    void controller.begin(selectedSession(), annotatorId());
  }
});

root.addEventListener("click", (event) => {
  const target = (event.target as HTMLElement).closest<HTMLElement>("[data-action]");
  if (!target || target.dataset.action === "begin") return;
  switch (target.dataset.action) {
    case "choose-left":
      void controller.choose("left");
      break;
    case "choose-right":
      void controller.choose("right");
      break;
    case "choose-tie":
      void controller.choose("tie");
      break;
    case "report": {
      const sid = target.dataset.session ?? selectedSession();
      void controller.showReport(sid);
      break;
    }
    case "back":
      void controller.backToStart();
      break;
  }
});

// keyboard shortcuts for the judging loop
document.addEventListener("keydown", (event) => {
  if (controller.screen.kind !== "judge") return;
  const tag = (event.target as HTMLElement | null)?.tagName;
  if (tag === "INPUT" || tag === "SELECT" || tag === "TEXTAREA") return;
  if (event.key === "1") void controller.choose("left");
  if (event.key === "2") void controller.choose("right");
  if (event.key === "0") void controller.choose("tie");
});

void controller.init();
