import { ReviewApi } from "./api.js";
import { mountApp } from "./view.js";

const root = document.getElementById("app");
if (!root) {
  throw new Error("missing #app root element");
}

const params = new URLSearchParams(window.location.hash.replace(/^#/, ""));
const controller = mountApp(root, new ReviewApi(""), {
  reviewer: params.get("reviewer") ?? "anonymous",
});

const sessionId = params.get("session");
if (sessionId) {
  void controller.start(sessionId);
}
