import { HttpTransport } from "./client.js";
import { ConsoleApp } from "./app.js";
import { findOverlaps, toSvg } from "./gantt.js";
import { validateConstraintDraft } from "./controls.js";

/** Browser bootstrap: binds the console to the DOM of index.html. */
export function mount(root: HTMLElement, baseUrl: string, sessionId: string): ConsoleApp {
  const transport = new HttpTransport(baseUrl);
  const app = new ConsoleApp(transport, sessionId);

  const taskPane = root.querySelector<HTMLElement>("#tasklist")!;
  const ganttPane = root.querySelector<HTMLElement>("#gantt")!;
  const statusPane = root.querySelector<HTMLElement>("#status")!;
  const sparkPane = root.querySelector<HTMLElement>("#sparks")!;
  const ruleErrors = root.querySelector<HTMLElement>("#rule-errors")!;

  const render = () => {
    taskPane.innerHTML = app.taskList.toHtml();
    const layout = app.gantt.layout();
    ganttPane.innerHTML = toSvg(layout);
    const overlaps = findOverlaps(layout);
    const frame = app.controls.lastFrame;
    statusPane.textContent = frame
      ? `tick ${frame.tick}  beta=${frame.beta.toFixed(3)}  ` +
        `z=${frame.reward.z.toFixed(4)}  R_work=${frame.reward.r_work.toFixed(4)}` +
        (overlaps.length ? `  OVERLAPS: ${overlaps.length}` : "")
      : "waiting for frames";
    sparkPane.innerHTML =
      `<svg width="130" height="26"><polyline fill="none" stroke="#4878a8" ` +
      `points="${app.controls.rWork.points()}"/></svg>` +
      `<svg width="130" height="26"><polyline fill="none" stroke="#d62728" ` +
      `points="${app.controls.rateFail.points()}"/></svg>` +
      `<svg width="130" height="26"><polyline fill="none" stroke="#666" ` +
      `points="${app.controls.reward.points()}"/></svg>`;
  };

  const original = app.onFrame.bind(app);
  app.onFrame = (frame) => {
    original(frame);
    render();
  };

  taskPane.addEventListener("click", (ev) => {
    const target = ev.target as HTMLElement;
    if (target.dataset.action === "delete") {
      void app.taskList.deleteStation(Number(target.dataset.station));
    }
  });
  root.querySelector("#btn-run")?.addEventListener("click", () => void app.controls.run());
  root.querySelector("#btn-pause")?.addEventListener("click", () => void app.controls.pause());
  root.querySelector("#btn-step")?.addEventListener("click", () => void app.controls.step());
  root.querySelector("#btn-reset")?.addEventListener("click", () => void app.taskList.reset());
  root.querySelector("#btn-confirm")?.addEventListener("click", () => void app.taskList.confirm());
  root.querySelector<HTMLInputElement>("#window-size")?.addEventListener("change", (ev) => {
    void app.taskList.resizeWindow(Number((ev.target as HTMLInputElement).value));
  });
  root.querySelector<HTMLInputElement>("#beta")?.addEventListener("change", (ev) => {
    const raw = (ev.target as HTMLInputElement).value;
    void app.controls.setBeta(raw === "" ? null : Number(raw));
  });
  root.querySelector("#btn-rules")?.addEventListener("click", () => {
    const text = root.querySelector<HTMLTextAreaElement>("#rules")!.value;
    const local = validateConstraintDraft(text);
    if (!local.ok) {
      ruleErrors.textContent = local.errors.join("; ");
      return;
    }
    void app.controls.submitConstraints(text).then((result) => {
      ruleErrors.textContent = result.ok ? "rules accepted" : result.errors.join("; ");
    });
  });

  app.connect();
  return app;
}
