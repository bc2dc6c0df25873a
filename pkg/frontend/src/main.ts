import { ApiClient, ApiError } from "./api.js";
import { clampPage } from "./pagination.js";
import {
  escapeHtml,
  queueBadge,
  renderAgreement,
  renderConflictCard,
  renderFrequencyBars,
  renderFrequencyTable,
  validateDecision,
} from "./render.js";
import type { CategoryName, ConflictPage, DecisionAction } from "./types.js";

const PAGE_SIZE = 50;

class AdjudicationApp {
  private api: ApiClient;
  private page = 1;
  private status: "open" | "resolved" = "open";
  private pending = new Set<string>(); // post ids with an elaborate in flight

  constructor(private root: Document) {
    const baseUrl =
      sessionStorage.getItem("qsetag_base_url") ?? `${location.protocol}//${location.host}`;
    const token = sessionStorage.getItem("qsetag_token");
    this.api = new ApiClient(baseUrl, token);
  }

  private el<T extends HTMLElement>(id: string): T {
    const element = this.root.getElementById(id);
    if (!element) throw new Error(`missing #${id}`);
    return element as T;
  }

  async start(): Promise<void> {
    this.el("token-form").addEventListener("submit", (event) => {
      event.preventDefault();
      const token = (this.el<HTMLInputElement>("token-input").value ?? "").trim();
      if (token) sessionStorage.setItem("qsetag_token", token);
      location.reload();
    });
    this.el("tab-open").addEventListener("click", () => this.switchStatus("open"));
    this.el("tab-resolved").addEventListener("click", () => this.switchStatus("resolved"));
    this.el("prev-page").addEventListener("click", () => this.turnPage(-1));
    this.el("next-page").addEventListener("click", () => this.turnPage(1));
    await Promise.all([this.refreshQueue(), this.refreshDashboards()]);
  }

  private banner(message: string, kind: "error" | "info" = "error"): void {
    const banner = this.el("banner");
    banner.textContent = message;
    banner.className = message ? `banner ${kind}` : "banner hidden";
  }

  private switchStatus(status: "open" | "resolved"): void {
    this.status = status;
    this.page = 1;
    void this.refreshQueue();
  }

  private turnPage(delta: number): void {
    this.page += delta;
    void this.refreshQueue();
  }

  async refreshQueue(): Promise<void> {
    let data: ConflictPage;
    try {
      data = await this.api.listConflicts(this.status, this.page, PAGE_SIZE);
    } catch (error) {
      this.banner(`Service unreachable, retrying is safe: ${String(error)}`);
      return;
    }
    this.banner("");
    this.page = clampPage(data.page, data.total, data.page_size);
    this.el("queue-badge").textContent = queueBadge(data.open_count);
    this.el("page-label").textContent = `page ${data.page} / ${data.pages} (${data.total} ${this.status})`;
    const list = this.el("conflict-list");
    list.innerHTML = data.items.map((item) => renderConflictCard(item)).join("\n");
    for (const article of Array.from(list.querySelectorAll("article.conflict"))) {
      const postId = (article as HTMLElement).dataset.postId ?? "";
      if ((article as HTMLElement).dataset.status === "open") {
        article.insertAdjacentHTML("beforeend", this.decisionControls(postId));
        this.wireDecisionControls(article as HTMLElement, postId);
      }
    }
  }

  private decisionControls(postId: string): string {
    const id = escapeHtml(postId);
    return `
      <div class="controls" data-controls-for="${id}">
        <button data-action="elaborate">Ask the model to elaborate</button>
        <button data-action="concede">Concede to the model</button>
        <button data-action="accept_final">Accept model's final label</button>
        <input type="text" class="rationale" placeholder="rationale (required to hold)">
        <button data-action="hold">Hold my label</button>
        <span class="inline-error" role="alert"></span>
      </div>`;
  }

  private wireDecisionControls(article: HTMLElement, postId: string): void {
    const controls = article.querySelector(".controls") as HTMLElement;
    const errorSpan = controls.querySelector(".inline-error") as HTMLElement;
    const rationaleInput = controls.querySelector(".rationale") as HTMLInputElement;
    controls.addEventListener("click", (event) => {
      const button = (event.target as HTMLElement).closest("button");
      if (!button) return;
      const action = button.dataset.action;
      if (action === "elaborate") void this.elaborate(postId, button);
      else if (action) void this.decide(postId, action as DecisionAction, rationaleInput.value, errorSpan);
    });
  }

  async decide(
    postId: string,
    action: DecisionAction,
    rationale: string,
    errorSpan: HTMLElement,
  ): Promise<void> {
    const clientError = validateDecision(action, rationale);
    if (clientError) {
      errorSpan.textContent = clientError;
      return;
    }
    errorSpan.textContent = "";
    try {
      await this.api.decide(postId, { action, rationale: rationale || undefined });
    } catch (error) {
      if (error instanceof ApiError && error.status === 409) {
        this.banner(`Case ${postId} was resolved elsewhere; reloading it.`, "info");
      } else if (error instanceof ApiError && error.status === 422) {
        errorSpan.textContent = error.detail;
        return;
      } else {
        this.banner(String(error));
        return;
      }
    }
    await Promise.all([this.refreshQueue(), this.refreshDashboards()]);
  }

  async elaborate(postId: string, button: HTMLButtonElement): Promise<void> {
    if (this.pending.has(postId)) return;
    this.pending.add(postId);
    button.disabled = true;
    try {
      await this.api.elaborate(postId);
      await this.refreshQueue();
    } catch (error) {
      const detail = error instanceof ApiError ? error.detail : String(error);
      this.banner(`The model is unavailable: ${detail}`);
    } finally {
      this.pending.delete(postId);
      button.disabled = false;
    }
  }

  async refreshDashboards(): Promise<void> {
    try {
      const [agreement, frequencies] = await Promise.all([
        this.api.agreement(),
        this.api.frequencies(),
      ]);
      this.el("agreement-panel").innerHTML = renderAgreement(agreement);
      this.el("frequency-panel").innerHTML =
        renderFrequencyBars(frequencies) + renderFrequencyTable(frequencies);
    } catch (error) {
      if (error instanceof ApiError && error.status === 404) {
        this.el("agreement-panel").innerHTML = '<p class="muted">No annotations yet.</p>';
        this.el("frequency-panel").innerHTML = '<p class="muted">No annotations yet.</p>';
        return;
      }
      this.banner(String(error));
    }
  }
}

if (typeof document !== "undefined") {
  const app = new AdjudicationApp(document);
  void app.start();
}

export { AdjudicationApp };
