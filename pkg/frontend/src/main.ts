/** Browser entry point: wires the editor state machine to minimal DOM
 * controls. All rendering is server-side; this file only moves values
 * between inputs and the Editor. */

import { AvatarApi } from "./api.js";
import { Editor, boundsFrom } from "./editor.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export async function start(baseUrl: string): Promise<Editor> {
  const api = new AvatarApi(baseUrl);
  const checkpoints = await api.getCheckpoints();
  const bounds = boundsFrom(checkpoints);
  const editor = new Editor(api, bounds);

  const select = el<HTMLSelectElement>("checkpoint");
  for (const name of checkpoints.checkpoints) {
    const opt = document.createElement("option");
    opt.value = name;
    opt.textContent = name;
    select.appendChild(opt);
  }

  const frame = el<HTMLImageElement>("frame");
  const banner = el<HTMLDivElement>("banner");
  const refresh = () => {
    const view = editor.state;
    if (view) frame.src = `data:image/png;base64,${view.framePngBase64}`;
    banner.textContent = editor.error ? editor.error.message : "";
    banner.style.display = editor.error ? "block" : "none";
  };

  el<HTMLButtonElement>("open").addEventListener("click", async () => {
    await editor.open(select.value);
    refresh();
  });

  const alphaSlider = el<HTMLInputElement>("alpha");
  alphaSlider.min = String(bounds.dsInterp.min);
  alphaSlider.max = String(bounds.dsInterp.max);
  alphaSlider.step = "0.05";
  alphaSlider.addEventListener("change", async () => {
    await editor.setSlider("ds_interp", Number(alphaSlider.value));
    refresh();
  });

  let dragging = false;
  let last: { x: number; y: number } | null = null;
  frame.addEventListener("pointerdown", (e) => {
    dragging = true;
    last = { x: e.clientX, y: e.clientY };
  });
  frame.addEventListener("pointerup", () => {
    dragging = false;
    last = null;
  });
  frame.addEventListener("pointermove", async (e) => {
    if (!dragging || !last) return;
    const dTheta = (e.clientX - last.x) * 0.005;
    const dPhi = (e.clientY - last.y) * -0.005;
    last = { x: e.clientX, y: e.clientY };
    await editor.orbit(dTheta, dPhi);
    refresh();
  });

  return editor;
}
