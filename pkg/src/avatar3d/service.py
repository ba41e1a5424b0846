"""HTTP service and session engine for interactive avatar editing.

Sessions are event-sourced: every accepted edit is appended to a
per-session JSONL log, and the in-memory state is always reproducible by
folding the log from the opening event. Render requests are side-effect
free; only the edit endpoint mutates a session.
"""

from __future__ import annotations

import base64
import io
import json
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import torch
from fastapi import FastAPI, HTTPException
from fastapi.responses import Response
from pydantic import BaseModel

from .align import AlignmentResult
from .camera import CameraPose
from .checkpoint import UnknownCheckpoint, load_checkpoint
from .generator import DeltaS, Generator, FEATURE_WIDTH, NUM_LAYERS
from .imageio import save_render, save_rgb
from .render import RenderConfig, RenderOutput
from .tps import TpsPredictor, render_with_tps


class OutOfRange(ValueError):
    pass


EDIT_KINDS = ("pose", "ds_interp", "s_channel", "tps_latent", "animate_frame")


@dataclass
class EditSession:
    session_id: str
    checkpoint_id: str
    w: torch.Tensor                      # [w_dim] or [num_layers, w_dim]
    # Sessions open in the source-geometry state; raising the blend morphs
    # toward the adapted geometry, so a blend of 0 always reproduces the
    # opening frame.
    ds_interp: float = 0.0
    s_offsets: dict[tuple[int, int], float] = field(default_factory=dict)
    tps_enabled: bool = False
    theta: float = 0.0
    phi: float = 0.0
    animation: torch.Tensor | None = None   # [T, w_dim] w-code track
    frame: int = 0
    history: list[dict] = field(default_factory=list)

    def state_doc(self) -> dict:
        return {
            "session_id": self.session_id,
            "checkpoint_id": self.checkpoint_id,
            "ds_interp": self.ds_interp,
            "s_offsets": {f"{l}:{c}": v for (l, c), v in self.s_offsets.items()},
            "tps_enabled": self.tps_enabled,
            "theta": self.theta,
            "phi": self.phi,
            "frame": self.frame,
            "n_edits": len(self.history),
        }


def apply_edit_event(session: EditSession, edit: dict, bounds: AlignmentResult) -> None:
    """Fold one edit event into the session state. Raises OutOfRange on
    values outside the configured safe ranges; rejected edits are not
    recorded."""
    kind = edit.get("kind")
    if kind not in EDIT_KINDS:
        raise OutOfRange(f"unknown edit kind {kind!r}")
    if kind == "pose":
        theta, phi = float(edit["theta"]), float(edit["phi"])
        if not (bounds.theta_range[0] <= theta <= bounds.theta_range[1]):
            raise OutOfRange(f"theta {theta} outside {bounds.theta_range}")
        if not (bounds.phi_range[0] <= phi <= bounds.phi_range[1]):
            raise OutOfRange(f"phi {phi} outside {bounds.phi_range}")
        session.theta, session.phi = theta, phi
    elif kind == "ds_interp":
        alpha = float(edit["alpha"])
        if not 0.0 <= alpha <= 1.0:
            raise OutOfRange(f"alpha {alpha} outside [0, 1]")
        session.ds_interp = alpha
    elif kind == "s_channel":
        layer, channel = int(edit["layer"]), int(edit["channel"])
        if not (0 <= layer < NUM_LAYERS and 0 <= channel < FEATURE_WIDTH):
            raise OutOfRange(f"s channel ({layer}, {channel}) out of bounds")
        key = (layer, channel)
        new = session.s_offsets.get(key, 0.0) + float(edit["offset"])
        if abs(new) > 4.0:
            raise OutOfRange(f"cumulative s offset {new} exceeds bound 4.0")
        if new == 0.0:
            session.s_offsets.pop(key, None)
        else:
            session.s_offsets[key] = new
    elif kind == "tps_latent":
        session.tps_enabled = bool(edit["enabled"])
    elif kind == "animate_frame":
        frame = int(edit["frame"])
        n = 0 if session.animation is None else session.animation.shape[0]
        if not 0 <= frame < max(n, 1):
            raise OutOfRange(f"frame {frame} outside [0, {n})")
        session.frame = frame
    session.history.append(edit)


class SessionStore:
    """Append-only JSONL persistence, one file per session."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, session_id: str) -> Path:
        return self.root / f"{session_id}.jsonl"

    def record_open(self, session: EditSession) -> None:
        event = {
            "event": "open",
            "session_id": session.session_id,
            "checkpoint_id": session.checkpoint_id,
            "w": session.w.tolist(),
        }
        if session.animation is not None:
            event["animation"] = session.animation.tolist()
        with self._path(session.session_id).open("w") as f:
            f.write(json.dumps(event) + "\n")

    def record_edit(self, session_id: str, edit: dict) -> None:
        with self._path(session_id).open("a") as f:
            f.write(json.dumps({"event": "edit", **edit}) + "\n")

    def replay(self, session_id: str, bounds: AlignmentResult) -> EditSession:
        """Rebuild a session by folding its log from the opening event."""
        path = self._path(session_id)
        if not path.exists():
            raise KeyError(session_id)
        lines = path.read_text().splitlines()
        head = json.loads(lines[0])
        session = EditSession(
            session_id=head["session_id"],
            checkpoint_id=head["checkpoint_id"],
            w=torch.tensor(head["w"]),
            animation=torch.tensor(head["animation"]) if "animation" in head else None,
        )
        for line in lines[1:]:
            event = json.loads(line)
            event.pop("event", None)
            apply_edit_event(session, event, bounds)
        return session


class AvatarService:
    """Loads checkpoints, owns sessions, renders edit states."""

    def __init__(
        self,
        checkpoint_dir: str | Path,
        run_dir: str | Path,
        alignment: AlignmentResult | None = None,
        rcfg: RenderConfig | None = None,
    ):
        self.checkpoint_dir = Path(checkpoint_dir)
        self.run_dir = Path(run_dir)
        self.store = SessionStore(self.run_dir / "sessions")
        self.alignment = alignment or AlignmentResult(
            (0.0, 0.0, 0.0), 2.7, (-0.45, 0.45), (-0.35, 0.35), 0.0
        )
        self.rcfg = rcfg or RenderConfig(resolution=32, n_steps=24)
        self.sessions: dict[str, EditSession] = {}
        self._generators: dict[str, tuple[Generator, TpsPredictor | None]] = {}
        self._locks: dict[str, threading.Lock] = {}

    # ---- checkpoints ----

    def list_checkpoints(self) -> list[str]:
        return sorted(p.stem for p in self.checkpoint_dir.glob("*.pt"))

    def _load(self, checkpoint_id: str) -> tuple[Generator, TpsPredictor | None]:
        if checkpoint_id not in self._generators:
            path = self.checkpoint_dir / f"{checkpoint_id}.pt"
            if not path.exists():
                raise UnknownCheckpoint(checkpoint_id)
            g, tps, _ = load_checkpoint(path)
            g.eval()
            self._generators[checkpoint_id] = (g, tps)
        return self._generators[checkpoint_id]

    # ---- sessions ----

    def open_session(
        self,
        checkpoint_id: str,
        w: torch.Tensor | None = None,
        image: torch.Tensor | None = None,
        source_checkpoint_id: str | None = None,
        animation: torch.Tensor | None = None,
    ) -> EditSession:
        g, _ = self._load(checkpoint_id)
        if w is None:
            if image is None:
                raise ValueError("open_session needs a latent code or an image")
            from .invert import ProjectionConfig, project

            g_s = self._load(source_checkpoint_id or checkpoint_id)[0]
            result = project(image, g_s, g, self.alignment.canonical_pose(),
                             ProjectionConfig(resolution=self.rcfg.resolution))
            w = result.w_target
        session = EditSession(
            session_id=uuid.uuid4().hex[:12],
            checkpoint_id=checkpoint_id,
            w=w.detach().clone(),
            animation=animation,
        )
        self.sessions[session.session_id] = session
        self._locks[session.session_id] = threading.Lock()
        self.store.record_open(session)
        return session

    def _get(self, session_id: str) -> EditSession:
        if session_id not in self.sessions:
            raise KeyError(session_id)
        return self.sessions[session_id]

    def apply_edit(self, session_id: str, edit: dict) -> RenderOutput:
        session = self._get(session_id)
        with self._locks[session_id]:
            apply_edit_event(session, edit, self.alignment)
            self.store.record_edit(session_id, edit)
        return self.render(session_id)

    # ---- rendering ----

    def _effective_delta_s(self, g: Generator, session: EditSession) -> DeltaS:
        """interp * delta_s + channel offsets, baked so synthesis runs at
        interp=1 with the blend already applied."""
        eff = DeltaS([FEATURE_WIDTH] * g.num_layers)
        with torch.no_grad():
            for i, d in enumerate(g.delta_s.deltas):
                eff.deltas[i].copy_(d * session.ds_interp)
            for (layer, channel), offset in session.s_offsets.items():
                eff.deltas[layer][channel] += offset
        return eff

    def render(self, session_id: str, theta: float | None = None,
               phi: float | None = None) -> RenderOutput:
        """Render the current state; an explicit pose override does not
        mutate the session."""
        session = self._get(session_id)
        g, tps = self._load(session.checkpoint_id)
        theta = session.theta if theta is None else theta
        phi = session.phi if phi is None else phi
        b = self.alignment
        if not (b.theta_range[0] <= theta <= b.theta_range[1]):
            raise OutOfRange(f"theta {theta} outside {b.theta_range}")
        if not (b.phi_range[0] <= phi <= b.phi_range[1]):
            raise OutOfRange(f"phi {phi} outside {b.phi_range}")
        pose = b.pose(theta, phi)
        w = session.w
        if session.animation is not None and session.frame > 0:
            from .invert import ANIMATION_LAYERS

            delta = session.animation[session.frame] - session.animation[0]
            ws = w if w.dim() == 2 else w[None].repeat(NUM_LAYERS, 1)
            ws = ws.clone()
            for layer in ANIMATION_LAYERS:
                ws[layer] = ws[layer] + delta
            w = ws
        eff = self._effective_delta_s(g, session)
        with torch.no_grad():
            if session.tps_enabled and tps is not None:
                planes = g.synthesize(w, eff, 1.0)
                from .tps import TpsField, warp_image

                w_flat = w if w.dim() == 1 else w[0]
                fld = tps.field(w_flat, planes.front)
                warped = type(planes)(warp_image(planes.front, fld),
                                      planes.side_a, planes.side_b)
                from .render import render_field

                return render_field(g.plane_field(warped), pose, self.rcfg)
            from .generator import render as g_render

            return g_render(g, w, eff, pose, self.rcfg, interp=1.0)

    # ---- export ----

    def export_session(self, session_id: str, turntable_frames: int = 8) -> Path:
        """Write state, history, the current render and a yaw turntable
        to <run_dir>/exports/<id>/; returns the directory."""
        session = self._get(session_id)
        out = self.run_dir / "exports" / session_id
        out.mkdir(parents=True, exist_ok=True)
        doc = {
            "state": session.state_doc(),
            "w": session.w.tolist(),
            "history": session.history,
        }
        if session.animation is not None:
            doc["animation"] = session.animation.tolist()
        (out / "session.json").write_text(json.dumps(doc, indent=2))
        save_render(out, "current", self.render(session_id))
        lo, hi = self.alignment.theta_range
        for i in range(turntable_frames):
            theta = lo + (hi - lo) * i / max(turntable_frames - 1, 1)
            save_rgb(out / f"turntable_{i:04d}.png", self.render(session_id, theta=theta).rgb)
        return out

    def import_session(self, path: str | Path) -> EditSession:
        """Rebuild a session from an export archive; state round-trips."""
        doc = json.loads((Path(path) / "session.json").read_text())
        session = EditSession(
            session_id=doc["state"]["session_id"],
            checkpoint_id=doc["state"]["checkpoint_id"],
            w=torch.tensor(doc["w"]),
            animation=torch.tensor(doc["animation"]) if "animation" in doc else None,
        )
        for edit in doc["history"]:
            apply_edit_event(session, edit, self.alignment)
        self.sessions[session.session_id] = session
        self._locks[session.session_id] = threading.Lock()
        self.store.record_open(session)
        for edit in session.history:
            self.store.record_edit(session.session_id, edit)
        return session


# ---- HTTP layer ----


class OpenSessionRequest(BaseModel):
    checkpoint: str
    w: list[float] | list[list[float]] | None = None
    image_png_base64: str | None = None
    source_checkpoint: str | None = None
    animation: list[list[float]] | None = None


class EditRequest(BaseModel):
    kind: str
    theta: float | None = None
    phi: float | None = None
    alpha: float | None = None
    layer: int | None = None
    channel: int | None = None
    offset: float | None = None
    enabled: bool | None = None
    frame: int | None = None


def _png_bytes(rgb: torch.Tensor) -> bytes:
    import numpy as np
    from PIL import Image

    arr = (rgb.detach().clamp(0, 1) * 255).round().to(torch.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr.permute(1, 2, 0).numpy(), "RGB").save(buf, format="PNG")
    return buf.getvalue()


def create_app(service: AvatarService) -> FastAPI:
    app = FastAPI(title="avatar3d")

    @app.get("/checkpoints")
    def checkpoints():
        return {
            "checkpoints": service.list_checkpoints(),
            "theta_range": list(service.alignment.theta_range),
            "phi_range": list(service.alignment.phi_range),
        }

    @app.post("/sessions")
    def open_session(req: OpenSessionRequest):
        w = torch.tensor(req.w) if req.w is not None else None
        image = None
        if req.image_png_base64 is not None:
            from PIL import Image
            import numpy as np

            raw = Image.open(io.BytesIO(base64.b64decode(req.image_png_base64))).convert("RGB")
            image = torch.from_numpy(
                np.asarray(raw, dtype=np.float32) / 255.0
            ).permute(2, 0, 1)
        animation = torch.tensor(req.animation) if req.animation is not None else None
        try:
            session = service.open_session(req.checkpoint, w, image,
                                           req.source_checkpoint, animation)
        except UnknownCheckpoint as e:
            raise HTTPException(404, f"unknown checkpoint: {e}")
        out = service.render(session.session_id)
        return {
            "state": session.state_doc(),
            "render_png_base64": base64.b64encode(_png_bytes(out.rgb)).decode(),
        }

    @app.post("/sessions/{session_id}/edits")
    def apply_edit(session_id: str, req: EditRequest):
        edit = {k: v for k, v in req.model_dump().items() if v is not None}
        try:
            out = service.apply_edit(session_id, edit)
        except KeyError:
            raise HTTPException(404, "unknown session")
        except OutOfRange as e:
            raise HTTPException(422, str(e))
        return {
            "state": service.sessions[session_id].state_doc(),
            "render_png_base64": base64.b64encode(_png_bytes(out.rgb)).decode(),
        }

    @app.get("/sessions/{session_id}/render")
    def render(session_id: str, theta: float | None = None, phi: float | None = None):
        try:
            out = service.render(session_id, theta, phi)
        except KeyError:
            raise HTTPException(404, "unknown session")
        except OutOfRange as e:
            raise HTTPException(422, str(e))
        return Response(content=_png_bytes(out.rgb), media_type="image/png")

    @app.get("/sessions/{session_id}/export")
    def export(session_id: str):
        try:
            path = service.export_session(session_id)
        except KeyError:
            raise HTTPException(404, "unknown session")
        doc = json.loads((path / "session.json").read_text())
        return {"path": str(path), **doc}

    return app
