"""Session-scoped HTTP API driving the explorer UI.

One service process manages many sessions. A session wraps one dataset
directory plus the derived state: trained model, per-frame latent caches,
and one cluster tree per explored frame. Every mutation is serialized by a
per-session lock and persisted to the session directory before the response
returns, so a kill/restart between any two calls loses nothing that was
acknowledged. Long work (train, infer, track) runs as polled jobs.
"""
from __future__ import annotations

import base64
import threading
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .analysis import (ClusterTree, revoke_split, split_node, tree_from_payload,
                       tree_to_payload)
from .errors import LoadError, NotLeafError, RevokeOrderError
from .frames import ParticleFrame, load_dataset, value_based_sample
from .model import (AutoencoderModel, LatentField, load_latents, load_model,
                    save_latents, save_model)
from .train import TrainConfig, infer_latents, train
from .tracking import track
from .tsne import project_tsne
from .util import atomic_write_text

DEFAULT_HOST = "127.0.0.1"
DEFAULT_PORT = 8642
MAX_PROJECTION_POINTS = 2000
PROJECTION_ITERATIONS = 500


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, detail=None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.detail = detail

    def response(self) -> JSONResponse:
        return JSONResponse(status_code=self.status, content={
            "code": self.code, "message": self.message, "detail": self.detail})


def _not_found(what: str, key) -> ApiError:
    return ApiError(404, "not_found", f"unknown {what}: {key}", None)


# ---------------------------------------------------------------------------
# jobs


class Job:
    def __init__(self, kind: str, session_id: str):
        self.id = uuid.uuid4().hex[:12]
        self.kind = kind
        self.session_id = session_id
        self.state = "pending"
        self.epoch: int | None = None
        self.loss: float | None = None
        self.error: str | None = None
        self.result: dict | None = None
        self.lock = threading.Lock()

    def to_json(self) -> dict:
        with self.lock:
            out = {"id": self.id, "kind": self.kind, "session": self.session_id,
                   "state": self.state}
            if self.epoch is not None:
                out["epoch"] = self.epoch
            if self.loss is not None:
                out["loss"] = self.loss
            if self.error is not None:
                out["error"] = self.error
            if self.result is not None:
                out["result"] = self.result
            return out

    def start(self) -> None:
        with self.lock:
            self.state = "running"

    def finish(self, result: dict) -> None:
        with self.lock:
            self.state = "done"
            self.result = result

    def fail(self, message: str) -> None:
        with self.lock:
            self.state = "failed"
            self.error = message


# ---------------------------------------------------------------------------
# session state


class SessionState:
    def __init__(self, session_id: str, directory: Path, meta: dict):
        self.id = session_id
        self.dir = directory
        self.meta = meta
        self.lock = threading.RLock()
        self._frames: list[ParticleFrame] | None = None
        self._model: AutoencoderModel | None = None
        self._latents: dict[tuple[int, str], LatentField] = {}
        self.trees: dict[int, ClusterTree] = {}
        for key, payload in meta.get("trees", {}).items():
            self.trees[int(key)] = tree_from_payload(payload)
        self.projection_cache: dict[tuple, dict] = {}

    # -- lazy data

    @property
    def frames(self) -> list[ParticleFrame]:
        if self._frames is None:
            self._frames = load_dataset(self.meta["dataset_dir"])
        return self._frames

    def frame(self, frame_id: int) -> ParticleFrame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise _not_found("frame", frame_id)

    @property
    def model(self) -> AutoencoderModel | None:
        if self._model is None and self.meta.get("model"):
            self._model = load_model(self.dir / self.meta["model"]["file"])
        return self._model

    def model_digest(self) -> str | None:
        info = self.meta.get("model")
        return info["digest"] if info else None

    def latent_field(self, frame_id: int) -> LatentField | None:
        """Cached latents of the frame under the current model, if any."""
        digest = self.model_digest()
        if digest is None:
            return None
        key = (frame_id, digest)
        if key in self._latents:
            return self._latents[key]
        rec = self.meta.get("latent_files", {}).get(f"{frame_id}:{digest}")
        if rec:
            field = load_latents(self.dir / rec, frame_id=frame_id)
            self._latents[key] = field
            return field
        return None

    def store_latents(self, field: LatentField) -> str:
        digest = field.model_hash.hex()
        name = f"latents_f{field.frame_id}_{digest[:16]}.lat1"
        save_latents(field, self.dir / name)
        self._latents[(field.frame_id, digest)] = field
        self.meta.setdefault("latent_files", {})[f"{field.frame_id}:{digest}"] = name
        return name

    def tree(self, frame_id: int) -> ClusterTree:
        frame = self.frame(frame_id)
        t = self.trees.get(frame_id)
        if t is None:
            t = ClusterTree.create(frame_id, frame.n)
            self.trees[frame_id] = t
        field = self.latent_field(frame_id)
        t.latents = None if field is None else field.latents
        return t

    def persist(self) -> None:
        import json
        self.meta["trees"] = {str(fid): tree_to_payload(t)
                              for fid, t in self.trees.items()}
        atomic_write_text(self.dir / "session.json",
                          json.dumps(self.meta, indent=2, sort_keys=True) + "\n")


class ServiceState:
    def __init__(self, session_root: Path):
        self.root = Path(session_root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, SessionState] = {}
        self.jobs: dict[str, Job] = {}
        self.lock = threading.Lock()
        self._rehydrate()

    def _rehydrate(self) -> None:
        import json
        for meta_path in sorted(self.root.glob("*/session.json")):
            try:
                meta = json.loads(meta_path.read_text("utf-8"))
                sid = meta["id"]
            except (OSError, ValueError, KeyError):
                continue  # torn or foreign directory, skip
            self.sessions[sid] = SessionState(sid, meta_path.parent, meta)

    def session(self, session_id: str) -> SessionState:
        with self.lock:
            s = self.sessions.get(session_id)
        if s is None:
            raise _not_found("session", session_id)
        return s

    def create_session(self, dataset_dir: str) -> SessionState:
        try:
            frames = load_dataset(dataset_dir)
        except (LoadError, OSError) as exc:
            raise ApiError(400, "bad_dataset", f"cannot load dataset: {exc}", None)
        sid = uuid.uuid4().hex[:12]
        sdir = self.root / sid
        sdir.mkdir(parents=True, exist_ok=True)
        meta = {
            "id": sid,
            "dataset_dir": str(Path(dataset_dir).resolve()),
            "frames": [{"id": f.frame_id, "n": f.n, "d": f.attr_dim,
                        "attr_names": f.attr_names} for f in frames],
            "model": None,
            "latent_files": {},
            "trees": {},
        }
        state = SessionState(sid, sdir, meta)
        state._frames = frames
        state.persist()
        with self.lock:
            self.sessions[sid] = state
        return state

    def add_job(self, job: Job) -> None:
        with self.lock:
            self.jobs[job.id] = job

    def job(self, job_id: str) -> Job:
        with self.lock:
            j = self.jobs.get(job_id)
        if j is None:
            raise _not_found("job", job_id)
        return j


def _run_job(state: ServiceState, job: Job, work) -> None:
    def runner():
        job.start()
        try:
            job.finish(work())
        except ApiError as exc:
            job.fail(exc.message)
        except Exception as exc:  # noqa: BLE001 - job boundary
            job.fail(f"{type(exc).__name__}: {exc}")

    state.add_job(job)
    threading.Thread(target=runner, daemon=True).start()


# ---------------------------------------------------------------------------
# request bodies


class CreateSessionBody(BaseModel):
    dataset_dir: str


class TrainBody(BaseModel):
    radius: float | None = None
    latent_dim: int = 32
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    sample_fraction: float = 0.01
    loss_mode: str = "attributes_only"
    seed: int = 0


class InferBody(BaseModel):
    frame: int


class SplitBody(BaseModel):
    node: int
    k: int = 2
    seed: int = 0


class RevokeBody(BaseModel):
    node: int


class TrackBody(BaseModel):
    frame_start: int
    frame_end: int
    region_center: list[float] = Field(min_length=3, max_length=3)
    half_extent: float | list[float]
    shift_tol: float = 1e-3
    max_iter: int = 20


# ---------------------------------------------------------------------------
# app factory


def create_app(session_root) -> FastAPI:
    app = FastAPI(title="particle latent explorer service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    state = ServiceState(Path(session_root))
    app.state.service = state

    @app.exception_handler(ApiError)
    async def _api_error(_req: Request, exc: ApiError):
        return exc.response()

    @app.exception_handler(RequestValidationError)
    async def _validation_error(_req: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={
            "code": "validation_error", "message": "invalid request body",
            "detail": str(exc.errors()[:3])})

    @app.exception_handler(Exception)
    async def _internal_error(_req: Request, exc: Exception):
        return JSONResponse(status_code=500, content={
            "code": "internal", "message": f"{type(exc).__name__}: {exc}",
            "detail": None})

    def ensure_tree(session: SessionState, frame_id: int) -> ClusterTree:
        created = frame_id not in session.trees
        tree = session.tree(frame_id)
        if created:
            session.persist()
        return tree

    def tree_response(session: SessionState, frame_id: int) -> dict:
        payload = tree_to_payload(ensure_tree(session, frame_id))
        payload["has_latents"] = session.latent_field(frame_id) is not None
        return payload

    # -- sessions

    @app.post("/sessions")
    def create_session(body: CreateSessionBody):
        session = state.create_session(body.dataset_dir)
        return {"session": session.id, "frames": session.meta["frames"]}

    @app.get("/sessions/{sid}/frames")
    def list_frames(sid: str):
        session = state.session(sid)
        with session.lock:
            return {"session": sid, "frames": session.meta["frames"],
                    "model": session.meta.get("model")}

    # -- jobs

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        return state.job(job_id).to_json()

    # -- training and inference

    @app.post("/sessions/{sid}/train")
    def start_train(sid: str, body: TrainBody):
        session = state.session(sid)
        radius = body.radius
        if radius is None:
            info = session.meta.get("model")
            if info is None:
                raise ApiError(400, "missing_radius",
                               "radius is required when no model exists", None)
            radius = float(info["radius"])
        if not 0.0 < radius <= 1.0:
            raise ApiError(400, "bad_radius",
                           f"radius must be in (0, 1], got {radius}", None)
        if body.latent_dim < 1:
            raise ApiError(400, "bad_latent_dim",
                           f"latent_dim must be >= 1, got {body.latent_dim}", None)
        config = TrainConfig(epochs=body.epochs, batch_size=body.batch_size,
                             learning_rate=body.learning_rate,
                             sample_fraction=body.sample_fraction,
                             loss_mode=body.loss_mode, seed=body.seed)
        try:
            config.validate()
        except ValueError as exc:
            raise ApiError(400, "bad_config", str(exc), None)
        job = Job("train", sid)
        frames = session.frames

        def work() -> dict:
            def progress(epoch: int, loss: float) -> None:
                with job.lock:
                    job.epoch = epoch
                    job.loss = loss

            model = train(frames, config, radius, body.latent_dim,
                          progress=progress)
            digest = model.digest().hex()
            with session.lock:
                save_model(model, session.dir / "model.gae")
                session._model = model
                session.meta["model"] = {
                    "file": "model.gae", "digest": digest,
                    "radius": model.radius, "latent_dim": model.latent_dim,
                    "d": model.attr_dim}
                session.projection_cache.clear()
                session.persist()
            return {"model_digest": digest, "radius": model.radius,
                    "latent_dim": model.latent_dim,
                    "final_loss": job.loss}

        _run_job(state, job, work)
        return {"job": job.id}

    @app.post("/sessions/{sid}/infer")
    def start_infer(sid: str, body: InferBody):
        session = state.session(sid)
        frame = session.frame(body.frame)
        if session.model is None:
            raise ApiError(400, "no_model", "train or load a model first", None)
        job = Job("infer", sid)

        def work() -> dict:
            with session.lock:
                cached = session.latent_field(frame.frame_id)
            if cached is None:
                field = infer_latents(session.model, frame)
                with session.lock:
                    name = session.store_latents(field)
                    session.persist()
            else:
                field = cached
                name = session.meta["latent_files"][
                    f"{frame.frame_id}:{field.model_hash.hex()}"]
            return {"frame": frame.frame_id, "n": field.n,
                    "latent_dim": field.latent_dim,
                    "model_digest": field.model_hash.hex(), "file": name}

        _run_job(state, job, work)
        return {"job": job.id}

    # -- cluster tree

    @app.get("/sessions/{sid}/tree/{frame_id}")
    def get_tree(sid: str, frame_id: int):
        session = state.session(sid)
        with session.lock:
            payload = tree_response(session, frame_id)
        return payload

    @app.post("/sessions/{sid}/tree/{frame_id}/split")
    def split(sid: str, frame_id: int, body: SplitBody):
        session = state.session(sid)
        with session.lock:
            tree = ensure_tree(session, frame_id)
            if body.node not in tree.nodes:
                raise _not_found("node", body.node)
            if tree.latents is None:
                raise ApiError(400, "no_latents",
                               f"no latents inferred for frame {frame_id}; "
                               "run infer first", None)
            try:
                split_node(tree, body.node, k=body.k, seed=body.seed)
            except NotLeafError as exc:
                raise ApiError(409, "not_leaf", str(exc), None)
            except ValueError as exc:
                raise ApiError(400, "bad_split", str(exc), None)
            payload = tree_response(session, frame_id)
            session.persist()
        return payload

    @app.post("/sessions/{sid}/tree/{frame_id}/revoke")
    def revoke(sid: str, frame_id: int, body: RevokeBody):
        session = state.session(sid)
        with session.lock:
            tree = ensure_tree(session, frame_id)
            if body.node not in tree.nodes:
                raise _not_found("node", body.node)
            try:
                revoke_split(tree, body.node)
            except RevokeOrderError as exc:
                raise ApiError(409, "revoke_order", str(exc), None)
            except ValueError as exc:
                raise ApiError(400, "bad_revoke", str(exc), None)
            payload = tree_response(session, frame_id)
            session.persist()
        return payload

    # -- projection

    @app.get("/sessions/{sid}/projection/{frame_id}")
    def projection(sid: str, frame_id: int, sample_fraction: float = 0.01,
                   perplexity: float = 30.0, seed: int = 0):
        session = state.session(sid)
        with session.lock:
            frame = session.frame(frame_id)
            field = session.latent_field(frame_id)
            if field is None:
                raise ApiError(400, "no_latents",
                               f"no latents inferred for frame {frame_id}", None)
            if not 0.0 < sample_fraction <= 1.0:
                raise ApiError(400, "bad_fraction",
                               f"sample_fraction must be in (0,1], got "
                               f"{sample_fraction}", None)
            fraction = min(sample_fraction, MAX_PROJECTION_POINTS / frame.n) \
                if frame.n > MAX_PROJECTION_POINTS else sample_fraction
            key = (frame_id, field.model_hash.hex(), round(fraction, 12),
                   round(perplexity, 6), seed)
            cached = session.projection_cache.get(key)
            if cached is None:
                sample = value_based_sample(frame, fraction, seed)
                m = sample.indices.size
                eff_perplexity = min(perplexity, max(2.0, (m - 1) / 3.0))
                proj = project_tsne(field, sample.indices,
                                    perplexity=eff_perplexity,
                                    iterations=PROJECTION_ITERATIONS, seed=seed)
                cached = {
                    "frame": frame_id,
                    "indices": [int(i) for i in proj.indices],
                    "points": [[float(a), float(b)] for a, b in proj.points],
                    "perplexity": proj.perplexity,
                    "iterations": proj.iterations,
                    "seed": proj.seed,
                    "sample_fraction": fraction,
                }
                session.projection_cache[key] = cached
            tree = ensure_tree(session, frame_id)
            labels = [int(tree.leaf_of(i)) for i in cached["indices"]]
        return {**cached, "labels": labels}

    # -- particles

    @app.get("/sessions/{sid}/particles/{frame_id}")
    def particles(sid: str, frame_id: int, node: int = 0, attr: str | None = None):
        session = state.session(sid)
        with session.lock:
            frame = session.frame(frame_id)
            tree = ensure_tree(session, frame_id)
            if node not in tree.nodes:
                raise _not_found("node", node)
            if attr is None:
                attr = frame.attr_names[0]
            if attr not in frame.attr_names:
                raise _not_found("attribute", attr)
            col = frame.attr_names.index(attr)
            members = tree.nodes[node].members
            pos = np.ascontiguousarray(frame.positions[members], dtype="<f4")
            vals = np.ascontiguousarray(frame.attributes[members, col], dtype="<f4")
        return {
            "frame": frame_id,
            "node": node,
            "n": int(members.size),
            "attr": attr,
            "attr_names": frame.attr_names,
            "positions_b64": base64.b64encode(pos.tobytes()).decode("ascii"),
            "values_b64": base64.b64encode(vals.tobytes()).decode("ascii"),
        }

    # -- tracking

    @app.post("/sessions/{sid}/track")
    def start_track(sid: str, body: TrackBody):
        session = state.session(sid)
        frame_ids = [f["id"] for f in session.meta["frames"]]
        if body.frame_start not in frame_ids:
            raise _not_found("frame", body.frame_start)
        if body.frame_end not in frame_ids:
            raise _not_found("frame", body.frame_end)
        if body.frame_end < body.frame_start:
            raise ApiError(400, "bad_range", "frame_end precedes frame_start", None)
        span = [fid for fid in frame_ids
                if body.frame_start <= fid <= body.frame_end]
        with session.lock:
            missing = [fid for fid in span if session.latent_field(fid) is None]
            if missing and session.model is None:
                raise ApiError(400, "no_latents",
                               f"frames {missing} have no latents and no model "
                               "is available", None)
        job = Job("track", sid)

        def work() -> dict:
            frames = [session.frame(fid) for fid in span]
            with session.lock:
                sources = {fid: (session.latent_field(fid) or session.model)
                           for fid in span}
            entries = track(frames, sources, body.region_center,
                            body.half_extent, shift_tol=body.shift_tol,
                            max_iter=body.max_iter)
            return {"trace": [{
                "t": e.t,
                "center": [float(x) for x in e.center],
                "iters": e.iters,
                "similarity": e.similarity,
                "converged": e.converged,
            } for e in entries]}

        _run_job(state, job, work)
        return {"job": job.id}

    return app


def run_server(session_root, host: str = DEFAULT_HOST,
               port: int = DEFAULT_PORT) -> None:
    import uvicorn
    uvicorn.run(create_app(session_root), host=host, port=port,
                log_level="warning")
