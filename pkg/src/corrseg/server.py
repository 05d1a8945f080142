"""Service boundary: annotations in, segmentations out, training control.

The service persists every acknowledged annotation under the split directory
chosen by the scheduler, so a restarted server reconstructs the identical
split, best checkpoint and training set from disk. Segmentations are always
served from the most recently published (atomic) checkpoint.
"""

import io
import json
import threading
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import annotation as ann_mod
from . import interaction_log, nifti, scheduler, unet3d
from .annotation import AnnotationError, SparseAnnotation
from .unet3d import NetworkConfig
from .volume_io import BoundingBox, Volume, apply_window, load_volume, volume_id_from_path


class UnknownVolumeError(KeyError):
    pass


class ModelNotReadyError(RuntimeError):
    pass


@dataclass
class ServiceConfig:
    """Paths, network configuration and scheduler flags for one project."""

    root: Path
    network: NetworkConfig = field(default_factory=NetworkConfig)
    restart_enabled: bool = True
    auto_train: bool = True
    seed: int = 0
    watch_dir: Path | None = None
    watch_interval: float = 2.0

    def __post_init__(self):
        self.root = Path(self.root)
        if self.watch_dir is not None:
            self.watch_dir = Path(self.watch_dir)

    @property
    def volumes_dir(self) -> Path:
        return self.root / "data" / "volumes"

    @property
    def annotations_dir(self) -> Path:
        return self.root / "annotations"

    @property
    def checkpoints_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def events_dir(self) -> Path:
        return self.root / "events"

    @property
    def state_dir(self) -> Path:
        return self.root / "state"

    @classmethod
    def from_file(cls, path, **overrides) -> "ServiceConfig":
        data = json.loads(Path(path).read_text())
        network = NetworkConfig(**data.pop("network", {}))
        data.update(overrides)
        return cls(network=network, **data)

    def to_file(self, path) -> None:
        from dataclasses import asdict

        data = asdict(self)
        data["root"] = str(self.root)
        data["watch_dir"] = None if self.watch_dir is None else str(self.watch_dir)
        Path(path).write_text(json.dumps(data, indent=2))


class DirectoryStore:
    """Volume/annotation access backed by the service directory layout."""

    def __init__(self, config: ServiceConfig):
        self._config = config
        self._volume_paths: dict[str, Path] = {}
        self._volumes: dict[str, Volume] = {}
        self._annotations: dict[str, SparseAnnotation] = {}
        self._labels: dict[str, np.ndarray] = {}
        self.rescan()

    def rescan(self) -> None:
        directory = self._config.volumes_dir
        if not directory.is_dir():
            return
        for path in sorted(directory.iterdir()):
            if path.name.endswith((".nii", ".nii.gz")):
                self._volume_paths[volume_id_from_path(path)] = path

    def volume_ids(self) -> list[str]:
        return sorted(self._volume_paths)

    def has_volume(self, volume_id: str) -> bool:
        if volume_id not in self._volume_paths:
            self.rescan()
        return volume_id in self._volume_paths

    def image(self, volume_id: str) -> Volume:
        if volume_id not in self._volumes:
            if not self.has_volume(volume_id):
                raise UnknownVolumeError(volume_id)
            self._volumes[volume_id] = load_volume(self._volume_paths[volume_id])
        return self._volumes[volume_id]

    def annotation_path(self, volume_id: str) -> Path | None:
        for split_name in ("train", "val"):
            path = self._config.annotations_dir / split_name / f"{volume_id}.nii.gz"
            if path.exists():
                return path
        return None

    def cache_annotation(self, ann: SparseAnnotation, labels: np.ndarray) -> None:
        self._annotations[ann.volume_id] = ann
        self._labels[ann.volume_id] = labels

    def annotation(self, volume_id: str) -> SparseAnnotation:
        if volume_id not in self._annotations:
            path = self.annotation_path(volume_id)
            if path is None:
                raise KeyError(f"no annotation for {volume_id}")
            labels, _, meta = nifti.read(path)
            box = ann_mod._parse_box_descrip(meta.get("descrip", ""))
            ann = ann_mod.from_label_grid(volume_id, labels, box=box)
            self.cache_annotation(ann, labels)
        return self._annotations[volume_id]

    def labels(self, volume_id: str) -> np.ndarray:
        if volume_id not in self._labels:
            self.annotation(volume_id)
        return self._labels[volume_id]


class TrainingService:
    """Core application object shared by the HTTP app, CLI and simulator."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        for directory in (
            config.volumes_dir,
            config.annotations_dir / "train",
            config.annotations_dir / "val",
            config.checkpoints_dir,
            config.events_dir,
            config.state_dir,
        ):
            directory.mkdir(parents=True, exist_ok=True)
        self.store = DirectoryStore(config)
        split = self._recover_split()
        resume, start_epoch = self._recover_checkpoint()
        self.loop = scheduler.TrainerLoop(
            config.network,
            self.store,
            config.checkpoints_dir,
            status_path=config.state_dir / "status.json",
            restart_enabled=config.restart_enabled,
            seed=config.seed,
            split=split,
            resume=resume,
            start_epoch=start_epoch,
        )
        self._submit_lock = threading.Lock()
        self._params_cache: tuple[Path, dict] | None = None
        self._event_logs: dict[str, interaction_log.EventLog] = {}
        self._watcher: threading.Thread | None = None
        self._watch_stop = threading.Event()
        if config.watch_dir is not None:
            self.start_watcher()

    # -- recovery -------------------------------------------------------

    def _recover_split(self) -> scheduler.DatasetSplit:
        manifest = self.config.state_dir / "split.json"
        if manifest.exists():
            split = scheduler.load_split(manifest)
            # drop ids whose annotation file never made it to disk
            split.train_ids = [i for i in split.train_ids if self.store.annotation_path(i)]
            split.val_ids = [i for i in split.val_ids if self.store.annotation_path(i)]
            return split
        # fall back to scanning the annotation folders in mtime order
        split = scheduler.DatasetSplit()
        entries = []
        for name in ("train", "val"):
            for path in (self.config.annotations_dir / name).glob("*.nii.gz"):
                entries.append((path.stat().st_mtime, path.name, name, volume_id_from_path(path)))
        for _, _, name, volume_id in sorted(entries):
            if name == "train":
                split.train_ids.append(volume_id)
            else:
                split.val_ids.append(volume_id)
        return split

    def _recover_checkpoint(self):
        path = unet3d.best_checkpoint_path(self.config.checkpoints_dir)
        epoch = 0
        status_path = self.config.state_dir / "status.json"
        if status_path.exists():
            try:
                epoch = int(json.loads(status_path.read_text()).get("epoch_index", 0))
            except (ValueError, json.JSONDecodeError):
                epoch = 0
        if path is None:
            return None, epoch
        ckpt, _ = unet3d.load_checkpoint(path)
        return ckpt, max(epoch, ckpt.epoch_index)

    # -- instruction handling ---------------------------------------------

    def submit_annotation(self, volume_id: str, ann: SparseAnnotation, labels: np.ndarray) -> dict:
        """Persist a validated annotation, notify the scheduler and make sure
        training is running. Returns the chosen split."""
        if not self.store.has_volume(volume_id):
            raise UnknownVolumeError(volume_id)
        volume = self.store.image(volume_id)
        if labels.shape != volume.shape:
            raise AnnotationError(
                [f"label grid shape {labels.shape} does not match volume {volume.shape}"]
            )
        ann_mod.require_valid(ann)
        with self._submit_lock:
            if volume_id in self.loop.split:
                raise ValueError(f"volume {volume_id!r} already has an annotation")
            # cache before publishing the id so the trainer never sees an
            # assigned volume whose annotation it cannot read yet
            self.store.cache_annotation(ann, labels.astype(np.uint8))
            split_name = self.loop.assign_annotation(volume_id)
            path = self.config.annotations_dir / split_name / f"{volume_id}.nii.gz"
            nifti.write(
                path,
                labels.astype(np.uint8),
                affine=volume.affine,
                spacing=volume.spacing,
                descrip=ann_mod._box_descrip(ann.box),
            )
            scheduler.save_split(self.loop.split, self.config.state_dir / "split.json")
        if self.config.auto_train:
            self.loop.start()
        return {"volume_id": volume_id, "split": split_name}

    def submit_annotation_bytes(self, volume_id: str, payload: bytes) -> dict:
        ann, labels = ann_mod.deserialize_bytes(payload, volume_id)
        return self.submit_annotation(volume_id, ann, labels)

    def request_segmentation(self, volume_id: str, box: BoundingBox):
        if not self.store.has_volume(volume_id):
            raise UnknownVolumeError(volume_id)
        params = self._best_params()
        volume = self.store.image(volume_id)
        return unet3d.segment(self.config.network, params, volume, box)

    def _best_params(self):
        path = unet3d.best_checkpoint_path(self.config.checkpoints_dir)
        if path is None:
            raise ModelNotReadyError("no checkpoint published yet")
        if self._params_cache is None or self._params_cache[0] != path:
            ckpt, _ = unet3d.load_checkpoint(path)
            self._params_cache = (path, ckpt.params)
        return self._params_cache[1]

    def status(self) -> dict:
        status = self.loop.status()
        status["volumes"] = len(self.store.volume_ids())
        return status

    def start_training(self) -> None:
        self.loop.start()

    def stop_training(self) -> None:
        self.loop.stop()

    def step_training(self, epochs: int = 1) -> dict:
        self.loop.step(epochs)
        return self.status()

    def record_events(self, session: str, events) -> int:
        log = self._event_logs.get(session)
        if log is None:
            log = interaction_log.EventLog(self.config.events_dir / f"{session}.log")
            self._event_logs[session] = log
        for event in events:
            log.record(event)
        return len(events)

    # -- volume access for clients ------------------------------------------

    def volume_meta(self, volume_id: str) -> dict:
        if not self.store.has_volume(volume_id):
            raise UnknownVolumeError(volume_id)
        volume = self.store.image(volume_id)
        return {
            "id": volume.id,
            "shape": list(volume.shape),
            "spacing": list(float(s) for s in volume.spacing),
        }

    def slice_plane(self, volume_id: str, view: str, index: int) -> np.ndarray:
        """Raw HU plane: axial fixes depth, sagittal fixes width."""
        if not self.store.has_volume(volume_id):
            raise UnknownVolumeError(volume_id)
        grid = self.store.image(volume_id).grid
        if view == "axial":
            if not 0 <= index < grid.shape[2]:
                raise ValueError(f"axial index {index} outside [0, {grid.shape[2]})")
            return grid[:, :, index]
        if view == "sagittal":
            if not 0 <= index < grid.shape[0]:
                raise ValueError(f"sagittal index {index} outside [0, {grid.shape[0]})")
            return grid[index, :, :]
        raise ValueError(f"unknown view {view!r}")

    def slice_image(self, volume_id: str, view: str, index: int, lower: float, upper: float) -> np.ndarray:
        """8-bit windowed slice tile for display clients."""
        plane = self.slice_plane(volume_id, view, index)
        return (apply_window(plane, lower, upper) * 255.0).round().astype(np.uint8)

    # -- watched-folder ingestion ---------------------------------------

    def sync_annotation_folder(self, folder=None) -> int:
        """Ingest annotation files dropped in a shared folder; returns the
        number newly submitted."""
        folder = Path(folder or self.config.watch_dir)
        if not folder.is_dir():
            return 0
        submitted = 0
        for path in sorted(folder.glob("*.nii*")):
            volume_id = volume_id_from_path(path)
            if volume_id in self.loop.split:
                continue
            try:
                self.submit_annotation_bytes(volume_id, path.read_bytes())
                submitted += 1
            except (AnnotationError, UnknownVolumeError, ValueError):
                continue
        return submitted

    def start_watcher(self) -> None:
        if self._watcher is not None and self._watcher.is_alive():
            return
        self._watch_stop.clear()

        def poll():
            while not self._watch_stop.wait(self.config.watch_interval):
                self.sync_annotation_folder()

        self._watcher = threading.Thread(target=poll, name="annotation-watcher", daemon=True)
        self._watcher.start()

    def close(self) -> None:
        self._watch_stop.set()
        if self.loop.running:
            self.loop.stop()


def create_app(service: TrainingService):
    """HTTP API over a TrainingService (JSON control, NIfTI binary bodies)."""
    from fastapi import FastAPI, HTTPException, Request, Response
    from pydantic import BaseModel

    @asynccontextmanager
    async def lifespan(app):
        yield
        service.close()

    app = FastAPI(title="corrseg", lifespan=lifespan)
    app.state.service = service

    class SegmentRequest(BaseModel):
        volume_id: str
        box_min: list[int]
        box_max: list[int]

    class EventIn(BaseModel):
        timestamp: float
        kind: str
        volume_id: str = ""

    class EventsRequest(BaseModel):
        session: str = "default"
        events: list[EventIn]

    class StepRequest(BaseModel):
        epochs: int = 1

    @app.get("/status")
    def status():
        return service.status()

    @app.post("/annotate")
    async def annotate(volume_id: str, request: Request):
        payload = await request.body()
        try:
            return service.submit_annotation_bytes(volume_id, payload)
        except UnknownVolumeError:
            raise HTTPException(status_code=404, detail=f"unknown volume {volume_id!r}")
        except AnnotationError as exc:
            raise HTTPException(status_code=400, detail={"violations": exc.violations})
        except nifti.NiftiFormatError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=409, detail=str(exc))

    @app.post("/segment")
    def segment_endpoint(req: SegmentRequest):
        try:
            box = BoundingBox(tuple(req.box_min), tuple(req.box_max))
            seg = service.request_segmentation(req.volume_id, box)
        except UnknownVolumeError:
            raise HTTPException(status_code=404, detail=f"unknown volume {req.volume_id!r}")
        except ModelNotReadyError:
            raise HTTPException(status_code=503, detail="model not ready: no checkpoint yet")
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        volume = service.store.image(req.volume_id)
        body = nifti.to_bytes(
            seg.mask.astype(np.uint8),
            spacing=volume.spacing,
            descrip=ann_mod._box_descrip(seg.box),
        )
        return Response(
            content=body,
            media_type="application/gzip",
            headers={
                "X-Volume-Id": seg.volume_id,
                "X-Box-Min": ",".join(str(v) for v in seg.box.min_corner),
                "X-Box-Max": ",".join(str(v) for v in seg.box.max_corner),
                "X-Threshold": str(seg.threshold_used),
            },
        )

    @app.post("/events")
    def events(req: EventsRequest):
        try:
            parsed = [
                interaction_log.InteractionEvent(e.timestamp, e.kind, e.volume_id)
                for e in req.events
            ]
            count = service.record_events(req.session, parsed)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"recorded": count}

    @app.post("/train/start")
    def train_start():
        service.start_training()
        return service.status()

    @app.post("/stop")
    @app.post("/train/stop")
    def train_stop():
        service.stop_training()
        return service.status()

    @app.post("/train/step")
    def train_step(req: StepRequest):
        try:
            return service.step_training(req.epochs)
        except RuntimeError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.get("/volumes")
    def volumes():
        return {"volumes": service.store.volume_ids()}

    @app.get("/volumes/{volume_id}/meta")
    def volume_meta(volume_id: str):
        try:
            return service.volume_meta(volume_id)
        except UnknownVolumeError:
            raise HTTPException(status_code=404, detail=f"unknown volume {volume_id!r}")

    @app.get("/volumes/{volume_id}/slice")
    def volume_slice(
        volume_id: str,
        view: str = "axial",
        index: int = 0,
        lower: float = -125.0,
        upper: float = 250.0,
    ):
        try:
            plane = service.slice_image(volume_id, view, index, lower, upper)
        except UnknownVolumeError:
            raise HTTPException(status_code=404, detail=f"unknown volume {volume_id!r}")
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(plane.T).save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/volumes/{volume_id}/slice_raw")
    def volume_slice_raw(volume_id: str, view: str = "axial", index: int = 0):
        """Little-endian float32 HU plane, for client-side custom windowing."""
        try:
            plane = service.slice_plane(volume_id, view, index)
        except UnknownVolumeError:
            raise HTTPException(status_code=404, detail=f"unknown volume {volume_id!r}")
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return Response(
            content=np.ascontiguousarray(plane, dtype="<f4").tobytes(order="F"),
            media_type="application/octet-stream",
            headers={"X-Plane-Shape": f"{plane.shape[0]},{plane.shape[1]}"},
        )

    return app
