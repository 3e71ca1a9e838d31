"""Human mask-review service: a persistent queue of extraction results, an
accept/reject/edit decision API over HTTP, and curated-manifest export.

Persistence is one JSON store with atomic replacement plus an append-only
decision log. All mutations funnel through a single lock; reads serve
snapshots.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import threading
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import (
    DatasetManifest,
    GrayImage,
    ManifestEntry,
    Provenance,
    Trimester,
    atomic_write_json,
    load_gray_png,
    save_gray_png,
)
from .ellipse import EllipseParams, rasterize_filled_ellipse
from .errors import AlreadyDecided, InvalidEllipse, InvalidStatus, NotFound, WriteFailure
from .extraction import ExtractionResult, ExtractionStatus

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class ReviewItem:
    id: str
    image_path: str
    raw_channel_path: str
    trimester: Trimester
    proposed_ellipse: dict | None
    quality: float
    status: str  # pending | accepted | rejected
    source_status: str  # extraction status at enqueue time
    decided_at: str | None = None
    edited_ellipse: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trimester"] = Trimester(self.trimester).value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReviewItem":
        d = dict(d)
        d["trimester"] = Trimester(d["trimester"])
        return cls(**d)

    def final_ellipse(self) -> EllipseParams:
        source = self.edited_ellipse or self.proposed_ellipse
        if source is None:
            raise InvalidEllipse(f"item {self.id} has no ellipse")
        return EllipseParams.from_dict(source)


@dataclass
class ReviewInput:
    """One extraction outcome plus the gray image it came from."""

    id: str
    image: GrayImage
    trimester: Trimester
    result: ExtractionResult


class CurationStore:
    """Single-writer JSON store under a directory; thread-safe."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.store_path = self.root / "store.json"
        self.log_path = self.root / "decisions.log"
        self._lock = threading.Lock()
        self.items: dict[str, ReviewItem] = {}
        if self.store_path.exists():
            with open(self.store_path) as f:
                raw = json.load(f)
            self.items = {k: ReviewItem.from_dict(v) for k, v in raw["items"].items()}

    def _persist(self):
        atomic_write_json(self.store_path, {
            "schema_version": SCHEMA_VERSION,
            "items": {k: v.to_dict() for k, v in self.items.items()},
        })

    def _log_decision(self, payload: dict):
        with open(self.log_path, "a") as f:
            f.write(json.dumps(payload) + "\n")

    # -- operations ------------------------------------------------------------

    def enqueue(self, inputs: list[ReviewInput], audit_accepted: bool = False) -> dict:
        """Persist review items; idempotent by id.

        needs_review results become pending items. accepted_auto results are
        recorded as already-accepted (or pending when enqueued for audit).
        rejected_auto input is refused.
        """
        added = 0
        duplicates = 0
        with self._lock:
            for inp in inputs:
                if inp.result.status == ExtractionStatus.rejected_auto:
                    raise InvalidStatus(
                        f"item {inp.id}: rejected_auto results are not reviewable")
                if inp.id in self.items:
                    duplicates += 1
                    continue
                item_dir = self.root / "items" / inp.id
                image_path = item_dir / "image.png"
                raw_path = item_dir / "raw.png"
                save_gray_png(image_path, inp.image.pixels)
                save_gray_png(raw_path, inp.result.raw_channel)
                auto_accept = (inp.result.status == ExtractionStatus.accepted_auto
                               and not audit_accepted)
                item = ReviewItem(
                    id=inp.id,
                    image_path=str(image_path),
                    raw_channel_path=str(raw_path),
                    trimester=inp.trimester,
                    proposed_ellipse=(inp.result.ellipse.to_dict()
                                      if inp.result.ellipse else None),
                    quality=inp.result.quality,
                    status="accepted" if auto_accept else "pending",
                    source_status=inp.result.status.value,
                    decided_at=_now() if auto_accept else None,
                )
                self.items[inp.id] = item
                if auto_accept:
                    self._log_decision({"id": inp.id, "action": "accept_auto",
                                        "at": item.decided_at})
                added += 1
            self._persist()
        return {"added": added, "duplicates": duplicates}

    def get(self, item_id: str) -> ReviewItem:
        item = self.items.get(item_id)
        if item is None:
            raise NotFound(item_id)
        return item

    def list_items(self, status: str | None = None, offset: int = 0,
                   limit: int = 50) -> tuple[list[ReviewItem], int]:
        items = sorted(self.items.values(), key=lambda i: i.id)
        if status is not None:
            items = [i for i in items if i.status == status]
        return items[offset:offset + limit], len(items)

    def counts(self) -> dict[str, int]:
        out = {"pending": 0, "accepted": 0, "rejected": 0}
        for item in self.items.values():
            out[item.status] += 1
        return out

    def decide(self, item_id: str, action: str,
               ellipse: EllipseParams | None = None) -> ReviewItem:
        """pending -> accepted | rejected, exactly once."""
        with self._lock:
            item = self.get(item_id)
            if item.status != "pending":
                raise AlreadyDecided(f"item {item_id} already {item.status}")
            if action == "accept":
                item.status = "accepted"
            elif action == "reject":
                item.status = "rejected"
            elif action == "accept_with_edit":
                if ellipse is None:
                    raise InvalidEllipse("accept_with_edit requires ellipse parameters")
                self._validate_edit(item, ellipse)
                item.status = "accepted"
                item.edited_ellipse = ellipse.to_dict()
            else:
                raise InvalidStatus(f"unknown action {action!r}")
            item.decided_at = _now()
            self._persist()
            self._log_decision({"id": item_id, "action": action, "at": item.decided_at,
                                **({"ellipse": item.edited_ellipse}
                                   if item.edited_ellipse else {})})
            return item

    def _validate_edit(self, item: ReviewItem, ellipse: EllipseParams):
        img = load_gray_png(item.image_path)
        h, w = img.shape
        if not (0 <= ellipse.cx <= w - 1 and 0 <= ellipse.cy <= h - 1):
            raise InvalidEllipse(f"center {ellipse.cx, ellipse.cy} outside {h}x{w}")

    def export_curated(self, out_dir: str | Path) -> DatasetManifest:
        """Write curated pairs (accepted items only) and their manifest.

        Every exported mask is rasterized from the item's stored ellipse, so
        the manifest is reproducible from parameters alone.
        """
        out_dir = Path(out_dir)
        entries = []
        accepted = [i for i in sorted(self.items.values(), key=lambda i: i.id)
                    if i.status == "accepted"]
        try:
            for item in accepted:
                img = load_gray_png(item.image_path)
                mask = rasterize_filled_ellipse(item.final_ellipse(), *img.shape)
                image_path = out_dir / "images" / f"{item.id}.png"
                mask_path = out_dir / "masks" / f"{item.id}_mask.png"
                save_gray_png(image_path, img)
                save_gray_png(mask_path, mask * np.uint8(255))
                entries.append(ManifestEntry(
                    id=item.id, image_path=str(image_path), mask_path=str(mask_path),
                    trimester=item.trimester, provenance=Provenance.synthetic_curated))
            manifest = DatasetManifest(entries=entries)
            manifest.save(out_dir / "manifest.json")
        except OSError as exc:
            raise WriteFailure(str(exc)) from exc
        log.info("exported %d curated pairs to %s", len(entries), out_dir)
        return manifest


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


# -- HTTP API ---------------------------------------------------------------------


def create_app(store: CurationStore, ui_dir: str | Path | None = None):
    """FastAPI app exposing the review queue; all responses carry the schema
    version. When ui_dir points at the built review UI, it is served at /."""
    from fastapi import FastAPI, HTTPException, Query
    from fastapi.responses import FileResponse
    from fastapi.staticfiles import StaticFiles

    app = FastAPI(title="mask review service")

    def versioned(payload: dict) -> dict:
        return {"schema_version": SCHEMA_VERSION, **payload}

    @app.get("/api/items")
    def list_items(status: str | None = Query(default=None),
                   offset: int = Query(default=0, ge=0),
                   limit: int = Query(default=50, ge=1, le=500)):
        items, total = store.list_items(status=status, offset=offset, limit=limit)
        return versioned({
            "items": [i.to_dict() for i in items],
            "total": total,
            "offset": offset,
            "limit": limit,
            "counts": store.counts(),
        })

    @app.get("/api/items/{item_id}")
    def get_item(item_id: str):
        try:
            return versioned({"item": store.get(item_id).to_dict()})
        except NotFound:
            raise HTTPException(status_code=404, detail=f"no item {item_id}")

    @app.get("/api/items/{item_id}/image.png")
    def get_image(item_id: str):
        try:
            item = store.get(item_id)
        except NotFound:
            raise HTTPException(status_code=404, detail=f"no item {item_id}")
        return FileResponse(item.image_path, media_type="image/png")

    @app.get("/api/items/{item_id}/mask.png")
    def get_mask(item_id: str):
        try:
            item = store.get(item_id)
        except NotFound:
            raise HTTPException(status_code=404, detail=f"no item {item_id}")
        return FileResponse(item.raw_channel_path, media_type="image/png")

    @app.post("/api/items/{item_id}/decision")
    def post_decision(item_id: str, body: dict):
        action = body.get("action")
        ellipse = None
        if body.get("ellipse") is not None:
            try:
                ellipse = EllipseParams.from_dict(body["ellipse"])
            except (KeyError, TypeError, ValueError) as exc:
                raise HTTPException(status_code=422, detail=f"bad ellipse: {exc}")
        try:
            item = store.decide(item_id, action, ellipse=ellipse)
        except NotFound:
            raise HTTPException(status_code=404, detail=f"no item {item_id}")
        except AlreadyDecided as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except (InvalidStatus, InvalidEllipse) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return versioned({"item": item.to_dict(), "counts": store.counts()})

    @app.post("/api/export")
    def post_export(body: dict):
        out = body.get("out")
        if not out:
            raise HTTPException(status_code=422, detail="missing 'out' path")
        try:
            manifest = store.export_curated(out)
        except WriteFailure as exc:
            raise HTTPException(status_code=500, detail=str(exc))
        return versioned({"exported": len(manifest.entries), "out": str(out)})

    if ui_dir is not None and Path(ui_dir).exists():
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def serve(store_path: str | Path, port: int = 8701, host: str = "127.0.0.1",
          ui_dir: str | Path | None = None):
    import uvicorn

    store = CurationStore(store_path)
    uvicorn.run(create_app(store, ui_dir=ui_dir), host=host, port=port,
                log_level="info")
