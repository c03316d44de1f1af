"""Bundle registry over one shared backbone, softmax-free top-k, and the HTTP service."""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Sequence

import numpy as np

from e4srec.autodiff import eval_mode
from e4srec.backbone import BackboneWeights
from e4srec.bundle import import_bundle
from e4srec.errors import ContractError, E4SRecError, OutOfRangeError
from e4srec.model import E4SRecModel

log = logging.getLogger(__name__)


def infer_topk(model: E4SRecModel, item_ids: Sequence[int], k: int) -> tuple[list[int], list[float]]:
    """Top-k catalog items by raw inner product h . W_out[:, j]; ties go to the lower index."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    with eval_mode():
        h = model.final_hidden([list(item_ids)]).data[0]
    scores = h @ model.w_out.data
    order = np.argsort(-scores, kind="stable")[:min(k, model.n_items)]
    return order.tolist(), scores[order].astype(float).tolist()


@dataclass(frozen=True)
class Snapshot:
    dataset_id: str
    model: E4SRecModel
    version: str
    path: str


class Registry:
    """dataset_id -> immutable snapshot, all sharing one frozen backbone.

    Loading builds the new snapshot completely before publishing it under the
    lock; readers grab a snapshot reference and keep using it, so a swap never
    tears an in-flight request.
    """

    def __init__(self, backbone: BackboneWeights | None):
        if backbone is not None and not backbone.frozen:
            backbone.freeze()
        self.backbone = backbone
        if backbone is not None:
            _ = backbone.tensors  # build the shared tensor cache once, before threads start
        self._lock = threading.Lock()
        self._snapshots: dict[str, Snapshot] = {}
        self._counter = 0

    def load(self, dataset_id: str, path: str | os.PathLike) -> Snapshot:
        model = import_bundle(path, self.backbone)
        with self._lock:
            self._counter += 1
            snap = Snapshot(dataset_id, model, f"{self._counter}-{model.bundle_crc:08x}", str(path))
            self._snapshots = {**self._snapshots, dataset_id: snap}
        log.info("loaded bundle %s for %r as version %s", path, dataset_id, snap.version)
        return snap

    def get(self, dataset_id: str) -> Snapshot:
        snap = self._snapshots.get(dataset_id)
        if snap is None:
            raise KeyError(dataset_id)
        return snap

    def datasets(self) -> list[str]:
        return sorted(self._snapshots)

    def recommend(self, dataset_id: str, item_ids: Sequence[int], k: int) -> dict:
        snap = self.get(dataset_id)
        items, scores = infer_topk(snap.model, item_ids, k)
        return {"items": items, "scores": scores, "version": snap.version}


def _error(kind: str, message: str) -> dict:
    return {"error": {"type": kind, "message": message}}


class _Handler(BaseHTTPRequestHandler):
    registry: Registry  # set on the subclass built by make_server

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status: int, body: dict) -> None:
        raw = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def _body(self) -> dict:
        n = int(self.headers.get("Content-Length", 0))
        obj = json.loads(self.rfile.read(n) or b"{}")
        if not isinstance(obj, dict):
            raise ValueError("request body must be a JSON object")
        return obj

    def do_GET(self):
        if self.path == "/v1/health":
            self._send(HTTPStatus.OK, {"status": "ok", "datasets": self.registry.datasets()})
        else:
            self._send(HTTPStatus.NOT_FOUND, _error("not_found", f"no route {self.path}"))

    def do_POST(self):
        try:
            body = self._body()
        except (ValueError, json.JSONDecodeError) as exc:
            self._send(HTTPStatus.BAD_REQUEST, _error("bad_request", str(exc)))
            return
        if self.path == "/v1/bundles":
            self._load(body)
        elif self.path == "/v1/recommend":
            self._recommend(body)
        else:
            self._send(HTTPStatus.NOT_FOUND, _error("not_found", f"no route {self.path}"))

    def _load(self, body: dict) -> None:
        try:
            snap = self.registry.load(str(body["dataset_id"]), body["path"])
        except KeyError as exc:
            self._send(HTTPStatus.BAD_REQUEST, _error("bad_request", f"missing field {exc}"))
        except (OSError, E4SRecError) as exc:
            self._send(HTTPStatus.UNPROCESSABLE_ENTITY, _error(type(exc).__name__, str(exc)))
        else:
            self._send(HTTPStatus.OK, {"loaded": snap.dataset_id, "version": snap.version})

    def _recommend(self, body: dict) -> None:
        try:
            dataset_id = str(body["dataset_id"])
            item_ids = [int(i) for i in body["item_ids"]]
            k = int(body.get("k", 10))
        except (KeyError, TypeError, ValueError) as exc:
            self._send(HTTPStatus.BAD_REQUEST, _error("bad_request", f"invalid request: {exc}"))
            return
        try:
            self._send(HTTPStatus.OK, self.registry.recommend(dataset_id, item_ids, k))
        except KeyError:
            self._send(HTTPStatus.NOT_FOUND, _error("unknown_dataset", f"no bundle loaded for {dataset_id!r}"))
        except (OutOfRangeError, ContractError) as exc:
            self._send(HTTPStatus.BAD_REQUEST, _error(type(exc).__name__, str(exc)))
        except Exception as exc:  # keep the service up; report the failure
            log.exception("recommend failed")
            self._send(HTTPStatus.INTERNAL_SERVER_ERROR, _error("internal", str(exc)))


def make_server(registry: Registry, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    """Bind the service; raises OSError (e.g. port in use) before any request is served."""
    handler = type("Handler", (_Handler,), {"registry": registry})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server
