"""Provider wire protocol: reference server and conformance vectors.

The server wraps any in-process provider behind the HTTP protocol the
remote client speaks, which makes it both the test double for the client
and the executable specification an external model-serving shim must
match.  ``run_conformance`` exercises exactly that contract against any
base URL: schemas, resolution preservation, the bit-exact compositing
invariant, candidate counts, determinism, and error codes.
"""

from __future__ import annotations

import base64
import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .camera import CameraView, Intrinsics, Pose, RegionMask
from .io import (
    depth_to_pfm_bytes,
    mask_to_png_bytes,
    pfm_bytes_to_depth,
    png_bytes_to_mask,
    png_bytes_to_rgb,
    rgb_to_png_bytes,
)
from .providers import InpaintRequest

__all__ = ["ProviderServer", "run_conformance", "ConformanceFailure"]


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"))


class _Handler(BaseHTTPRequestHandler):
    provider = None
    view_factory = None

    def log_message(self, *args):  # silence request logging in tests
        pass

    def _reply(self, status: int, payload: dict):
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, code: str, message: str):
        self._reply(status, {"code": code, "message": message})

    def do_GET(self):
        if self.path == "/v1/health":
            self._reply(200, {"status": "ok", "models": {"provider": "ready"}})
        else:
            self._error(404, "not_found", f"no such endpoint {self.path}")

    def do_POST(self):
        try:
            length = int(self.headers.get("Content-Length", "0"))
            req = json.loads(self.rfile.read(length).decode("utf-8"))
        except (ValueError, json.JSONDecodeError):
            return self._error(400, "bad_request", "body must be JSON")
        try:
            if self.path == "/v1/generate":
                return self._generate(req)
            if self.path == "/v1/inpaint":
                return self._inpaint(req)
            if self.path == "/v1/depth":
                return self._depth(req)
            if self.path == "/v1/embed":
                return self._embed(req)
            return self._error(404, "not_found", f"no such endpoint {self.path}")
        except KeyError as exc:
            return self._error(400, "missing_field", f"missing field {exc}")
        except (ValueError, TypeError) as exc:
            return self._error(400, "bad_request", str(exc))
        except Exception as exc:  # noqa: BLE001 - protocol boundary
            return self._error(500, "internal", str(exc))

    def _generate(self, req):
        width, height = int(req["width"]), int(req["height"])
        if width <= 0 or height <= 0:
            return self._error(400, "bad_request", "resolution must be positive")
        view = self.view_factory(width, height)
        img = self.provider.generate_initial(str(req["prompt"]), view,
                                             seed=int(req.get("seed", 0)))
        self._reply(200, {"image": _b64(rgb_to_png_bytes(img))})

    def _inpaint(self, req):
        image = png_bytes_to_rgb(_unb64(req["image"]))
        mask = png_bytes_to_mask(_unb64(req["mask"]))
        if not mask.any():
            return self._error(400, "empty_mask", "inpainting mask is empty")
        request = InpaintRequest(
            prompt=str(req["prompt"]),
            image=image,
            mask=RegionMask(mask),
            num_candidates=int(req.get("num_candidates", 30)),
            seed=int(req.get("seed", 0)),
        )
        view = self.view_factory(image.shape[1], image.shape[0])
        out = self.provider.inpaint(request, view)
        self._reply(200, {
            "candidates": [_b64(rgb_to_png_bytes(c)) for c in out.candidates],
        })

    def _depth(self, req):
        image = png_bytes_to_rgb(_unb64(req["image"]))
        view = self.view_factory(image.shape[1], image.shape[0])
        depth = self.provider.estimate_depth(image, view)
        self._reply(200, {"depth": _b64(depth_to_pfm_bytes(depth))})

    def _embed(self, req):
        image = png_bytes_to_rgb(_unb64(req["image"]))
        vec = self.provider.embed(image)
        self._reply(200, {"vector": [float(x) for x in vec]})


@dataclass
class ProviderServer:
    """In-process HTTP server exposing a provider on 127.0.0.1.

    The provider's geometric context comes from ``view_factory`` which maps
    a requested resolution to the camera view used for oracle answers.
    """

    provider: object
    view_factory: object = None

    def __post_init__(self):
        if self.view_factory is None:
            self.view_factory = lambda w, h: CameraView(
                Intrinsics.default(w, h), Pose.identity(), id=0)
        handler = type("BoundHandler", (_Handler,), {
            "provider": self.provider,
            "view_factory": staticmethod(self.view_factory),
        })
        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address
        return f"http://{host}:{port}"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._httpd.shutdown()
        self._httpd.server_close()


# ---------------------------------------------------------------------------
# conformance vectors


class ConformanceFailure(AssertionError):
    pass


def _check(cond: bool, name: str, detail: str = ""):
    if not cond:
        raise ConformanceFailure(f"{name}: {detail}")


def run_conformance(base_url: str, candidate_count: int = 30,
                    resolution: int = 32, http=None) -> list[str]:
    """Protocol test vectors; returns the names of the passed checks.

    Any implementation of the provider protocol (the in-process reference
    server or an external shim) must pass unmodified.
    """
    import requests as _requests

    http = http or _requests
    base = base_url.rstrip("/")
    passed = []
    rng = np.random.default_rng(1234)
    w = h = resolution

    def post(path, payload):
        return http.post(base + path, json=payload, timeout=120)

    # generate: round-trips at the requested resolution
    r = post("/v1/generate", {"prompt": "conformance", "width": w, "height": h, "seed": 3})
    _check(r.status_code == 200, "generate", f"status {r.status_code}: {r.text[:200]}")
    img = png_bytes_to_rgb(_unb64(r.json()["image"]))
    _check(img.shape == (h, w, 3), "generate", f"bad shape {img.shape}")
    passed.append("generate round-trip")

    # generate: deterministic under a fixed seed
    r2 = post("/v1/generate", {"prompt": "conformance", "width": w, "height": h, "seed": 3})
    img2 = png_bytes_to_rgb(_unb64(r2.json()["image"]))
    _check(np.array_equal(img, img2), "generate", "same seed must reproduce the image")
    passed.append("generate deterministic")

    # inpaint: candidate count + bit-exact compositing outside the mask
    base_img = rng.uniform(size=(h, w, 3))
    base_img = np.round(base_img * 255) / 255
    mask = np.zeros((h, w), dtype=bool)
    mask[h // 4 : h // 2, w // 4 : w // 2] = True
    r = post("/v1/inpaint", {
        "prompt": "conformance",
        "image": _b64(rgb_to_png_bytes(base_img)),
        "mask": _b64(mask_to_png_bytes(mask)),
        "num_candidates": candidate_count,
        "seed": 5,
    })
    _check(r.status_code == 200, "inpaint", f"status {r.status_code}: {r.text[:200]}")
    cands = [png_bytes_to_rgb(_unb64(c)) for c in r.json()["candidates"]]
    _check(len(cands) == candidate_count, "inpaint",
           f"expected {candidate_count} candidates, got {len(cands)}")
    for c in cands:
        _check(c.shape == (h, w, 3), "inpaint", f"bad candidate shape {c.shape}")
        _check(np.array_equal(c[~mask], base_img[~mask]), "inpaint",
               "pixels outside the mask must be bit-identical to the input")
    passed.append(f"inpaint count={candidate_count} + compositing invariant")

    # inpaint: empty mask is a usage error with a structured body
    r = post("/v1/inpaint", {
        "prompt": "conformance",
        "image": _b64(rgb_to_png_bytes(base_img)),
        "mask": _b64(mask_to_png_bytes(np.zeros((h, w), dtype=bool))),
        "num_candidates": 1,
        "seed": 5,
    })
    _check(400 <= r.status_code < 500, "inpaint-empty-mask", f"status {r.status_code}")
    err = r.json()
    _check("code" in err and "message" in err, "inpaint-empty-mask",
           "error body must carry code and message")
    passed.append("inpaint empty-mask error")

    # depth: PFM round-trip, positive values, right resolution
    r = post("/v1/depth", {"image": _b64(rgb_to_png_bytes(base_img))})
    _check(r.status_code == 200, "depth", f"status {r.status_code}: {r.text[:200]}")
    depth = pfm_bytes_to_depth(_unb64(r.json()["depth"]))
    _check(depth.shape == (h, w), "depth", f"bad shape {depth.shape}")
    _check(bool(np.all(depth.values[depth.valid] > 0)), "depth",
           "valid depth must be positive")
    passed.append("depth round-trip")

    # embed: finite fixed-length vector, deterministic
    r = post("/v1/embed", {"image": _b64(rgb_to_png_bytes(base_img))})
    _check(r.status_code == 200, "embed", f"status {r.status_code}")
    v1 = np.asarray(r.json()["vector"], dtype=np.float64)
    v2 = np.asarray(post("/v1/embed", {"image": _b64(rgb_to_png_bytes(base_img))}).json()["vector"])
    _check(v1.ndim == 1 and np.all(np.isfinite(v1)), "embed", "vector must be finite 1-D")
    _check(np.array_equal(v1, v2), "embed", "embedding must be deterministic")
    passed.append("embed deterministic")

    # malformed request: missing field -> 4xx with code/message
    r = post("/v1/generate", {"prompt": "x"})
    _check(400 <= r.status_code < 500, "missing-field", f"status {r.status_code}")
    err = r.json()
    _check("code" in err and "message" in err, "missing-field", "structured error required")
    passed.append("missing-field error")

    return passed
