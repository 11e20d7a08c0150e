"""Generative-model providers: protocol types, the oracle test double, and
the remote HTTP client.

A provider supplies four capabilities: text-to-image generation, masked
inpainting, monocular depth estimation, and image embedding.  The oracle
provider answers all four from the procedural box room, so end-to-end
pipeline error is attributable purely to the geometry/optimization core.
Every provider's inpainting output is composited on receipt: pixels
outside the mask are bit-identical to the input.
"""

from __future__ import annotations

import base64
import time
from dataclasses import dataclass, field

import numpy as np
import requests

from .align import distort_depth
from .camera import CameraView, DepthMap, RegionMask
from .io import (
    pfm_bytes_to_depth,
    png_bytes_to_mask,
    png_bytes_to_rgb,
    quantize8,
    rgb_to_png_bytes,
    mask_to_png_bytes,
    depth_to_pfm_bytes,
)
from .oracle import OracleScene

__all__ = [
    "InpaintRequest",
    "CandidateSet",
    "ProviderError",
    "OracleProvider",
    "RemoteProvider",
    "embed_image",
    "cosine_similarity",
    "select_candidate",
]


class ProviderError(RuntimeError):
    """Transport or protocol failure from a provider backend."""

    def __init__(self, message: str, code: str = "provider_error", status: int | None = None):
        super().__init__(message)
        self.code = code
        self.status = status


@dataclass
class InpaintRequest:
    """Masked completion request; the mask marks pixels to synthesize."""

    prompt: str
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: RegionMask
    num_candidates: int = 30
    seed: int = 0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.shape[:2] != self.mask.missing.shape:
            raise ValueError("mask resolution must match the image")
        if self.num_candidates < 1:
            raise ValueError("need at least one candidate")
        if self.mask.is_empty():
            raise ValueError("inpainting an empty mask is a caller bug")


@dataclass
class CandidateSet:
    """Inpainting results; unmasked pixels equal the input bit-exactly."""

    candidates: list
    provider_id: str
    seed: int


def _composite(base: np.ndarray, patch: np.ndarray, missing: np.ndarray) -> np.ndarray:
    return np.where(missing[..., None], patch, base)


def _receive_candidates(req: InpaintRequest, raw: list, provider_id: str) -> CandidateSet:
    """Enforce the compositing invariant on every received candidate."""
    if not raw:
        raise ProviderError("provider returned zero candidates", code="empty_response")
    out = [_composite(req.image, np.asarray(c, dtype=np.float64), req.mask.missing)
           for c in raw]
    return CandidateSet(out, provider_id, req.seed)


# ---------------------------------------------------------------------------
# embedding (shared: the oracle embeds locally with the same code the
# pipeline uses on candidate images)


def embed_image(image: np.ndarray, grid: int = 8, bins: int = 16) -> np.ndarray:
    """Deterministic proxy embedding: coarse luminance + channel histograms.

    Both parts are mean-centered (plus one overall-luminance component) so
    that unrelated images do not correlate through the shared positive
    baseline; a color inversion flips the centered parts outright.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    lum = img @ np.array([0.299, 0.587, 0.114])
    ys = np.minimum((np.arange(h) * grid) // h, grid - 1)
    xs = np.minimum((np.arange(w) * grid) // w, grid - 1)
    cell = ys[:, None] * grid + xs[None, :]
    sums = np.bincount(cell.reshape(-1), weights=lum.reshape(-1), minlength=grid * grid)
    counts = np.bincount(cell.reshape(-1), minlength=grid * grid)
    coarse = sums / np.maximum(counts, 1)
    hists = [
        np.histogram(img[..., c], bins=bins, range=(0.0, 1.0))[0] / (h * w) - 1.0 / bins
        for c in range(3)
    ]
    return np.concatenate([[coarse.mean()], coarse - coarse.mean(), *hists])


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(a @ b) / (na * nb)


def select_candidate(candidates: CandidateSet, reference: np.ndarray,
                     embed=embed_image) -> np.ndarray:
    """Candidate most similar to the reference in embedding space.

    Ties break toward the lowest index (argmax keeps the first maximum).
    """
    if not candidates.candidates:
        raise ValueError("empty candidate set")
    ref = embed(reference)
    sims = np.array([cosine_similarity(ref, embed(c)) for c in candidates.candidates])
    return candidates.candidates[int(np.argmax(sims))]


# ---------------------------------------------------------------------------
# oracle provider


@dataclass
class OracleProvider:
    """Answers every provider call from the procedural scene.

    Needs the camera view as context (generation, inpainting and depth are
    all geometry-grounded); remote providers ignore that argument.  The
    optional depth distortion emulates a monocular estimator's error with
    the synthetic noise model.
    """

    scene: OracleScene
    depth_noise: bool = False
    noise_tau1: float = 0.5
    noise_tau2: float = 40.0
    prompts: list = field(default_factory=list)
    provider_id: str = "oracle"

    def generate_initial(self, prompt: str, view: CameraView, seed: int = 0) -> np.ndarray:
        self.prompts.append(prompt)  # recorded, deliberately unused
        rgb, _ = self.scene.render(view)
        return quantize8(rgb)

    def inpaint(self, req: InpaintRequest, view: CameraView) -> CandidateSet:
        gt = quantize8(self.scene.render(view)[0])
        raw = [gt] * req.num_candidates
        return _receive_candidates(req, raw, self.provider_id)

    def estimate_depth(self, image: np.ndarray, view: CameraView, seed: int = 0) -> DepthMap:
        depth = self.scene.depth(view)
        if self.depth_noise:
            depth = distort_depth(depth, self.noise_tau1, self.noise_tau2, seed=seed)
        vals = depth.values.astype(np.float32).astype(np.float64)  # wire precision
        return DepthMap(vals, depth.valid)

    def embed(self, image: np.ndarray) -> np.ndarray:
        return embed_image(image)


# ---------------------------------------------------------------------------
# remote provider (wire protocol client)


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"))


class RemoteProvider:
    """HTTP client for the provider wire protocol.

    JSON bodies with base64-encoded binary fields: images as lossless
    8-bit PNG, depth as 32-bit float PFM.  Transport failures and 5xx
    retry 3 times with exponential backoff (calls are idempotent by seed);
    4xx surface the server's {code, message} immediately.
    """

    def __init__(self, base_url: str, timeout: float = 60.0, retries: int = 3,
                 backoff: float = 0.5, session=None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = session or requests.Session()
        self.provider_id = f"remote:{self.base_url}"

    def _post(self, path: str, payload: dict) -> dict:
        url = self.base_url + path
        last_exc = None
        for attempt in range(self.retries + 1):
            try:
                resp = self.session.post(url, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * 2**attempt)
                    continue
                raise ProviderError(f"transport failure for {path}: {exc}",
                                    code="transport") from exc
            if resp.status_code >= 500 and attempt < self.retries:
                time.sleep(self.backoff * 2**attempt)
                continue
            if resp.status_code != 200:
                try:
                    err = resp.json()
                    code, message = err.get("code", "error"), err.get("message", resp.text)
                except ValueError:
                    code, message = "error", resp.text
                raise ProviderError(f"{path} failed ({resp.status_code}): {message}",
                                    code=code, status=resp.status_code)
            try:
                return resp.json()
            except ValueError as exc:
                raise ProviderError(f"malformed response body from {path}",
                                    code="malformed_response") from exc
        raise ProviderError(f"transport failure for {path}: {last_exc}", code="transport")

    def generate_initial(self, prompt: str, view: CameraView, seed: int = 0) -> np.ndarray:
        out = self._post("/v1/generate", {
            "prompt": prompt, "width": view.width, "height": view.height, "seed": seed,
        })
        img = png_bytes_to_rgb(_unb64(out["image"]))
        if img.shape[:2] != (view.height, view.width):
            raise ProviderError("generated image has the wrong resolution",
                                code="bad_resolution")
        return img

    def inpaint(self, req: InpaintRequest, view: CameraView | None = None) -> CandidateSet:
        out = self._post("/v1/inpaint", {
            "prompt": req.prompt,
            "image": _b64(rgb_to_png_bytes(req.image)),
            "mask": _b64(mask_to_png_bytes(req.mask.missing)),
            "num_candidates": req.num_candidates,
            "seed": req.seed,
        })
        raw = [png_bytes_to_rgb(_unb64(c)) for c in out.get("candidates", [])]
        for c in raw:
            if c.shape[:2] != req.image.shape[:2]:
                raise ProviderError("candidate resolution mismatch", code="bad_resolution")
        return _receive_candidates(req, raw, self.provider_id)

    def estimate_depth(self, image: np.ndarray, view: CameraView | None = None,
                       seed: int = 0) -> DepthMap:
        out = self._post("/v1/depth", {"image": _b64(rgb_to_png_bytes(image))})
        depth = pfm_bytes_to_depth(_unb64(out["depth"]))
        if depth.shape != image.shape[:2]:
            raise ProviderError("depth resolution mismatch", code="bad_resolution")
        # Non-positive estimates are clamped invalid rather than trusted.
        return DepthMap(np.where(depth.valid, depth.values, 0.0), depth.valid)

    def embed(self, image: np.ndarray) -> np.ndarray:
        out = self._post("/v1/embed", {"image": _b64(rgb_to_png_bytes(image))})
        vec = np.asarray(out["vector"], dtype=np.float64)
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise ProviderError("embedding must be a finite 1-D vector", code="bad_vector")
        return vec


def make_provider(spec: str, scene: OracleScene | None = None,
                  depth_noise: bool = False):
    """Factory: "oracle" (with a scene) or a remote base URL."""
    if spec == "oracle":
        if scene is None:
            raise ValueError("oracle provider needs a scene")
        return OracleProvider(scene, depth_noise=depth_noise)
    if spec.startswith("http://") or spec.startswith("https://"):
        return RemoteProvider(spec)
    raise ValueError(f"unknown provider spec {spec!r}")
