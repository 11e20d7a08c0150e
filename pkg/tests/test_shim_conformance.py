"""Provider-protocol conformance of the external model shim.

Runs the primary component's protocol test vectors against a live shim
instance.  The shim is a separate package (shim/); these tests skip when
it has not been built, so the primary suite stands alone.  Set SHIM_URL
to target an already-running instance instead of spawning one.
"""

import os
import shutil
import socket
import subprocess
import time
from pathlib import Path

import pytest
import requests

from sceneweaver.protocol import run_conformance

SHIM_DIST = Path(__file__).resolve().parent.parent / "shim" / "dist" / "main.js"


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="module")
def shim_url():
    url = os.environ.get("SHIM_URL")
    if url:
        yield url.rstrip("/")
        return
    if not SHIM_DIST.exists() or shutil.which("node") is None:
        pytest.skip("shim not built (cd shim && npm install && npm run build)")
    port = _free_port()
    proc = subprocess.Popen(
        ["node", str(SHIM_DIST), "--port", str(port)],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
    )
    base = f"http://127.0.0.1:{port}"
    try:
        for _ in range(50):
            if proc.poll() is not None:
                out = proc.stdout.read().decode() if proc.stdout else ""
                pytest.fail(f"shim exited early: {out}")
            try:
                if requests.get(base + "/v1/health", timeout=1).status_code == 200:
                    break
            except requests.RequestException:
                time.sleep(0.2)
        else:
            pytest.fail("shim did not become healthy")
        yield base
    finally:
        proc.terminate()
        proc.wait(timeout=10)


def test_health_reports_models(shim_url):
    body = requests.get(shim_url + "/v1/health", timeout=10).json()
    assert body["status"] == "ok"
    assert set(body["models"]) >= {"generation", "inpainting", "depth", "embedding"}


def test_protocol_vectors_pass_against_live_shim(shim_url):
    # Same vectors the reference in-process server passes: schema checks,
    # resolution preservation, compositing invariant, 30 candidates,
    # determinism, and structured error codes.
    passed = run_conformance(shim_url, candidate_count=30, resolution=32)
    assert len(passed) == 7


def test_shim_refuses_unknown_model():
    if not SHIM_DIST.exists() or shutil.which("node") is None:
        pytest.skip("shim not built")
    proc = subprocess.run(
        ["node", str(SHIM_DIST), "--port", str(_free_port()),
         "--depth-model", "builtin:doesnotexist"],
        capture_output=True, timeout=30,
    )
    assert proc.returncode != 0
    assert b"refusing to start" in proc.stderr + proc.stdout
