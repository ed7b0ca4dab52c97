import json
import os
import socket
import subprocess
import sys
import time
import urllib.request
from contextlib import contextmanager
from pathlib import Path

import pytest

from batchgate.config import WorkloadConfig


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def wait_healthy(url: str, timeout: float = 15.0) -> None:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            with urllib.request.urlopen(url, timeout=1) as resp:
                if resp.status == 200:
                    return
        except OSError:
            time.sleep(0.1)
    raise RuntimeError(f"{url} never became healthy")


def get_json(url: str) -> dict:
    with urllib.request.urlopen(url, timeout=5) as resp:
        return json.loads(resp.read())


@contextmanager
def serve(args, health_url: str):
    """Run ``python -m batchgate <args>`` until the block exits."""
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    proc = subprocess.Popen([sys.executable, "-m", "batchgate", "--log-level", "WARNING", *args],
                            env=env, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
    try:
        wait_healthy(health_url)
        yield proc
    finally:
        proc.terminate()
        try:
            proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()


@contextmanager
def live_stack(tmp_path: Path, mode: str = "on", noise_cv: float = 0.1, **cfg_fields):
    """Mock backend plus proxy, both as subprocesses. Yields (proxy_base, backend_base, cfg)."""
    bport, pport = free_port(), free_port()
    backend_base = f"http://127.0.0.1:{bport}"
    proxy_base = f"http://127.0.0.1:{pport}"
    doc = {"name": "mnist", "upstream_url": f"{backend_base}/predict", "slo_target_ms": 500}
    doc.update(cfg_fields)
    cfg_path = tmp_path / f"proxy-{pport}.json"
    cfg_path.write_text(json.dumps(doc))
    with serve(["backend", "--preset", "mnist", "--noise-cv", str(noise_cv), "--seed", "1",
                "--listen", f"127.0.0.1:{bport}"], f"{backend_base}/healthz"):
        with serve(["proxy", "--config", str(cfg_path), "--listen", f"127.0.0.1:{pport}",
                    "--mode", mode], f"{proxy_base}/healthz"):
            yield proxy_base, backend_base, WorkloadConfig(**doc)


@pytest.fixture
def cfg():
    return WorkloadConfig(name="mnist", upstream_url="http://127.0.0.1:1/predict", slo_target_ms=500)


ACCEPTANCE = []


def report_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
