import os
import time
from pathlib import Path

import pytest

from streamgesture.config import Config

# a few optimiser steps on a handful of short sessions: exercises every code path in seconds
TINY = dict(svq1_steps=3, svq2_steps=3, svq_batch=8, expert_steps=2, fuse_steps=2, ar_batch=2, ar_crop=8,
            data_sessions=4, data_heldout=1, data_duration=4.0)


def tiny_config(**kw) -> Config:
    return Config.desk(**{**TINY, **kw})


@pytest.fixture(scope="session")
def tiny_bundle_dir(tmp_path_factory):
    from streamgesture.trainorch import run_plan
    out = tmp_path_factory.mktemp("tiny_bundle")
    run_plan(tiny_config(), out_dir=out)
    return out


@pytest.fixture(scope="session")
def desk_bundle(tmp_path_factory):
    """The desk-scale bundle used by the acceptance suite.

    Trained once per session. Set STREAMGESTURE_BUNDLE to a directory to
    reuse a bundle trained earlier (its recorded training time is used).
    """
    from streamgesture.bundle import Bundle
    from streamgesture.trainorch import run_plan

    reuse = os.environ.get("STREAMGESTURE_BUNDLE")
    if reuse and (Path(reuse) / "manifest.json").exists():
        b = Bundle.load(reuse)
        return {"bundle": b, "dir": Path(reuse), "train_seconds": b.manifest.get("train_seconds")}
    out = Path(reuse) if reuse else tmp_path_factory.mktemp("desk_bundle")
    t0 = time.perf_counter()
    run_plan(Config.desk(), out_dir=out)
    seconds = time.perf_counter() - t0
    b = Bundle.load(out)
    return {"bundle": b, "dir": out, "train_seconds": seconds}


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: dict[str, str] = {}


def record_acceptance(ac: str, ok: bool, detail: str) -> None:
    line = f"{ac}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[ac] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for ac in sorted(ACCEPTANCE, key=lambda k: int(k[2:])):
            terminalreporter.write_line(ACCEPTANCE[ac])
