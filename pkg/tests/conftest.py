"""Shared fixtures: the desk-scale end-to-end run and the acceptance summary."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from corrvae.cli import main
from corrvae.datagen import read_dataset
from corrvae.model import load_checkpoint

ROOT = Path(__file__).resolve().parent.parent
DESK_CONFIG = ROOT / "configs" / "shapes_desk.json"
DESK_N, DESK_SEED = 5000, 7

_results: dict[str, tuple[bool, str]] = {}


def record(key: str, ok: bool, detail: str) -> None:
    _results[key] = (bool(ok), detail)


@dataclass
class DeskRun:
    root: Path
    data_dir: Path
    run_dir: Path
    eval_dir: Path
    train_seconds: float
    eval_seconds: float

    @property
    def checkpoint(self) -> Path:
        return self.run_dir / "model.ckpt"

    def model(self):
        return load_checkpoint(self.checkpoint)

    def dataset(self):
        return read_dataset(self.data_dir / "dataset.cvds")

    def test_split(self):
        n_test = json.loads(DESK_CONFIG.read_text()).get("data.n_test", 1000)
        return self.dataset().split(n_test)[1]

    def report(self) -> dict:
        return json.loads((self.eval_dir / "eval.json").read_text())


def run_pipeline(root: Path) -> tuple[Path, Path, float]:
    data_dir, run_dir = root / "data", root / "run"
    assert main(["gen-data", "--n", str(DESK_N), "--seed", str(DESK_SEED), "--out", str(data_dir)]) == 0
    start = time.perf_counter()
    assert main(["train", "--config", str(DESK_CONFIG), "--data", str(data_dir), "--out", str(run_dir)]) == 0
    return data_dir, run_dir, time.perf_counter() - start


@pytest.fixture(scope="session")
def desk(tmp_path_factory) -> DeskRun:
    root = tmp_path_factory.mktemp("desk")
    data_dir, run_dir, train_s = run_pipeline(root)
    eval_dir = root / "eval"
    start = time.perf_counter()
    assert main(["eval", "--ckpt", str(run_dir / "model.ckpt"), "--data", str(data_dir),
                 "--out", str(eval_dir)]) == 0
    return DeskRun(root, data_dir, run_dir, eval_dir, train_s, time.perf_counter() - start)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    subs = sorted(k for k in _results if k.startswith("8"))
    lines = {k: v for k, v in _results.items() if not k.startswith("8")}
    if subs:
        ok = all(_results[k][0] for k in subs)
        detail = ", ".join(f"{k[1:]} {'PASS' if _results[k][0] else 'FAIL'}" for k in subs)
        lines["8"] = (ok, detail)
    for key in sorted(lines, key=lambda k: int(k)):
        ok, detail = lines[key]
        tr.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
    for k in subs:
        ok, detail = _results[k]
        tr.write_line(f"  8{k[1:]}: {'PASS' if ok else 'FAIL'}  {detail}")
