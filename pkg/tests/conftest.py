import json
import os
import subprocess
import sys

import numpy as np
import pytest

from sliceseq.pipeline import RunConfig

# small-but-real defaults; individual tests override what they probe
TINY = dict(
    d_repr=8,
    M=16,
    layers=1,
    heads=2,
    K=6,
    N=12,
    dropout=0.0,
    lr=1e-3,
    batch=4,
    epochs=3,
    seed=0,
    T=50,
    diff_width=16,
    diff_t_dim=8,
    diff_epochs=2,
    diff_lr=1e-3,
    diff_batch=32,
    patients=12,
    K_true=4,
    n_lesion=1,
    class_signal=1.0,
    noise=0.1,
    n_min=4,
    kmeans_n_init=2,
    kmeans_max_iters=50,
)


def tiny_cfg(**over) -> RunConfig:
    raw = dict(TINY)
    raw.update(over)
    return RunConfig.from_dict(raw)


@pytest.fixture
def cfg(tmp_path) -> RunConfig:
    return tiny_cfg(workdir=str(tmp_path / "run"))


def run_cli(args: list[str], env_extra: dict | None = None, cwd: str | None = None):
    """Run the CLI in a subprocess; returns (exit_code, stdout, stderr)."""
    env = dict(os.environ)
    env.pop("SLICESEQ_WORKDIR", None)
    if env_extra:
        env.update(env_extra)
    proc = subprocess.run(
        [sys.executable, "-m", "sliceseq", *args],
        capture_output=True,
        text=True,
        env=env,
        cwd=cwd,
    )
    return proc.returncode, proc.stdout, proc.stderr


def write_cfg(path, cfg: RunConfig) -> str:
    path = str(path)
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh)
    return path


def random_batch(rng: np.random.Generator, b: int, n: int, d: int, K: int):
    """Padded batch with at least one real slice per row and sentinel ids
    at pads."""
    from sliceseq.clustervit import SequenceBatch

    counts = rng.integers(1, n + 1, size=b)
    mask = np.zeros((b, n), dtype=bool)
    for i, c in enumerate(counts):
        mask[i, :c] = True
    feats = rng.standard_normal((b, n, d)).astype(np.float32)
    feats[~mask] = 0.0
    cid = rng.integers(0, K, size=(b, n)).astype(np.int64)
    cid[~mask] = K
    labels = rng.integers(0, 2, size=b)
    pids = tuple(f"p{i}" for i in range(b))
    return SequenceBatch(feats, cid, mask, labels, pids)
