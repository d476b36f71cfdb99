"""Run configuration: one serializable record of everything a run needs.

Every artifact directory gets the resolved config, the git description,
and the seed written next to the outputs, so a run can be reproduced
from the directory alone.
"""

from __future__ import annotations

import dataclasses
import json
import subprocess
from dataclasses import dataclass
from pathlib import Path


@dataclass
class RunConfig:
    seed: int = 0
    scale_ratio: float = 0.01         # step-count divisor vs the reference schedule
    rank: int = 4
    alpha: float | None = None        # defaults to rank (scaling factor 1.0)
    clean_prob: float = 0.05
    batch_size: int = 16
    # model dims
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    fusion_layers: int = 2
    classifier_channels: int = 64
    # corpus defaults
    train_count: int = 2000
    test_count: int = 200
    pretrain_count: int = 2000
    noise_clips: int = 100
    # training step counts outside the scaled distill schedule
    base_steps: int = 500
    classifier_steps: int = 1500
    lr_multiplier_after_stage1: float = 1.0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(**json.loads(text))


def git_describe(repo_root: str | Path | None = None) -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=repo_root, capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        pass
    return "unknown"


def write_run_stamp(out_dir: str | Path, cfg: RunConfig,
                    extra: dict | None = None) -> None:
    """Drop run_config.json next to the artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = {
        "config": dataclasses.asdict(cfg),
        "git": git_describe(),
        "seed": cfg.seed,
    }
    stamp.update(extra or {})
    (out / "run_config.json").write_text(json.dumps(stamp, indent=1))
