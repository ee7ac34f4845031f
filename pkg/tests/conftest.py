"""Shared builders for the test suite."""

import numpy as np

from focusrl.config import TrainConfig
from focusrl.dpo import PreparedPair
from focusrl.policy import PolicyDims


def tiny_dims() -> PolicyDims:
    """Small network that keeps finite-difference loops fast."""
    return PolicyDims(grid_size=4, n_shapes=3, n_colors=3, bins=8, hidden=8)


def random_prepared_pairs(dims: PolicyDims, rng: np.random.Generator, n: int) -> list:
    """Synthetic preference pairs with random inputs and distinct tokens."""
    out = []
    for _ in range(n):
        feats = rng.normal(size=dims.feature_dim)
        query = rng.normal(size=dims.query_dim)
        crop = rng.normal(size=dims.feature_dim)
        win = tuple(int(t) for t in rng.integers(0, dims.bins, 4))
        lose = tuple(int(t) for t in rng.integers(0, dims.bins, 4))
        while lose == win:
            lose = tuple(int(t) for t in rng.integers(0, dims.bins, 4))
        win_r = int(rng.integers(0, dims.vocab_size))
        lose_r = int(rng.integers(0, dims.vocab_size))
        while lose_r == win_r:
            lose_r = int(rng.integers(0, dims.vocab_size))
        out.append(
            PreparedPair(
                task_id=len(out),
                bbox_inputs=(feats, query),
                resp_inputs=(query, crop),
                win_bbox_tokens=win,
                lose_bbox_tokens=lose,
                win_resp=win_r,
                lose_resp=lose_r,
            )
        )
    return out


def mini_train_config(**overrides) -> TrainConfig:
    """Desk-run shape shrunk to seconds for orchestration tests."""
    base = dict(
        sft_size=24,
        rl_size=40,
        eval_size=16,
        sft_epochs=30,
        stage1_epochs=1,
        stage2_epochs=1,
        baseline_epochs=1,
        iterations=1,
        seed=7,
    )
    base.update(overrides)
    return TrainConfig(**base)


MINI_TOML = """\
seed = 7

[pools]
sft_size = 24
rl_size = 40
eval_size = 16

[train]
sft_epochs = 30
stage1_epochs = 1
stage2_epochs = 1
baseline_epochs = 1
iterations = 1
"""
