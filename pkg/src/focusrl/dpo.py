"""Preference losses over win/lose path pairs, with analytic gradients.

The pair loss is the softplus form ln(1 + exp(-beta * z)) of the negative
log-sigmoid objective, where z is the policy-minus-reference log-likelihood
margin between the winning and the losing path.  Stage one trains the box
head alone; stage two jointly weights a box term and an answer term, both
conditioned on the winning crop, against a reference frozen right after
stage one.  Gradients come from the chain rule through the margin:
-beta * sigmoid(-beta * z) times the win-minus-lose log-likelihood
gradients, averaged over the batch in a fixed order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatch, WrongReference
from .policy import BBOX_HEAD, RESPONSE_HEAD, accumulate_grad_logprob, logprob

STAGE2_REFERENCE_PROVENANCE = "post-stage1"


@dataclass(frozen=True)
class DpoHyper:
    beta: float = 0.1
    beta_stage1: float = 0.1
    beta_stage2: float = 0.1
    lambda_box: float = 1.0
    lambda_resp: float = 1.0

    def __post_init__(self):
        for name in ("beta", "beta_stage1", "beta_stage2"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_box < 0.0 or self.lambda_resp < 0.0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_box + self.lambda_resp <= 0.0:
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True, eq=False)
class PreparedPair:
    """A preference pair joined with the model inputs needed to score it.

    ``resp_inputs`` conditions both answers on the crop of the winning box;
    the baseline trainer leaves the box fields None and uses only the answer
    side.
    """

    task_id: int
    bbox_inputs: tuple | None
    resp_inputs: tuple
    win_bbox_tokens: tuple | None
    lose_bbox_tokens: tuple | None
    win_resp: int
    lose_resp: int


def dpo_pair_loss(z: float, beta: float) -> float:
    """ln(1 + exp(-beta * z)): ln 2 at z = 0, strictly decreasing in z,
    evaluated in the overflow-safe split form."""
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    t = -beta * z
    return math.log1p(math.exp(-abs(t))) + max(t, 0.0)


def _sigmoid(t: float) -> float:
    if t >= 0.0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


def pair_log_ratio(params, ref, pair: PreparedPair, head: str, inputs=None) -> float:
    """Margin z: policy-vs-reference log-likelihood gap, win minus lose."""
    if inputs is None:
        inputs = pair.bbox_inputs if head == BBOX_HEAD else pair.resp_inputs
    if head == BBOX_HEAD:
        win, lose = pair.win_bbox_tokens, pair.lose_bbox_tokens
    else:
        win, lose = pair.win_resp, pair.lose_resp
    z_win = logprob(params, head, inputs, win) - logprob(ref, head, inputs, win)
    z_lose = logprob(params, head, inputs, lose) - logprob(ref, head, inputs, lose)
    return z_win - z_lose


def _head_batch_loss(params, ref, batch, beta: float, head: str, weight: float, grad: np.ndarray) -> float:
    """Mean pair loss on one head; adds ``weight`` times its gradient to
    ``grad``.  Batch order is respected, so results are bit-reproducible."""
    n = len(batch)
    total = 0.0
    for pair in batch:
        if head == BBOX_HEAD:
            inputs = pair.bbox_inputs
            win, lose = pair.win_bbox_tokens, pair.lose_bbox_tokens
        else:
            inputs = pair.resp_inputs
            win, lose = pair.win_resp, pair.lose_resp
        z = (
            logprob(params, head, inputs, win)
            - logprob(ref, head, inputs, win)
            - logprob(params, head, inputs, lose)
            + logprob(ref, head, inputs, lose)
        )
        total += dpo_pair_loss(z, beta)
        coef = weight * (-beta) * _sigmoid(-beta * z) / n
        accumulate_grad_logprob(params, head, inputs, win, coef, grad)
        accumulate_grad_logprob(params, head, inputs, lose, -coef, grad)
    return total / n


def stage1_batch(params, ref, batch, beta: float) -> tuple:
    """Mean box-head pair loss and its flat gradient.

    At ``params == ref`` every margin is zero, so the loss is exactly ln 2.
    """
    if not batch:
        raise EmptyBatch("stage-1 batch is empty")
    grad = np.zeros(params.dims.n_params)
    loss = _head_batch_loss(params, ref, batch, beta, BBOX_HEAD, 1.0, grad)
    return loss, grad


def stage2_batch(params, ref_hat, batch, hyper: DpoHyper) -> tuple:
    """Weighted joint loss: lambda_box * box term + lambda_resp * answer term.

    ``ref_hat`` must be the snapshot taken right after stage one; anything
    else is refused.  With lambda_resp = 0 this reduces to ``stage1_batch``
    at beta_stage2.
    """
    if not batch:
        raise EmptyBatch("stage-2 batch is empty")
    if getattr(ref_hat, "provenance", None) != STAGE2_REFERENCE_PROVENANCE:
        raise WrongReference(
            f"stage 2 requires the {STAGE2_REFERENCE_PROVENANCE!r} reference, "
            f"got {getattr(ref_hat, 'provenance', None)!r}"
        )
    grad = np.zeros(params.dims.n_params)
    loss = 0.0
    if hyper.lambda_box > 0.0:
        loss += hyper.lambda_box * _head_batch_loss(
            params, ref_hat, batch, hyper.beta_stage2, BBOX_HEAD, hyper.lambda_box, grad
        )
    if hyper.lambda_resp > 0.0:
        loss += hyper.lambda_resp * _head_batch_loss(
            params, ref_hat, batch, hyper.beta_stage2, RESPONSE_HEAD, hyper.lambda_resp, grad
        )
    return loss, grad


def response_dpo_batch(params, ref, batch, beta: float) -> tuple:
    """Plain pair loss on the answer head alone (the no-box baseline)."""
    if not batch:
        raise EmptyBatch("response batch is empty")
    grad = np.zeros(params.dims.n_params)
    loss = _head_batch_loss(params, ref, batch, beta, RESPONSE_HEAD, 1.0, grad)
    return loss, grad
