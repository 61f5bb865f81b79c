"""Loss terms for gradient-matched federated training.

Everything here is recorded on a Tape, including the closed-form gradient of
the batch-mean cross-entropy with respect to the classifier head:

    grad_W = (P - Y)^T H / B        grad_b = column-mean(P - Y)

with P = softmax(H W^T + b) and Y the one-hot labels. Because that gradient
is itself a tape expression, cosine losses built on top of it backpropagate
into the features and the live head with ordinary first-order reverse mode.

The combined local objective is

    0.5 (ce_orig + ce_aug) + lam * intra + (1 - lam) * inter

where ``intra`` matches head gradients between the original and augmented
batch under the live head, and ``inter`` sums 1 - cosine between the
augmented-batch gradient and the gradient computed under each frozen head
snapshot from the previous round.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, as_tensor
from .errors import ContractError, ShapeError, UsageError
from .model import HeadSnapshot, ModelParams, ParamNodes, forward, stage_params

COSINE_EPS = 1e-12


@dataclass
class LossBreakdown:
    """Scalar values of every term in one local-loss evaluation."""

    ce_orig: float
    ce_aug: float
    intra: float
    inter: float
    total: float
    lam: float


def one_hot(y, classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).ravel()
    bad = (y < 0) | (y >= classes)
    if bad.any():
        idx = int(np.argmax(bad))
        raise UsageError(f"label {y[idx]} at index {idx} outside [0, {classes})")
    out = np.zeros((y.size, classes))
    out[np.arange(y.size), y] = 1.0
    return out


def _ce_from_log_probs(tape: Tape, logp: int, y_mat: int, batch: int) -> int:
    picked = ad.reduce_sum(tape, ad.mul(tape, logp, y_mat))
    return ad.scale(tape, picked, -1.0 / batch)


def cross_entropy(tape: Tape, z: int, y) -> int:
    """Batch-mean negative log-likelihood of the true classes."""
    zval = tape.value(z)
    if zval.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-d, got dims {zval.shape}")
    batch, classes = zval.shape
    y_mat = tape.constant(one_hot(y, classes))
    logp = ad.log_softmax_rows(tape, z)
    return _ce_from_log_probs(tape, logp, y_mat, batch)


def _as_node(tape: Tape, value_or_node) -> int:
    if isinstance(value_or_node, (int, np.integer)):
        return int(value_or_node)
    return tape.constant(as_tensor(value_or_node))


def _head_grad_from_probs(tape: Tape, h: int, y_mat: int, p: int, batch: int, ones: int) -> int:
    """grad_W and grad_b assembled from an existing softmax node."""
    diff_t = ad.transpose(tape, ad.sub(tape, p, y_mat))
    gw = ad.scale(tape, ad.matmul(tape, diff_t, h), 1.0 / batch)
    gb = ad.scale(tape, ad.matmul(tape, diff_t, ones), 1.0 / batch)
    return ad.flatten_concat(tape, (gw, gb))


def head_grad(tape: Tape, h: int, y, head_w, head_b) -> int:
    """Closed-form head gradient of the batch-mean cross-entropy.

    ``head_w``/``head_b`` may be tape nodes (live head: adjoints flow into
    them) or raw arrays (frozen snapshot: staged as constants, no adjoints).
    Returns a flat node of length classes * d_h + classes, weight row-major
    followed by bias.
    """
    w_id = _as_node(tape, head_w)
    b_id = _as_node(tape, head_b)
    hval = tape.value(h)
    wval = tape.value(w_id)
    if hval.ndim != 2 or wval.ndim != 2 or hval.shape[1] != wval.shape[1]:
        raise ShapeError(
            f"head_grad: features {hval.shape} and head weight {wval.shape} are not conformable"
        )
    batch = hval.shape[0]
    classes = wval.shape[0]
    z = ad.add(tape, ad.matmul(tape, h, ad.transpose(tape, w_id)), b_id)
    p = ad.exp(tape, ad.log_softmax_rows(tape, z))
    y_mat = tape.constant(one_hot(y, classes))
    ones = tape.constant(np.ones((batch, 1)))
    return _head_grad_from_probs(tape, h, y_mat, p, batch, ones)


def _cosine_from_parts(tape: Tape, u: int, v: int, u_norm: int, eps: int) -> int:
    num = ad.dot(tape, u, v)
    den = ad.add(tape, ad.mul(tape, u_norm, ad.l2_norm(tape, v)), eps)
    return ad.div(tape, num, den)


def cosine_sim(tape: Tape, u: int, v: int) -> int:
    """(u . v) / (|u| |v| + 1e-12), kept differentiable near zero vectors."""
    if tape.value(u).size != tape.value(v).size:
        raise ShapeError(
            f"cosine_sim: dims {tape.value(u).shape} and {tape.value(v).shape} have different sizes"
        )
    return _cosine_from_parts(tape, u, v, ad.l2_norm(tape, u), tape.constant(COSINE_EPS))


def intra_gm_loss(tape: Tape, g: int, g_aug: int) -> int:
    """1 - cosine(g, g_aug); zero when augmentation leaves gradients alone."""
    return ad.sub(tape, tape.constant(1.0), cosine_sim(tape, g, g_aug))


def _inter_terms(tape, g_aug, snapshots, h_orig, y_mat, *, normalize, g_aug_norm, eps, one, ones_col):
    batch = tape.value(h_orig).shape[0]
    total = None
    for snap in snapshots:
        # snapshot heads are constants: staged pre-transposed, no adjoints
        z_j = ad.add(tape, ad.matmul(tape, h_orig, tape.constant(snap.weight.T)), tape.constant(snap.bias))
        p_j = ad.exp(tape, ad.log_softmax_rows(tape, z_j))
        g_j = _head_grad_from_probs(tape, h_orig, y_mat, p_j, batch, ones_col)
        cos = _cosine_from_parts(tape, g_aug, g_j, g_aug_norm, eps)
        term = ad.sub(tape, one, cos)
        total = term if total is None else ad.add(tape, total, term)
    if normalize:
        total = ad.scale(tape, total, 1.0 / len(snapshots))
    return total


def inter_gm_loss(
    tape: Tape,
    g_aug: int,
    snapshots: Sequence[HeadSnapshot],
    h_orig: int,
    y,
    *,
    normalize: bool = False,
) -> int:
    """Sum over snapshots of 1 - cosine(g_aug, snapshot-head gradient).

    Snapshot gradients are taken on the original batch under each frozen
    head, so adjoints reach the features and g_aug but never the snapshots.
    ``normalize`` divides the sum by the snapshot count.
    """
    if not snapshots:
        raise ContractError("inter_gm_loss: empty snapshot list (skip the term instead)")
    hval = tape.value(h_orig)
    classes = snapshots[0].weight.shape[0]
    return _inter_terms(
        tape,
        g_aug,
        snapshots,
        h_orig,
        tape.constant(one_hot(y, classes)),
        normalize=normalize,
        g_aug_norm=ad.l2_norm(tape, g_aug),
        eps=tape.constant(COSINE_EPS),
        one=tape.constant(1.0),
        ones_col=tape.constant(np.ones((hval.shape[0], 1))),
    )


def local_loss(
    tape: Tape,
    params: ModelParams | ParamNodes,
    snapshots: Sequence[HeadSnapshot],
    X,
    X_aug,
    y,
    lam: float,
    *,
    inter_normalize: bool = False,
    gm_enabled: bool = True,
) -> tuple[int, LossBreakdown]:
    """Combined local objective; returns (total node, scalar breakdown).

    With no snapshots (round 1) the inter term is skipped. With
    ``gm_enabled=False`` both matching terms are dropped and the loss is the
    plain averaged cross-entropy, which is the federated-averaging baseline.
    """
    if not 0.0 <= lam <= 1.0:
        raise UsageError(f"lambda must lie in [0, 1], got {lam}")
    X = as_tensor(X)
    X_aug = as_tensor(X_aug)
    if X.shape != X_aug.shape:
        raise ShapeError(f"original batch {X.shape} and augmented batch {X_aug.shape} differ")
    if isinstance(params, ModelParams):
        params = stage_params(tape, params)
    batch = X.shape[0]
    classes = tape.value(params.head_w).shape[0]
    y_mat = tape.constant(one_hot(y, classes))
    h_orig, z_orig = forward(tape, params, X)
    h_aug, z_aug = forward(tape, params, X_aug)
    logp_o = ad.log_softmax_rows(tape, z_orig)
    logp_a = ad.log_softmax_rows(tape, z_aug)
    ce_o = _ce_from_log_probs(tape, logp_o, y_mat, batch)
    ce_a = _ce_from_log_probs(tape, logp_a, y_mat, batch)
    total = ad.scale(tape, ad.add(tape, ce_o, ce_a), 0.5)
    intra_val = 0.0
    inter_val = 0.0
    if gm_enabled:
        # the live-head gradients reuse the forward log-probabilities
        ones_col = tape.constant(np.ones((batch, 1)))
        g = _head_grad_from_probs(tape, h_orig, y_mat, ad.exp(tape, logp_o), batch, ones_col)
        g_aug = _head_grad_from_probs(tape, h_aug, y_mat, ad.exp(tape, logp_a), batch, ones_col)
        eps = tape.constant(COSINE_EPS)
        one = tape.constant(1.0)
        g_aug_norm = ad.l2_norm(tape, g_aug)
        intra = ad.sub(tape, one, _cosine_from_parts(tape, g_aug, g, g_aug_norm, eps))
        total = ad.add(tape, total, ad.scale(tape, intra, lam))
        intra_val = float(tape.value(intra))
        if snapshots:
            inter = _inter_terms(
                tape,
                g_aug,
                snapshots,
                h_orig,
                y_mat,
                normalize=inter_normalize,
                g_aug_norm=g_aug_norm,
                eps=eps,
                one=one,
                ones_col=ones_col,
            )
            total = ad.add(tape, total, ad.scale(tape, inter, 1.0 - lam))
            inter_val = float(tape.value(inter))
    breakdown = LossBreakdown(
        ce_orig=float(tape.value(ce_o)),
        ce_aug=float(tape.value(ce_a)),
        intra=intra_val,
        inter=inter_val,
        total=float(tape.value(total)),
        lam=lam,
    )
    return total, breakdown
