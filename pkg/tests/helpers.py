"""Shared test utilities: independent oracles and fixtures."""
import numpy as np

from fedrec.model import bce_loss, forward_batch


def numeric_grad(ps, name, UA, VA, groups, y, step=1e-5):
    """Central finite-difference gradient of the batch BCE w.r.t. one tensor."""
    t = ps.tensors[name]
    num = np.zeros_like(t)
    it = np.nditer(t, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        tp = t.copy()
        tp[idx] += step
        tm = t.copy()
        tm[idx] -= step
        lp = bce_loss(forward_batch(ps.with_tensors({name: tp}), UA, VA, groups)[0], y)
        lm = bce_loss(forward_batch(ps.with_tensors({name: tm}), UA, VA, groups)[0], y)
        num[idx] = (lp - lm) / (2.0 * step)
    return num


def max_rel_error(analytic, numeric, floor=1e-6):
    """Elementwise relative error with a denominator floor so that truncation
    noise on near-zero entries does not register as disagreement."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def brute_force_auc(scores, labels):
    """O(P*N) pairwise AUC; ties count half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def randomized_params(ps, seed, scale=0.05):
    """Perturb every tensor so adapters and gates are away from their zero init."""
    rng = np.random.default_rng(seed)
    return ps.with_tensors({n: t + rng.normal(0.0, scale, t.shape) for n, t in ps.tensors.items()})
