"""Region-word alignment: similarity matrix, symmetric InfoNCE, total loss."""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

# 1/tau = 14.3 at init, in line with common VLM practice
DEFAULT_INV_TAU_INIT = 14.3


@dataclass
class LossWeights:
    lambda_kg: float = 8.0
    lambda_seg_v: float = 1.0
    lambda_seg_t: float = 1.0
    lambda_hcl: float = 0.5

    def __post_init__(self):
        for name in ("lambda_kg", "lambda_seg_v", "lambda_seg_t", "lambda_hcl"):
            if getattr(self, name) < 0:
                raise ValueError("%s must be non-negative" % name)


class Temperature(nn.Module):
    """Learnable positive temperature, parameterized on the log scale."""

    def __init__(self, inv_tau_init=DEFAULT_INV_TAU_INIT):
        super().__init__()
        self.log_tau = nn.Parameter(torch.tensor(math.log(1.0 / inv_tau_init)))

    @property
    def tau(self):
        return torch.exp(self.log_tau)


def similarity_matrix(ev, et):
    """Pairwise cosine similarities S[i, j] = <ev_i, et_j> (unit-norm inputs)."""
    if ev.shape != et.shape:
        raise ValueError("embedding batches differ: %r vs %r"
                         % (tuple(ev.shape), tuple(et.shape)))
    if ev.ndim != 2 or ev.shape[0] < 1:
        raise ValueError("expected B x C with B >= 1")
    return ev @ et.t()


def hcl_loss(S, tau):
    """Symmetric InfoNCE over the similarity matrix.

    Averages row-wise and column-wise cross-entropy of the diagonal at
    temperature tau.
    """
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("S must be square")
    if not torch.isfinite(S).all():
        raise ValueError("non-finite similarity entries")
    logits = S / tau
    B = S.shape[0]
    targets = torch.arange(B, device=S.device)
    row = F.cross_entropy(logits, targets)
    col = F.cross_entropy(logits.t(), targets)
    return 0.5 * (row + col)


class LossTermError(RuntimeError):
    """A loss term went non-finite; carries the offending term name."""

    def __init__(self, name, value):
        super().__init__("loss term %r is non-finite (%r)" % (name, value))
        self.term = name


def total_loss(parts, weights):
    """Weighted sum of the four loss terms.

    parts maps term name -> scalar tensor; absent terms are skipped (their
    weight contributes nothing). Raises LossTermError on NaN/Inf parts.
    """
    term_weights = {
        "kg": weights.lambda_kg,
        "seg_v": weights.lambda_seg_v,
        "seg_t": weights.lambda_seg_t,
        "hcl": weights.lambda_hcl,
    }
    total = None
    for name, value in parts.items():
        if name not in term_weights:
            raise KeyError("unknown loss term %r" % name)
        if not torch.isfinite(value):
            raise LossTermError(name, value)
        contrib = term_weights[name] * value
        total = contrib if total is None else total + contrib
    if total is None:
        raise ValueError("no loss terms given")
    return total
