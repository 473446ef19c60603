"""Training objectives: grounding, intra/inter matching, order discrimination.

Scalar conventions: single-video inputs are 1-D tensors and reduce by
summation over valid frames; batched inputs reduce per video first and then
average over the batch, keeping loss magnitude stable across batch sizes.
All logs and ratios are clamped at EPS = 1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

EPS = 1e-12

ORIGINAL_LABEL = 0
PSEUDO_LABEL = 1


class NonFiniteLossError(RuntimeError):
    """A loss component evaluated to NaN or infinity."""


def _as_float_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _clamped_log(x: Tensor) -> Tensor:
    return torch.log(torch.clamp(x, min=EPS))


def build_frame_labels(
    num_frames: int, start_frame: int, end_frame: int, dtype=torch.float64
) -> Tensor:
    """Per-frame moment indicator: 1 inside [start, end], else 0."""
    if not 0 <= start_frame <= end_frame <= num_frames - 1:
        raise ValueError(f"invalid span [{start_frame}, {end_frame}] for T={num_frames}")
    labels = torch.zeros(num_frames, dtype=dtype)
    labels[start_frame : end_frame + 1] = 1.0
    return labels


def bce_relevance(c, p, mask: Tensor | None = None) -> Tensor:
    """Binary cross-entropy of relevance scores against moment labels.

    Sums over valid frames per video; a batch reduces to the mean of the
    per-video sums.
    """
    c = _as_float_tensor(c)
    p = _as_float_tensor(p).to(c.dtype)
    terms = -(p * _clamped_log(c) + (1.0 - p) * _clamped_log(1.0 - c))
    if mask is not None:
        terms = terms * mask.to(terms.dtype)
    if terms.dim() == 1:
        return terms.sum()
    return terms.sum(dim=-1).mean()


def intra_loss(c_orig, p_orig, c_pseudo, p_pseudo, mask: Tensor | None = None) -> Tensor:
    """Mean of the original-video and pseudo-video relevance BCE terms."""
    return 0.5 * (bce_relevance(c_orig, p_orig, mask) + bce_relevance(c_pseudo, p_pseudo, mask))


def _span_kl(c_orig: Tensor, span_orig, c_pseudo: Tensor, span_pseudo) -> Tensor:
    s_o, e_o = int(span_orig[0]), int(span_orig[1])
    s_p, e_p = int(span_pseudo[0]), int(span_pseudo[1])
    if e_o - s_o != e_p - s_p:
        raise AssertionError(
            f"span length mismatch: original [{s_o},{e_o}] vs pseudo [{s_p},{e_p}]"
        )
    dist_o = torch.softmax(c_orig[s_o : e_o + 1], dim=-1)
    dist_p = torch.softmax(c_pseudo[s_p : e_p + 1], dim=-1)
    return (dist_o * (_clamped_log(dist_o) - _clamped_log(dist_p))).sum()


def inter_loss(c_orig, span_orig, c_pseudo, span_pseudo) -> Tensor:
    """KL divergence between softmaxed relevance scores inside the two spans.

    Spans must have equal length (the pseudo video preserves moment length);
    a mismatch is a bug upstream, not an input error.
    """
    c_orig = _as_float_tensor(c_orig)
    c_pseudo = _as_float_tensor(c_pseudo)
    if c_orig.dim() == 1:
        return _span_kl(c_orig, span_orig, c_pseudo, span_pseudo)
    values = [
        _span_kl(c_orig[i], span_orig[i], c_pseudo[i], span_pseudo[i])
        for i in range(c_orig.shape[0])
    ]
    return torch.stack(values).mean()


def _order_ce(logits: Tensor, label: int) -> Tensor:
    return -torch.log_softmax(logits, dim=-1)[..., label]


def order_loss(o_orig, o_pseudo, degenerate) -> Tensor:
    """Cross-entropy for the order discriminator over both videos.

    For degenerate triplets the pseudo video reproduces the original order,
    so its "shuffled" label would be false: the pseudo term is dropped and
    the original term halved to preserve the two-term scale.
    """
    o_orig = _as_float_tensor(o_orig)
    o_pseudo = _as_float_tensor(o_pseudo)
    ce_orig = _order_ce(o_orig, ORIGINAL_LABEL)
    ce_pseudo = _order_ce(o_pseudo, PSEUDO_LABEL)
    degen = torch.as_tensor(degenerate, dtype=torch.bool)
    per_sample = torch.where(degen, 0.5 * ce_orig, ce_orig + ce_pseudo)
    if per_sample.dim() == 0:
        return per_sample
    return per_sample.mean()


def grounding_loss(p_start, p_end, t_start, t_end) -> Tensor:
    """Negative log-likelihood of the original video's boundary indices."""
    p_start = _as_float_tensor(p_start)
    p_end = _as_float_tensor(p_end)
    if p_start.dim() == 1:
        return -(_clamped_log(p_start[int(t_start)]) + _clamped_log(p_end[int(t_end)]))
    t_start = torch.as_tensor(t_start, dtype=torch.long)
    t_end = torch.as_tensor(t_end, dtype=torch.long)
    picked_s = p_start.gather(1, t_start.view(-1, 1)).squeeze(1)
    picked_e = p_end.gather(1, t_end.view(-1, 1)).squeeze(1)
    return (-(_clamped_log(picked_s) + _clamped_log(picked_e))).mean()


@dataclass
class LossBundle:
    """Component losses, their weights, and the weighted total."""

    l_g: Tensor
    l_intra: Tensor
    l_inter: Tensor
    l_d: Tensor
    lambdas: tuple[float, float, float]
    total: Tensor

    def as_dict(self) -> dict[str, float]:
        return {
            "l_g": float(self.l_g.detach()),
            "l_intra": float(self.l_intra.detach()),
            "l_inter": float(self.l_inter.detach()),
            "l_d": float(self.l_d.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(l_g, l_intra, l_inter, l_d, lambdas=(1.0, 1.0, 1.0)) -> LossBundle:
    """Weighted sum of the four objectives; zero-weight terms are skipped,
    so the all-zero configuration reproduces the bare grounding loss bitwise.
    """
    components = {"l_g": l_g, "l_intra": l_intra, "l_inter": l_inter, "l_d": l_d}
    for name, value in components.items():
        if not torch.isfinite(_as_float_tensor(value)).all():
            raise NonFiniteLossError(f"loss component {name} is non-finite: {value}")
    l_g = _as_float_tensor(l_g)
    l_intra = _as_float_tensor(l_intra)
    l_inter = _as_float_tensor(l_inter)
    l_d = _as_float_tensor(l_d)
    lam1, lam2, lam3 = (float(v) for v in lambdas)
    if min(lam1, lam2, lam3) < 0:
        raise ValueError(f"loss weights must be non-negative, got {lambdas}")
    total = l_g
    if lam1 != 0.0:
        total = total + lam1 * l_intra
    if lam2 != 0.0:
        total = total + lam2 * l_inter
    if lam3 != 0.0:
        total = total + lam3 * l_d
    return LossBundle(
        l_g=l_g,
        l_intra=l_intra,
        l_inter=l_inter,
        l_d=l_d,
        lambdas=(lam1, lam2, lam3),
        total=total,
    )
