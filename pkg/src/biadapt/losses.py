"""Training objectives for forward/backward adaptation and the ablation adapters.

All expectations are batch means. Probabilities fed to logarithms are clamped
to ``[EPS, 1 - EPS]``.

Sign convention for the adversarial term: :func:`loss_adv` is the
discriminator's objective (it is maximised over Q). The extractor never
minimises it directly; it is handed the same objective with the domain roles
swapped, ``loss_adv(p_tgt, p_src)``, and :func:`loss_fas` / :func:`loss_bas`
subtract it. Minimising ``-loss_adv(p_tgt, p_src)`` is the non-saturating
confusion loss ``-E_tgt[log p] - E_src[log(1 - p)]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-7


class DomainError(ValueError):
    pass


class SizeError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    alpha4: float = 1.0
    tau: float = 0.5

    def __post_init__(self) -> None:
        if min(self.alpha1, self.alpha2, self.alpha3, self.alpha4) < 0:
            raise DomainError("loss weights must be non-negative")
        if not self.tau > 0:
            raise DomainError(f"tau must be positive, got {self.tau}")


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(EPS, 1 - EPS)


def loss_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and ((labels < 0) | (labels > 1)).any():
        raise DomainError("labels must be 0 (real) or 1 (fake)")
    return -logits.log_softmax(dim=-1).gather(-1, labels[:, None]).mean()


def loss_adv(p_source_src: torch.Tensor, p_source_tgt: torch.Tensor) -> torch.Tensor:
    """``E_src[log p] + E_tgt[log(1 - p)]`` where p is Q's source probability."""
    if p_source_src.numel() == 0 or p_source_tgt.numel() == 0:
        raise SizeError("adversarial loss needs non-empty source and target batches")
    return _clamp(p_source_src).log().mean() + (1 - _clamp(p_source_tgt)).log().mean()


def domain_confusion(p_source_src: torch.Tensor, p_source_tgt: torch.Tensor) -> torch.Tensor:
    """Mean of :func:`loss_adv` under true and swapped domain roles.

    Maximised (by the extractor) exactly when Q outputs 0.5 everywhere, so
    unlike the swapped-role form it gives no incentive to exchange domains.
    """
    return 0.5 * (loss_adv(p_source_src, p_source_tgt) + loss_adv(p_source_tgt, p_source_src))


def loss_fas(ce: torch.Tensor, adv: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Forward-stage extractor objective; ``adv`` is ``loss_adv`` with domains swapped."""
    return w.alpha1 * ce - w.alpha2 * adv


def distill_prob(logits: torch.Tensor, tau: float) -> torch.Tensor:
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    return (logits / tau).softmax(dim=-1)


def loss_sd(teacher_logits: torch.Tensor, student_logits: torch.Tensor, tau: float,
            detach_teacher: bool = True) -> torch.Tensor:
    if teacher_logits.shape != student_logits.shape:
        raise SizeError(f"teacher/student batch mismatch: {tuple(teacher_logits.shape)} vs "
                        f"{tuple(student_logits.shape)}")
    if detach_teacher:
        teacher_logits = teacher_logits.detach()
    p = distill_prob(teacher_logits, tau)
    log_q = (student_logits / tau).log_softmax(dim=-1)
    return -(p * log_q).sum(dim=-1).mean()


def loss_bas(sd: torch.Tensor, adv: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Backward-stage student objective, same adversarial sign convention as :func:`loss_fas`."""
    return w.alpha3 * sd - w.alpha4 * adv


def loss_entropy_min(logits: torch.Tensor) -> torch.Tensor:
    logp = logits.log_softmax(dim=-1)
    return -(logp.exp() * logp).sum(dim=-1).mean()


def entropy(probs: torch.Tensor) -> torch.Tensor:
    """Per-row Shannon entropy (natural log), with 0 log 0 = 0."""
    return -torch.special.xlogy(probs, probs).sum(dim=-1)


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a[:, None, :] - b[None, :, :]).pow(2).sum(-1)


def loss_mmd(features_src: torch.Tensor, features_tgt: torch.Tensor,
             bandwidth_scales: tuple[float, ...] = (0.5, 1.0, 2.0)) -> torch.Tensor:
    """Biased squared MMD with a Gaussian kernel mixture.

    Bandwidths are the median pairwise distance of the pooled batch times each
    scale. The median is differentiated through like everything else.
    """
    if len(features_src) < 2 or len(features_tgt) < 2:
        raise SizeError("MMD needs at least 2 samples per batch")
    pooled = torch.cat([features_src, features_tgt])
    d2 = _sq_dists(pooled, pooled)
    n = len(pooled)
    # clamp before sqrt: coincident points would otherwise give an infinite gradient
    off = d2[~torch.eye(n, dtype=torch.bool)].clamp_min(1e-24).sqrt()
    med = off.quantile(0.5).clamp_min(1e-12)
    k = sum(torch.exp(-d2 / (2 * (s * med) ** 2)) for s in bandwidth_scales) / len(bandwidth_scales)
    m = len(features_src)
    kss, ktt, kst = k[:m, :m], k[m:, m:], k[:m, m:]
    return (kss.mean() + ktt.mean() - 2 * kst.mean()).clamp_min(0.0)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lam * grad, None


def gradient_reversal(f: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    return _GradReverse.apply(f, lam)
