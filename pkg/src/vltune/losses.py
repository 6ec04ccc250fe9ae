"""Training objectives: InfoNCE, consistency-regularized contrastive (CO2) loss, ITC, and the total."""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import torch
import torch.nn.functional as F

from .config import ModelConfig
from .errors import InputError

KL_FLOOR = 1e-8
NORM_TOL = 1e-6


@dataclass
class BranchEmbeddings:
    """Projected, unit-norm embeddings of the four branches for one batch (rows = samples)."""

    z_img_orig: torch.Tensor
    z_img_aug: torch.Tensor | None
    z_txt_orig: torch.Tensor
    z_txt_aug: torch.Tensor | None
    # optional [N, N] matrix of <image j, text l> similarities computed on cross-attended
    # (image j, text l) pairs; replaces z_img_orig @ z_txt_orig.T in the ITC term
    pair_similarity: torch.Tensor | None = None

    def validate(self, check_norm: bool = True):
        tensors = {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if f.name != "pair_similarity" and getattr(self, f.name) is not None
        }
        shapes = {t.shape for t in tensors.values()}
        if len(shapes) != 1 or next(iter(shapes)).__len__() != 2:
            raise InputError(f"branch embeddings must share one [N, d] shape, got {{{', '.join(f'{k}: {tuple(v.shape)}' for k, v in tensors.items())}}}")
        if check_norm:
            for name, t in tensors.items():
                norms = t.detach().norm(dim=-1)
                if not torch.allclose(norms, torch.ones_like(norms), atol=NORM_TOL, rtol=0):
                    raise InputError(f"{name} rows must be unit-norm (max deviation {float((norms - 1).abs().max()):.2e})")
        return self


@dataclass
class LossReport:
    l_nce_img: float
    l_nce_txt: float
    l_cons_img: float
    l_cons_txt: float
    l_co2_img: float
    l_co2_txt: float
    l_con: float
    l_sim_it: float
    l_total: float

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def values(self) -> tuple:
        return astuple(self)

    def to_row(self, step: int) -> str:
        """One tab-separated training-log line; floats use repr so the line round-trips exactly."""
        return "\t".join([str(step)] + [repr(float(v)) for v in self.values()])

    def is_finite(self) -> bool:
        return all(v == v and abs(v) != float("inf") for v in self.values())


def _check_dims(*tensors):
    d = tensors[0].shape[-1]
    for t in tensors[1:]:
        if t.shape[-1] != d:
            raise InputError(f"embedding width mismatch: {d} vs {t.shape[-1]}")


def info_nce(q, p, negatives, tau: float):
    """``-log(e^{q.p/tau} / (e^{q.p/tau} + sum_k e^{q.n_k/tau}))``; broadcasts over leading dims."""
    if negatives.dim() < 2 or negatives.shape[-2] < 1:
        raise InputError("info_nce needs at least one negative key")
    _check_dims(q, p, negatives)
    pos = (q * p).sum(-1, keepdim=True)
    neg = (q.unsqueeze(-2) * negatives).sum(-1)
    logits = torch.cat([pos, neg], dim=-1) / tau
    return -logits.log_softmax(dim=-1)[..., 0]


def similarity_distribution(anchor, negatives, tau_con: float):
    """Softmax over ``anchor . n_k / tau_con``."""
    if negatives.dim() < 2 or negatives.shape[-2] < 1:
        raise InputError("similarity_distribution needs at least one negative key")
    _check_dims(anchor, negatives)
    return ((anchor.unsqueeze(-2) * negatives).sum(-1) / tau_con).softmax(dim=-1)


def consistency_kl(P, Q, eps: float = KL_FLOOR):
    """Symmetric KL ``(KL(P||Q) + KL(Q||P)) / 2`` with probabilities floored at ``eps``."""
    if P.shape != Q.shape:
        raise InputError(f"distribution length mismatch: {tuple(P.shape)} vs {tuple(Q.shape)}")
    P = P.clamp_min(eps)
    Q = Q.clamp_min(eps)
    log_ratio = P.log() - Q.log()
    return 0.5 * ((P * log_ratio).sum(-1) - (Q * log_ratio).sum(-1))


def _co2_terms(view_a, view_b, tau, tau_con):
    n = view_a.shape[0]
    if n < 2:
        raise InputError(f"co2_loss needs a batch of at least 2 (one in-batch negative), got {n}")
    if view_a.shape != view_b.shape:
        raise InputError(f"view shapes differ: {tuple(view_a.shape)} vs {tuple(view_b.shape)}")
    # negatives for row j: the other rows of the positive (original) view
    off_diag = ~torch.eye(n, dtype=torch.bool, device=view_b.device)
    idx = torch.arange(n, device=view_b.device).expand(n, n)[off_diag].view(n, n - 1)
    negatives = view_b[idx]
    nce = info_nce(view_a, view_b, negatives, tau)
    q_dist = similarity_distribution(view_a, negatives, tau_con)
    p_dist = similarity_distribution(view_b, negatives, tau_con)
    return nce.mean(), consistency_kl(p_dist, q_dist).mean()


def co2_loss(view_a, view_b, tau: float, tau_con: float, beta: float):
    """Batch-mean of InfoNCE plus ``beta`` times the symmetric-KL consistency term.

    ``view_a`` rows are queries (augmented branch); ``view_b`` rows are the
    positives (original branch) and supply the in-batch negatives.
    """
    nce, cons = _co2_terms(view_a, view_b, tau, tau_con)
    return nce + beta * cons


def itc_loss(z_img, z_txt, tau: float):
    """Bidirectional image-text contrastive loss with matched pairs on the diagonal."""
    if z_img.dim() != 2 or z_img.shape != z_txt.shape:
        raise InputError(f"itc_loss needs two [N, d] tensors of equal shape, got {tuple(z_img.shape)} and {tuple(z_txt.shape)}")
    return itc_from_similarity(z_img @ z_txt.T, tau)


def itc_from_similarity(sim, tau: float):
    """ITC over a precomputed ``[N, N]`` image-by-text similarity matrix (diagonal = positives)."""
    if sim.dim() != 2 or sim.shape[0] != sim.shape[1]:
        raise InputError(f"similarity matrix must be square, got {tuple(sim.shape)}")
    logits = sim / tau
    target = torch.arange(sim.shape[0], device=sim.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def compute_losses(b: BranchEmbeddings, config: ModelConfig, single_alpha: bool = False, check_norm: bool = True):
    """Return ``(l_total tensor, LossReport)``.

    With ``single_alpha`` off the weight is applied as printed twice over:
    ``L = L_itc + a * (a * L_co2_img + a * L_co2_txt)``; with it on,
    ``L = L_itc + a * (L_co2_img + L_co2_txt)``.
    """
    b.validate(check_norm=check_norm)
    alpha, beta = config.alpha, config.beta
    if b.pair_similarity is not None:
        l_sim = itc_from_similarity(b.pair_similarity, config.temperature)
    else:
        l_sim = itc_loss(b.z_img_orig, b.z_txt_orig, config.temperature)
    zero = l_sim.new_zeros(())
    if config.use_consistency:
        if b.z_img_aug is None or b.z_txt_aug is None:
            raise InputError("consistency loss enabled but augmented branches are missing")
        nce_i, cons_i = _co2_terms(b.z_img_aug, b.z_img_orig, config.temperature, config.consistency_temperature)
        nce_t, cons_t = _co2_terms(b.z_txt_aug, b.z_txt_orig, config.temperature, config.consistency_temperature)
    else:
        nce_i = cons_i = nce_t = cons_t = zero
    co2_i = nce_i + beta * cons_i
    co2_t = nce_t + beta * cons_t
    inner = 1.0 if single_alpha else alpha
    l_con = inner * co2_i + inner * co2_t
    l_total = l_sim + alpha * l_con
    report = LossReport(
        *(float(t.detach()) for t in (nce_i, nce_t, cons_i, cons_t, co2_i, co2_t, l_con, l_sim, l_total))
    )
    return l_total, report


def total_loss(b: BranchEmbeddings, config: ModelConfig, single_alpha: bool = False) -> LossReport:
    return compute_losses(b, config, single_alpha)[1]
