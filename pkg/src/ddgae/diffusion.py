"""Absorbing-state discrete diffusion over binary edge variables.

Edges live in {0, 1} with 0 absorbing: the forward chain can only delete
edges, never create them.  A schedule with per-step deletion probabilities
beta_t induces the closed-form marginal q(x_t = 1 | x_0 = 1) = alpha_bar_t,
the Bayes posterior q(x_{t-1} | x_t, x_0), and the x0-parameterized reverse
distribution p(x_{t-1} | x_t) obtained by mixing the posterior over the
denoiser's x_0 prediction.  The per-edge KL / reconstruction terms assemble
into the hybrid training loss (variational term plus a weighted auxiliary
cross-entropy on x_0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

# Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before any logarithm.
# The clamp is part of the loss contract: it bounds otherwise-infinite KL
# values when the model assigns zero mass to an event of positive probability.
PROB_EPS = 1e-12


class InconsistentStateError(ValueError):
    """Raised for (x_t, x_0) pairs impossible under the absorbing forward chain."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Deletion probabilities and cumulative survival for T absorbing steps.

    beta[i] is the deletion probability at step t = i + 1 (1-based t).
    alpha_bar[t] is the probability that an original edge survives to step t,
    with alpha_bar[0] = 1 and alpha_bar[T] = 0.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def survival(self, t: int) -> float:
        """alpha_bar_t with bounds checking."""
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t])

    def deletion(self, t: int) -> float:
        """beta_t (1-based) with bounds checking."""
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return float(self.beta[t - 1])

    def posterior_coeff(self, t: int) -> float:
        """P(x_{t-1} = 1 | x_t = 0, x_0 = 1) = beta_t * alpha_bar_{t-1} / (1 - alpha_bar_t)."""
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return float(self.beta[t - 1] * self.alpha_bar[t - 1] / (1.0 - self.alpha_bar[t]))


@dataclass
class NoisyAdjacency:
    """A (possibly corrupted) adjacency bit-matrix at diffusion step t.

    bits is symmetric with zero diagonal and zero outside edge_mask;
    edge_mask marks entries belonging to real (unpadded) node pairs.
    """

    bits: np.ndarray
    t: int
    edge_mask: np.ndarray


@dataclass(frozen=True)
class EdgePosterior:
    """Bernoulli distribution over x_{t-1} for one edge slot."""

    p_prev_one: float


@dataclass
class LossBreakdown:
    """Components of the hybrid loss for one sampled timestep.

    l_vb_term is the variational term (KL for t >= 2, reconstruction NLL at
    t = 1), aux_ce the auxiliary x_0 cross-entropy, both as mean nats per
    real edge slot.  Fields are torch scalars when produced by hybrid_loss
    so that `total` stays differentiable.
    """

    l_vb_term: torch.Tensor
    aux_ce: torch.Tensor
    lam: float
    total: torch.Tensor
    t_sampled: float

    def as_floats(self) -> dict:
        return {
            "l_vb": float(self.l_vb_term),
            "aux_ce": float(self.aux_ce),
            "lambda": self.lam,
            "total": float(self.total),
            "t_sampled": self.t_sampled,
        }


def build_schedule(T: int, kind: str = "absorbing_linear") -> NoiseSchedule:
    """Build the deletion schedule beta_t = 1/(T - t + 1).

    This choice spreads the absorption time uniformly over {1..T}, giving
    alpha_bar_t = (T - t)/T exactly and guaranteed full absorption at t = T.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind != "absorbing_linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    t = np.arange(1, T + 1, dtype=np.float64)
    beta = 1.0 / (T - t + 1.0)
    alpha_bar = (T - np.arange(0, T + 1, dtype=np.float64)) / T
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def forward_marginal(a0: int, t: int, s: NoiseSchedule) -> float:
    """q(x_t = 1 | x_0 = a0): alpha_bar_t if the edge existed, else 0."""
    if a0 not in (0, 1):
        raise ValueError(f"edge bit must be 0 or 1, got {a0}")
    return s.survival(t) if a0 == 1 else 0.0


def corrupt(a0: NoisyAdjacency, t: int, s: NoiseSchedule, seed: int) -> NoisyAdjacency:
    """Sample A_t from the clean A_0 via the closed-form marginal.

    Each real upper-triangle edge survives independently with probability
    alpha_bar_t; the result is mirrored to the lower triangle.  Deterministic
    given seed.
    """
    if a0.t != 0:
        raise ValueError(f"corrupt expects a clean input (t=0), got t={a0.t}")
    if not 1 <= t <= s.T:
        raise ValueError(f"timestep {t} outside [1, {s.T}]")
    n = a0.bits.shape[0]
    rng = np.random.default_rng(seed)
    keep = rng.random((n, n)) < s.alpha_bar[t]
    upper = np.triu(a0.bits.astype(bool) & a0.edge_mask.astype(bool) & keep, k=1)
    bits = (upper | upper.T).astype(a0.bits.dtype)
    return NoisyAdjacency(bits=bits, t=t, edge_mask=a0.edge_mask)


def corrupt_step(a: NoisyAdjacency, s: NoiseSchedule, seed: int) -> NoisyAdjacency:
    """Advance one forward step t -> t+1, deleting edges with probability beta_{t+1}."""
    t_next = a.t + 1
    if t_next > s.T:
        raise ValueError(f"cannot step past T={s.T}")
    n = a.bits.shape[0]
    rng = np.random.default_rng(seed)
    keep = rng.random((n, n)) >= s.beta[t_next - 1]
    upper = np.triu(a.bits.astype(bool) & a.edge_mask.astype(bool) & keep, k=1)
    bits = (upper | upper.T).astype(a.bits.dtype)
    return NoisyAdjacency(bits=bits, t=t_next, edge_mask=a.edge_mask)


def true_posterior(a_t: int, a0: int, t: int, s: NoiseSchedule) -> EdgePosterior:
    """q(x_{t-1} = 1 | x_t = a_t, x_0 = a0) for 1 <= t <= T.

    A surviving edge must have existed at t-1 (deletion is one-way), an
    absorbed start stays absorbed, and the remaining case follows from Bayes
    rule on the absorbing kernel.
    """
    if a_t not in (0, 1) or a0 not in (0, 1):
        raise ValueError("edge bits must be 0 or 1")
    if a_t == 1 and a0 == 0:
        raise InconsistentStateError("x_t = 1 with x_0 = 0 is impossible: edges are never created")
    if a_t == 1:
        return EdgePosterior(1.0)
    if a0 == 0:
        if not 1 <= t <= s.T:
            raise ValueError(f"timestep {t} outside [1, {s.T}]")
        return EdgePosterior(0.0)
    return EdgePosterior(s.posterior_coeff(t))


def model_reverse(x0_prob: float, a_t: int, t: int, s: NoiseSchedule) -> EdgePosterior:
    """p(x_{t-1} = 1 | x_t) under the x0-parameterization.

    Mixes the two true posteriors with weights (x0_prob, 1 - x0_prob).  For
    a_t = 1 both consistent branches put all mass on x_{t-1} = 1, so the
    result is 1 regardless of x0_prob.
    """
    if not 0.0 <= x0_prob <= 1.0:
        raise ValueError(f"x0_prob must be in [0, 1], got {x0_prob}")
    if a_t not in (0, 1):
        raise ValueError("edge bit must be 0 or 1")
    if a_t == 1:
        return EdgePosterior(1.0)
    return EdgePosterior(x0_prob * s.posterior_coeff(t))


def _bernoulli_kl(q: float, p: float) -> float:
    # KL(Bern(q) || Bern(p)) with the 0*log(0/.) = 0 convention; p pre-clamped.
    out = 0.0
    if q > 0.0:
        out += q * math.log(q / p)
    if q < 1.0:
        out += (1.0 - q) * math.log((1.0 - q) / (1.0 - p))
    return out


def kl_edge(a0: int, x0_prob: float, a_t: int, t: int, s: NoiseSchedule) -> float:
    """L_{t-1} for one edge: KL(q(x_{t-1}|x_t,x_0) || p(x_{t-1}|x_t)), t >= 2."""
    if t < 2:
        raise ValueError(f"kl_edge is defined for t >= 2, got t={t}")
    q = true_posterior(a_t, a0, t, s).p_prev_one
    p = model_reverse(x0_prob, a_t, t, s).p_prev_one
    p = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    return _bernoulli_kl(q, p)


def recon_edge(a0: int, x0_prob: float) -> float:
    """L_0 for one edge: Bernoulli NLL of a0 under the clamped x_0 prediction."""
    if a0 not in (0, 1):
        raise ValueError("edge bit must be 0 or 1")
    p = min(max(x0_prob, PROB_EPS), 1.0 - PROB_EPS)
    return -math.log(p) if a0 == 1 else -math.log(1.0 - p)


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=like.dtype, device=like.device)


def hybrid_loss(
    a0_bits,
    at_bits,
    t,
    x0_probs: torch.Tensor,
    edge_mask,
    lam: float,
    s: NoiseSchedule,
) -> LossBreakdown:
    """Masked-mean hybrid loss over real upper-triangle edge slots.

    Accepts a single graph (N, N) or a batch (B, N, N) with per-graph t;
    batched results are means of per-graph masked means, so graphs of
    different sizes contribute comparably.  Slots outside edge_mask add
    exactly zero to both values and gradients.  The constant prior term at
    t = T has no parameters and is omitted.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if not torch.is_tensor(x0_probs):
        x0_probs = torch.as_tensor(np.asarray(x0_probs, dtype=np.float64))
    a0 = _as_tensor(a0_bits, x0_probs)
    at = _as_tensor(at_bits, x0_probs)
    mask = _as_tensor(edge_mask, x0_probs)
    if not (a0.shape == at.shape == mask.shape == x0_probs.shape):
        raise ValueError(
            f"shape mismatch: A0 {tuple(a0.shape)}, A_t {tuple(at.shape)}, "
            f"mask {tuple(mask.shape)}, x0_probs {tuple(x0_probs.shape)}"
        )

    batched = x0_probs.dim() == 3
    if not batched:
        a0, at, mask, x0_probs = (x.unsqueeze(0) for x in (a0, at, mask, x0_probs))
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if t_arr.shape[0] != a0.shape[0]:
        if t_arr.shape[0] == 1:
            t_arr = np.repeat(t_arr, a0.shape[0])
        else:
            raise ValueError(f"t has {t_arr.shape[0]} entries for batch of {a0.shape[0]}")
    if np.any(t_arr < 1) or np.any(t_arr > s.T):
        raise ValueError(f"timesteps {t_arr} outside [1, {s.T}]")

    n = a0.shape[-1]
    upper = torch.triu(torch.ones(n, n, dtype=x0_probs.dtype, device=x0_probs.device), diagonal=1)
    slot_mask = mask * upper

    coeff = np.array([s.posterior_coeff(int(ti)) for ti in t_arr])
    c = torch.as_tensor(coeff, dtype=x0_probs.dtype, device=x0_probs.device).view(-1, 1, 1)

    q = torch.where(at == 1, torch.ones_like(a0), a0 * c)
    p = torch.where(at == 1, torch.ones_like(x0_probs), x0_probs * c)
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    kl = (
        torch.special.xlogy(q, q)
        - torch.special.xlogy(q, p)
        + torch.special.xlogy(1.0 - q, 1.0 - q)
        - torch.special.xlogy(1.0 - q, 1.0 - p)
    )

    x0c = x0_probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    nll = -(a0 * torch.log(x0c) + (1.0 - a0) * torch.log(1.0 - x0c))

    is_t1 = torch.as_tensor(t_arr == 1, device=x0_probs.device).view(-1, 1, 1)
    vb_slot = torch.where(is_t1, nll, kl)

    counts = slot_mask.sum(dim=(-2, -1)).clamp_min(1.0)
    vb = (vb_slot * slot_mask).sum(dim=(-2, -1)) / counts
    aux = (nll * slot_mask).sum(dim=(-2, -1)) / counts

    l_vb = vb.mean()
    aux_ce = aux.mean()
    total = l_vb + lam * aux_ce
    t_sampled = float(t_arr[0]) if t_arr.shape[0] == 1 else float(t_arr.mean())
    return LossBreakdown(l_vb_term=l_vb, aux_ce=aux_ce, lam=lam, total=total, t_sampled=t_sampled)
