"""Jensen-Shannon mutual-information estimation between adjacent feature maps.

A discriminator ``D`` scores concatenated feature vectors.  Pairs taken at the
same (image, location) sample the joint distribution; pairs whose halves come
from independently drawn (image, location) coordinates sample the product of
marginals.  The variational objective

    F = E_joint[log sigmoid(V)] + E_marginal[log(1 - sigmoid(V))] + log 4

is a lower bound on twice the Jensen-Shannon divergence between the two and is
maximized jointly with the classification loss.
"""

import math
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import xlogy
from torch import nn

from ifmlab.errors import (
    DegenerateRho,
    EmptyBatch,
    NonIntegerScale,
    ShapeMismatch,
    WidthMismatch,
    ZeroSamples,
)
from ifmlab.models import DiscriminatorConfig, init_params

LN4 = math.log(4.0)
FORMS = ("standard", "paper_literal")
LAYER_PAIRS = ((0, 1), (1, 2), (2, 3))
PAIR_NAMES = ("f_conv12", "f_conv23", "f_conv34")


class PairBatch(NamedTuple):
    joint: torch.Tensor  # (m, N)
    marginal: torch.Tensor  # (m, N)
    layer_pair_id: int = 0


class MIEstimate(NamedTuple):
    value: torch.Tensor  # scalar, nats
    layer_pair_id: int
    sample_count: int


def upsample_nearest(fmap, target):
    """Nearest-neighbour upsampling by integer factors: ``out[i, j] = in[i*h//H, j*w//W]``."""
    height, width = target
    h, w = fmap.shape[-2:]
    if height < h or width < w or height % h or width % w:
        raise NonIntegerScale(f"cannot upsample {h}x{w} to {height}x{width} by integer factors")
    return fmap.repeat_interleave(height // h, dim=-2).repeat_interleave(width // w, dim=-1)


def _flatten_locations(fmap):
    # (b, C, H, W) -> (b*H*W, C); row index = (b*H + i)*W + j
    return fmap.permute(0, 2, 3, 1).reshape(-1, fmap.shape[1])


def sample_pairs(h_l, h_next_up, m, rng=None, layer_pair_id=0):
    """Draw ``m`` joint and ``m`` marginal concatenated pairs from two aligned maps.

    Joint pairs share one uniformly drawn (image, row, col); marginal pairs draw
    that triple independently for each half, so halves may come from different
    images.
    """
    if h_l.dim() != 4 or h_next_up.dim() != 4:
        raise ShapeMismatch("feature maps must be (b, C, H, W)")
    if h_l.shape[0] != h_next_up.shape[0] or h_l.shape[2:] != h_next_up.shape[2:]:
        raise ShapeMismatch(
            f"maps disagree on batch or spatial size: {tuple(h_l.shape)} vs {tuple(h_next_up.shape)}"
        )
    if m <= 0:
        raise ZeroSamples("need at least one pair")
    left = _flatten_locations(h_l)
    right = _flatten_locations(h_next_up)
    n = left.shape[0]
    joint_idx = torch.randint(n, (m,), generator=rng)
    left_idx = torch.randint(n, (m,), generator=rng)
    right_idx = torch.randint(n, (m,), generator=rng)
    joint = torch.cat([left[joint_idx], right[joint_idx]], dim=1)
    marginal = torch.cat([left[left_idx], right[right_idx]], dim=1)
    return PairBatch(joint, marginal, layer_pair_id)


def score_pairs(disc, pairs, batchnorm="shared"):
    """Pre-sigmoid scores for the joint and marginal halves of a PairBatch.

    ``shared`` runs both halves through D as one batch so batch-norm statistics
    are pooled; ``separate`` normalizes each half with its own statistics.
    """
    if batchnorm == "separate":
        return disc(pairs.joint), disc(pairs.marginal)
    m = pairs.joint.shape[0]
    scores = disc(torch.cat([pairs.joint, pairs.marginal], dim=0))
    return scores[:m], scores[m:]


def objective_from_scores(v_joint, v_marginal, form="standard"):
    if form == "standard":
        # log sigmoid(v) = -softplus(-v); log(1 - sigmoid(v)) = -softplus(v)
        return -F.softplus(-v_joint).mean() - F.softplus(v_marginal).mean() + LN4
    if form == "paper_literal":
        return torch.sigmoid(v_joint).mean() - torch.log(torch.sigmoid(-v_marginal).mean())
    raise ValueError(f"objective form must be one of {FORMS}, got {form!r}")


def jsd_objective(disc, pairs, form="standard", batchnorm="shared"):
    """Evaluate the JSD variational objective of ``disc`` on a PairBatch.

    ``paper_literal`` drops the logarithm on the joint term and takes the log of
    the marginal mean instead; it is unbounded above and kept for comparison.
    """
    width = disc.config.input_width
    if pairs.joint.shape[0] == 0 or pairs.marginal.shape[0] == 0:
        raise EmptyBatch("PairBatch holds no samples")
    if pairs.joint.shape[1] != width or pairs.marginal.shape[1] != width:
        raise WidthMismatch(f"pairs are {pairs.joint.shape[1]} wide, discriminator expects {width}")
    v_joint, v_marginal = score_pairs(disc, pairs, batchnorm)
    value = objective_from_scores(v_joint, v_marginal, form)
    return MIEstimate(value, pairs.layer_pair_id, int(pairs.joint.shape[0]))


# ---------------------------------------------------------------------------
# IFM regularizer
# ---------------------------------------------------------------------------


class IFMHead(nn.Module):
    """The three discriminators for (conv1, conv2), (conv2, conv3), (conv3, conv4)."""

    def __init__(self, discriminators):
        super().__init__()
        self.discriminators = nn.ModuleList(discriminators)

    @classmethod
    def for_channels(cls, conv_channels, hidden=(256, 128, 64), seed=0, dtype=torch.float32):
        discs = [
            init_params(DiscriminatorConfig(conv_channels[a] + conv_channels[b], tuple(hidden)), seed + i, dtype)
            for i, (a, b) in enumerate(LAYER_PAIRS)
        ]
        return cls(discs)

    def __iter__(self):
        return iter(self.discriminators)

    def __len__(self):
        return len(self.discriminators)


def ifm_loss(taps, discriminators, m, rng=None, form="standard", batchnorm="shared"):
    """Sum of the per-pair objectives over the three adjacent tap pairs.

    ``rng`` is a single generator or one generator per layer pair.
    """
    discriminators = list(discriminators)
    if len(taps) != 4 or len(discriminators) != 3:
        raise ShapeMismatch("need four taps and three discriminators")
    rngs = rng if isinstance(rng, (list, tuple)) else [rng] * 3
    per_layer = []
    for pid, ((a, b), disc) in enumerate(zip(LAYER_PAIRS, discriminators)):
        upper = upsample_nearest(taps[b], taps[a].shape[-2:])
        pairs = sample_pairs(taps[a], upper, m, rngs[pid], layer_pair_id=pid)
        per_layer.append(jsd_objective(disc, pairs, form, batchnorm))
    total = per_layer[0].value + per_layer[1].value + per_layer[2].value
    return total, per_layer


# ---------------------------------------------------------------------------
# Gaussian reference and sanity harness
# ---------------------------------------------------------------------------


class GaussianReference(NamedTuple):
    jsd2: float  # 2 * JSD(P || Q), nats
    mi: float  # true mutual information, nats


def _bivariate_density(x, z, rho):
    det = 1.0 - rho * rho
    quad = (x * x - 2.0 * rho * x * z + z * z) / det
    return np.exp(-0.5 * quad) / (2.0 * np.pi * math.sqrt(det))


def _simpson_weights(n, step):
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * step / 3.0


def gaussian_reference_jsd(rho, half_width=8.0, grid=2001, chunk=200):
    """Twice the JS divergence between a correlated standard bivariate normal and
    the product of its marginals, by 2-D Simpson quadrature.

    The maximum of the standard-form objective over all discriminators equals
    this value, which makes it the reference for the trained estimator.
    """
    if not -1.0 < rho < 1.0:
        raise DegenerateRho(f"|rho| must be < 1, got {rho}")
    if grid % 2 == 0:
        raise ValueError("Simpson's rule needs an odd number of grid points")
    axis = np.linspace(-half_width, half_width, grid)
    w = _simpson_weights(grid, axis[1] - axis[0])
    total = 0.0
    for start in range(0, grid, chunk):
        x = axis[start : start + chunk, None]
        p = _bivariate_density(x, axis[None, :], rho)
        q = _bivariate_density(x, axis[None, :], 0.0)
        mix = p + q
        integrand = xlogy(p, 2.0 * p / mix) + xlogy(q, 2.0 * q / mix)
        integrand = np.where(mix > 0, integrand, 0.0)
        total += w[start : start + chunk] @ integrand @ w
    return GaussianReference(float(total), 0.5 * math.log(1.0 / (1.0 - rho * rho)))


def sample_gaussian_pairs(rho, n, generator, dtype=torch.float64):
    x = torch.randn(n, generator=generator, dtype=dtype)
    noise = torch.randn(n, generator=generator, dtype=dtype)
    z = rho * x + math.sqrt(1.0 - rho * rho) * noise
    return x, z


def estimate_mi_gaussian(
    rho,
    n_samples=50_000,
    train_steps=2000,
    seed=0,
    batch_size=512,
    lr=1e-3,
    hidden=(256, 128, 64),
    batchnorm="shared",
):
    """Train a fresh 2-input discriminator on correlated Gaussian pairs and
    return its standard-form objective on a held-out sample of the same size."""
    if n_samples < 1000:
        raise ValueError("need at least 1000 samples")
    gen = torch.Generator().manual_seed(seed)
    x, z = sample_gaussian_pairs(rho, n_samples, gen)
    disc = init_params(DiscriminatorConfig(2, tuple(hidden)), seed, dtype=torch.float64)
    opt = torch.optim.Adam(disc.parameters(), lr=lr)
    disc.train()
    for _ in range(train_steps):
        idx = torch.randint(n_samples, (batch_size,), generator=gen)
        shuffled = torch.randint(n_samples, (batch_size,), generator=gen)
        pairs = PairBatch(
            torch.stack([x[idx], z[idx]], dim=1),
            torch.stack([x[idx], z[shuffled]], dim=1),
        )
        value = jsd_objective(disc, pairs, "standard", batchnorm).value
        opt.zero_grad()
        (-value).backward()
        opt.step()

    x_eval, z_eval = sample_gaussian_pairs(rho, n_samples, gen)
    perm = torch.randperm(n_samples, generator=gen)
    pairs = PairBatch(torch.stack([x_eval, z_eval], dim=1), torch.stack([x_eval, z_eval[perm]], dim=1))
    disc.eval()
    with torch.no_grad():
        estimate = jsd_objective(disc, pairs, "standard", batchnorm).value
    return MIEstimate(estimate, 0, n_samples)
