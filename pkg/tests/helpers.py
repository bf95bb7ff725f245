"""Shared oracles and fixtures for the test suite."""

import numpy as np
import torch

from dcenav import neural
from dcenav.dce import dce_loss


def layer_gradient_errors(seed: int = 0) -> dict:
    """Max relative FD error for every layer and for the full DCE loss."""
    g = torch.Generator().manual_seed(seed)

    def r(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    errs = {}
    x, w, b = r(4, 5), r(3, 5), r(3)
    proj = r(4, 3)
    errs["dense"] = neural.gradient_check(lambda x, w, b: (neural.dense(x, w, b) * proj).sum(), [x, w, b])

    x, w, b = r(2, 2, 6, 6), r(3, 2, 3, 3), r(3)
    proj = r(2, 3, 3, 3)
    errs["conv"] = neural.gradient_check(
        lambda x, w, b: (neural.conv2d(x, w, b, stride=2, padding=1) * proj).sum(), [x, w, b])

    x, w, b = r(2, 3, 3, 3), r(3, 2, 3, 3), r(2)
    proj = r(2, 2, 6, 6)
    errs["transpose_conv"] = neural.gradient_check(
        lambda x, w, b: (neural.transpose_conv2d(x, w, b, stride=2, padding=1, output_padding=1)
                         * proj).sum(), [x, w, b])

    x = r(40)
    x = x + 0.1 * torch.sign(x)  # keep clear of the kink at 0
    proj = r(40)
    errs["elu"] = neural.gradient_check(lambda x: (neural.elu(x) * proj).sum(), [x])

    H = 4
    args = [r(3, 5), r(3, H), 0.5 * r(3 * H, 5), 0.5 * r(3 * H, H), r(3 * H), r(3 * H)]
    proj = r(3, H)
    errs["gru"] = neural.gradient_check(lambda *a: (neural.gru_cell(*a) * proj).sum(), args)

    mu, logvar, eps = r(6), 0.3 * r(6), r(6)
    proj = r(6)
    errs["gaussian_sample"] = neural.gradient_check(
        lambda mu, lv: (neural.gaussian_sample(mu, lv, eps) * proj).sum(), [mu, logvar])

    target = torch.rand(2, 5, 6, generator=g, dtype=torch.float64)
    recon = torch.rand(2, 5, 6, generator=g, dtype=torch.float64)
    mask = torch.rand(2, 5, 6, generator=g) > 0.3
    mu, sigma = r(2, 4), torch.rand(2, 4, generator=g, dtype=torch.float64) + 0.5
    errs["dce_loss"] = neural.gradient_check(
        lambda rec, mu, s: dce_loss(target, rec, mu, s, mask, 3.0)[0], [recon, mu, sigma])
    return errs


def kl_oracle(mu, sigma):
    """-1/2 sum(1 + log sigma^2 - mu^2 - sigma^2), written independently in numpy."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    return -0.5 * np.sum(1.0 + np.log(sigma ** 2) - mu ** 2 - sigma ** 2, axis=-1)


def reward_oracle(prev_dist, dist, a, a_prev, p, crashed, s_max, i_max_deg, om_max_deg):
    """Scalar, loop-based evaluation of the navigation reward for one transition."""
    import math

    def cmd(act):
        act = [min(max(x, -1.0), 1.0) for x in act]
        s = s_max * (act[0] + 1.0) / 2.0
        inc = math.radians(i_max_deg) * act[1]
        return [s * math.cos(inc), 0.0, s * math.sin(inc), math.radians(om_max_deg) * act[2]]

    def k(x, nu):
        return math.exp(-(x * x) / nu)

    u, up = cmd(a), cmd(a_prev)
    r = [k(dist, p.nu1), k(dist, p.nu2), abs(p.nu3 - dist) / p.nu3,
         p.progress_sign * p.nu4 * (dist - prev_dist)]
    pen1 = sum(p.nu5[i] * (k(u[i], p.nu6[i]) - 1.0) for i in range(4))
    pen2 = sum(p.nu7[i] * (k(u[i] - up[i], p.nu8[i]) - 1.0) for i in range(4))
    total = sum(l * x for l, x in zip(p.lambdas, r)) + p.etas[0] * pen1 + p.etas[1] * pen2
    return total - p.nu9 * float(crashed)
