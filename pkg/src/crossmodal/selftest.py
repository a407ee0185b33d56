"""Self-contained oracle suites: closed-form expert products, pairwise AUROC
counting, and central finite-difference gradient checks. No files, no
network; used by the `selftest` CLI command and the acceptance tests."""
from __future__ import annotations

import numpy as np

from . import numerics as nm
from .detector import auroc
from .model import GaussianExpert, LatentCode, fuse_poe
from .numerics import Parameter, Tensor, backward
from .training import (bce_with_logits, endpoint_error, kl_to_prior,
                       latent_distance_loss, mse_l1)


def poe_closed_form(means: np.ndarray, variances: np.ndarray):
    """Reference product of Gaussians with a unit prior, plain numpy."""
    prec = 1.0 / variances
    total = prec.sum(axis=0) + 1.0
    mean = (means * prec).sum(axis=0) / total
    return mean, 1.0 / total


def check_poe(n_sets: int = 1000, seed: int = 0, tol: float = 1e-9):
    rng = np.random.default_rng(np.random.SeedSequence([0x9999, seed]))
    worst = 0.0
    for _ in range(n_sets):
        k = int(rng.integers(1, 5))
        d = int(rng.integers(1, 9))
        means = rng.normal(0.0, 3.0, (k, d))
        variances = np.exp(rng.uniform(-4.0, 4.0, (k, d)))
        experts = [GaussianExpert(Tensor(means[i:i + 1]), Tensor(variances[i:i + 1]))
                   for i in range(k)]
        code = fuse_poe(experts)
        ref_mean, ref_var = poe_closed_form(means, variances)
        err = max(np.abs(code.mean.data[0] - ref_mean).max(),
                  np.abs(code.variance.data[0] - ref_var).max())
        worst = max(worst, err)
    ok = worst < tol
    return ok, f"product-of-experts vs closed form: worst abs err {worst:.3e} over {n_sets} sets"


def pairwise_auroc(clean, corrupt) -> float:
    """Exhaustive O(n*m) counting oracle, ties counted one half."""
    clean = np.asarray(clean, dtype=np.float64)
    corrupt = np.asarray(corrupt, dtype=np.float64)
    wins = 0.0
    for c in corrupt:
        wins += float((c > clean).sum()) + 0.5 * float((c == clean).sum())
    return wins / (clean.size * corrupt.size)


def check_auroc(n_sets: int = 200, seed: int = 0):
    rng = np.random.default_rng(np.random.SeedSequence([0xA7C, seed]))
    for i in range(n_sets):
        n = int(rng.integers(1, 51))
        m = int(rng.integers(1, 51))
        # quantized scores force plenty of ties
        clean = np.round(rng.normal(0.0, 1.0, n), int(rng.integers(0, 3)))
        corrupt = np.round(rng.normal(0.5, 1.0, m), int(rng.integers(0, 3)))
        a = auroc(clean, corrupt)
        b = pairwise_auroc(clean, corrupt)
        if a != b:
            return False, f"auroc mismatch on set {i}: trapezoid {a!r} vs pairwise {b!r}"
    return True, f"trapezoidal auroc equals pairwise counting exactly on {n_sets} sets"


def finite_diff_check(build_loss, params: list[Parameter], eps: float = 1e-5,
                      rtol: float = 1e-4, max_coords: int = 40,
                      seed: int = 0) -> float:
    """Worst relative error between backprop and central differences."""
    for p in params:
        p.tensor.zero_grad()
    loss = build_loss()
    backward(loss)
    grads = {p.name: (p.tensor.grad.copy() if p.tensor.grad is not None
                      else np.zeros_like(p.data)) for p in params}
    rng = np.random.default_rng(np.random.SeedSequence([0xFD, seed]))
    worst = 0.0
    for p in params:
        flat = p.tensor.data.ravel()
        n = flat.size
        coords = rng.choice(n, size=min(n, max_coords), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = float(build_loss().data)
            flat[c] = orig - eps
            f_minus = float(build_loss().data)
            flat[c] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            an = grads[p.name].ravel()[c]
            denom = max(abs(fd), abs(an), 1e-6)
            worst = max(worst, abs(fd - an) / denom)
    return worst


def _tiny_encoder(rng, name, in_dim, d):
    w = Parameter(f"{name}_w", rng.standard_normal((in_dim, 2 * d)) * 0.4)
    b = Parameter(f"{name}_b", rng.standard_normal(2 * d) * 0.1)
    return w, b


def _expert(x, w, b, d):
    stats = Tensor(x) @ w.tensor + b.tensor
    return GaussianExpert(stats[:, :d], stats[:, d:].clip(-6.0, 6.0).exp())


def check_gradients(seed: int = 0, rtol: float = 1e-4):
    """Finite-difference checks for every loss term on tiny models."""
    rng = np.random.default_rng(np.random.SeedSequence([0x60AD, seed]))
    d = 4
    results = {}

    x1 = rng.normal(0.0, 1.0, (5, 6))
    x2 = rng.normal(0.0, 1.0, (5, 3))
    w1, b1 = _tiny_encoder(rng, "e1", 6, d)
    w2, b2 = _tiny_encoder(rng, "e2", 3, d)

    def kl_loss():
        return kl_to_prior(fuse_poe([_expert(x1, w1, b1, d), _expert(x2, w2, b2, d)]))

    results["kl"] = finite_diff_check(kl_loss, [w1, b1, w2, b2], seed=seed)

    def dist_loss():
        full = fuse_poe([_expert(x1, w1, b1, d), _expert(x2, w2, b2, d)])
        dropped = fuse_poe([_expert(x2, w2, b2, d)])
        return latent_distance_loss(full, dropped)

    results["latent_dist"] = finite_diff_check(dist_loss, [w1, b1, w2, b2],
                                               seed=seed + 1)

    target = rng.normal(0.0, 1.0, (4, 7))
    wr = Parameter("wr", rng.standard_normal((3, 7)) * 0.5)
    xr = rng.normal(0.0, 1.0, (4, 3))

    def recon_loss():
        return mse_l1(Tensor(xr) @ wr.tensor, Tensor(target))

    results["mse_l1"] = finite_diff_check(recon_loss, [wr], seed=seed + 2)

    labels = (rng.random((4, 7)) > 0.5).astype(np.float64)

    def bce_loss():
        return bce_with_logits(Tensor(xr) @ wr.tensor, Tensor(labels))

    results["bce"] = finite_diff_check(bce_loss, [wr], seed=seed + 3)

    n_pix = 32 * 32
    wf = Parameter("wf", rng.standard_normal((d, 2 * n_pix)) * 0.2)
    zf = rng.normal(0.0, 1.0, (3, d))
    flow_label = rng.normal(0.0, 2.0, (3, 2 * n_pix))
    mask = (rng.random((3, n_pix)) > 0.4).astype(np.float64)
    mask[0] = 0.0  # one empty mask exercises the zero-contribution path

    def epe_loss():
        return endpoint_error(Tensor(zf) @ wf.tensor, flow_label, mask)

    results["epe"] = finite_diff_check(epe_loss, [wf], seed=seed + 4,
                                       max_coords=20)

    worst = max(results.values())
    ok = worst < rtol
    detail = ", ".join(f"{k}={v:.2e}" for k, v in sorted(results.items()))
    return ok, f"gradient finite-difference checks: {detail} (worst {worst:.2e})"


def check_network_gradients(seed: int = 0, rtol: float = 1e-4):
    """FD check through a composed 3-layer network forward graph."""
    rng = np.random.default_rng(np.random.SeedSequence([0x3377, seed]))
    x = rng.normal(0.0, 1.0, (6, 5))
    w0 = Parameter("w0", rng.standard_normal((5, 8)) * 0.5)
    b0 = Parameter("b0", rng.standard_normal(8) * 0.1)
    w1 = Parameter("w1", rng.standard_normal((8, 8)) * 0.5)
    b1 = Parameter("b1", rng.standard_normal(8) * 0.1)
    w2 = Parameter("w2", rng.standard_normal((8, 2)) * 0.5)
    b2 = Parameter("b2", rng.standard_normal(2) * 0.1)

    def loss():
        h = (Tensor(x) @ w0.tensor + b0.tensor).tanh()
        h = (h @ w1.tensor + b1.tensor).sigmoid()
        out = h @ w2.tensor + b2.tensor
        return out.square().mean() + out.abs().mean() * 0.1

    worst = finite_diff_check(loss, [w0, b0, w1, b1, w2, b2], seed=seed)
    return worst < rtol, f"3-layer network gradients vs finite differences: worst rel err {worst:.2e}"


def run_all(print_fn=print) -> bool:
    checks = [check_poe, check_auroc, check_gradients, check_network_gradients]
    all_ok = True
    for fn in checks:
        ok, msg = fn()
        all_ok = all_ok and ok
        print_fn(f"[{'PASS' if ok else 'FAIL'}] {msg}")
    return all_ok
