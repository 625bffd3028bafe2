"""Central-difference gradient checking shared by the tensor and model
tests and the acceptance gate.

`fd_check` treats the loss builder as a black box: it must be a
deterministic pure function of the parameters it closes over (fix any
dropout masks by re-deriving the same Rng inside the builder).  The op
builders at the bottom each construct a small randomized scalar loss
through exactly one primitive so a failure names the culprit op.
"""

from __future__ import annotations

import numpy as np

from votevit.tensor import (Rng, Tensor, affine, backward, concat, dropout,
                            gelu, layer_norm, log, matmul, reshape, sigmoid,
                            slice_, softmax, subtract, tmean, transpose, tsum,
                            zero_grad)
from votevit.tensor import exp as texp

STEP = 1e-6
TOL = 1e-4


def fd_check(build, params, step: float = STEP, tol: float = TOL,
             max_coords: int | None = None,
             coord_rng: np.random.Generator | None = None) -> float:
    """Assert analytic gradients match central differences; return the
    worst error seen.

    The error is |fd - analytic| / max(|fd|, |analytic|, 1.0): relative
    for large gradients, absolute near zero where the finite difference
    itself carries ~1e-9 of roundoff.  `max_coords` probes a random
    subset of coordinates per parameter (all coordinates when None).
    """
    zero_grad(params)
    loss = build()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    worst = 0.0
    for p_idx, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            if coord_rng is None:
                coord_rng = np.random.default_rng(0)
            coords = coord_rng.choice(flat.size, size=max_coords, replace=False)
        else:
            coords = range(flat.size)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = build().item()
            flat[i] = orig - step
            f_minus = build().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1.0)
            worst = max(worst, err)
            assert err < tol, (
                f"gradient mismatch at param {p_idx} coord {i}: "
                f"analytic {gflat[i]:.10g} vs fd {fd:.10g} (err {err:.3g})")
    return worst


def _weighted_sum(t: Tensor, weights: np.ndarray) -> Tensor:
    # non-uniform upstream gradient so backward sees a general case
    return tsum(t * Tensor(weights))


def _rand(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def op_builders(seed: int):
    """(name, build, params) triples covering every differentiable op."""
    rng = np.random.default_rng(seed)
    cases = []

    a = _rand(rng, (3, 4))
    b = _rand(rng, (4,))
    w = rng.standard_normal((3, 4))
    cases.append(("add", lambda: _weighted_sum(a + b, w), [a, b]))

    a2 = _rand(rng, (3, 4))
    b2 = _rand(rng, (4,))
    w2 = rng.standard_normal((3, 4))
    cases.append(("subtract", lambda: _weighted_sum(subtract(a2, b2), w2), [a2, b2]))

    a3 = _rand(rng, (3, 4))
    b3 = _rand(rng, (4,))
    w3 = rng.standard_normal((3, 4))
    cases.append(("multiply", lambda: _weighted_sum(a3 * b3, w3), [a3, b3]))

    m1 = _rand(rng, (2, 3, 4))
    m2 = _rand(rng, (4, 5))
    wm = rng.standard_normal((2, 3, 5))
    cases.append(("matmul", lambda: _weighted_sum(matmul(m1, m2), wm), [m1, m2]))

    ax = _rand(rng, (5, 3))
    aw = _rand(rng, (3, 2))
    ab = _rand(rng, (2,))
    wa = rng.standard_normal((5, 2))
    cases.append(("affine", lambda: _weighted_sum(affine(ax, aw, ab), wa),
                  [ax, aw, ab]))

    sx = _rand(rng, (3, 5))
    ws = rng.standard_normal((3, 5))
    cases.append(("softmax", lambda: _weighted_sum(softmax(sx, axis=-1), ws), [sx]))

    lx = _rand(rng, (4, 6))
    lg = Tensor(1.0 + 0.3 * rng.standard_normal(6), requires_grad=True)
    lb = _rand(rng, (6,))
    wl = rng.standard_normal((4, 6))
    cases.append(("layer_norm",
                  lambda: _weighted_sum(layer_norm(lx, lg, lb), wl),
                  [lx, lg, lb]))

    dx = _rand(rng, (6, 6))
    wd = rng.standard_normal((6, 6))
    # re-deriving the same child stream keeps the mask constant per rebuild
    cases.append(("dropout",
                  lambda: _weighted_sum(
                      dropout(dx, 0.4, Rng(seed).child("mask"), True), wd),
                  [dx]))

    gx = _rand(rng, (3, 4))
    wg = rng.standard_normal((3, 4))
    cases.append(("gelu", lambda: _weighted_sum(gelu(gx), wg), [gx]))

    sgx = _rand(rng, (3, 4))
    wsg = rng.standard_normal((3, 4))
    cases.append(("sigmoid", lambda: _weighted_sum(sigmoid(sgx), wsg), [sgx]))

    ex = Tensor(0.5 * rng.standard_normal((3, 4)), requires_grad=True)
    we = rng.standard_normal((3, 4))
    cases.append(("exp", lambda: _weighted_sum(texp(ex), we), [ex]))

    # inputs bounded away from zero so the +/- step stays positive
    px = Tensor(0.5 + rng.random((3, 4)), requires_grad=True)
    wp = rng.standard_normal((3, 4))
    cases.append(("log", lambda: _weighted_sum(log(px), wp), [px]))

    tx = _rand(rng, (2, 3, 4))
    wt = rng.standard_normal((2, 4))
    cases.append(("sum_axis", lambda: _weighted_sum(tsum(tx, axis=1), wt), [tx]))

    tx2 = _rand(rng, (2, 3, 4))
    k = float(rng.standard_normal())
    cases.append(("sum_all", lambda: tsum(tx2) * Tensor(k), [tx2]))

    mx = _rand(rng, (2, 3, 4))
    wmx = rng.standard_normal((1, 1, 4))
    cases.append(("mean_axes",
                  lambda: _weighted_sum(tmean(mx, axis=(0, 1), keepdims=True), wmx),
                  [mx]))

    c1 = _rand(rng, (2, 3))
    c2 = _rand(rng, (2, 2))
    c3 = _rand(rng, (2, 4))
    wc = rng.standard_normal((2, 9))
    cases.append(("concat",
                  lambda: _weighted_sum(concat([c1, c2, c3], axis=1), wc),
                  [c1, c2, c3]))

    slx = _rand(rng, (4, 5))
    wsl = rng.standard_normal((2,))
    cases.append(("slice", lambda: _weighted_sum(slice_(slx, (1, slice(1, 3))), wsl),
                  [slx]))

    rx = _rand(rng, (3, 4))
    wr = rng.standard_normal((2, 6))
    cases.append(("reshape", lambda: _weighted_sum(reshape(rx, (2, 6)), wr), [rx]))

    px2 = _rand(rng, (2, 3, 4))
    wp2 = rng.standard_normal((3, 2, 4))
    cases.append(("transpose",
                  lambda: _weighted_sum(transpose(px2, (1, 0, 2)), wp2), [px2]))

    return cases


def check_all_ops(seed: int) -> float:
    """Run fd_check over every op builder for one seed; return worst error."""
    worst = 0.0
    for name, build, params in op_builders(seed):
        try:
            worst = max(worst, fd_check(build, params))
        except AssertionError as exc:
            raise AssertionError(f"[op {name}, seed {seed}] {exc}") from None
    return worst
