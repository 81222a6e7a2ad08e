"""Central finite-difference verification of every recorded backward rule.

Two modes are used:

* per-entry checks for primitives: each differentiable input entry is
  perturbed by +-h and the quotient compared against the taped gradient;
* directional checks for the full models: a random unit direction over all
  parameters, so one config costs two forwards regardless of model size.

Inputs for kinked ops (relu, and models containing relu) are kept away from
the kink, where finite differences are not a valid oracle. Model configs are
resampled whenever any relu pre-activation on the tape is within 1e-4 of 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

H_DEFAULT = 1e-5
RTOL = 1e-4
SMALL_GRAD = 1e-4
ATOL_SMALL = 1e-7


@dataclass
class CheckResult:
    name: str
    passed: bool
    configs: int
    worst_rel: float
    worst_abs: float

    def line(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"[{status}] {self.name}: {self.configs} configs, "
            f"worst rel {self.worst_rel:.3e}, worst abs (small-grad) "
            f"{self.worst_abs:.3e}"
        )


def fd_grad(loss_fn, arr, h=H_DEFAULT):
    """Central finite differences of ``loss_fn()`` w.r.t. every entry of arr.

    ``arr`` is mutated in place during evaluation and restored afterwards.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        grad.reshape(-1)[i] = (lp - lm) / (2.0 * h)
    return grad


def grads_close(analytic, numeric, rtol=RTOL, small=SMALL_GRAD, atol=ATOL_SMALL):
    """Tolerance rule: relative error < rtol, except tiny analytic gradients
    which must match within atol absolutely. Returns (ok, worst_rel, worst_abs).
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    tiny = np.abs(a) < small
    denom = np.maximum(np.abs(a), np.abs(n))
    rel = np.divide(diff, denom, out=np.zeros_like(diff), where=denom > 0)
    ok = np.where(tiny, diff < atol, rel < rtol)
    worst_rel = float(rel[~tiny].max()) if (~tiny).any() else 0.0
    worst_abs = float(diff[tiny].max()) if tiny.any() else 0.0
    return bool(ok.all()), worst_rel, worst_abs


def away_from_zero(x, margin=1e-3):
    """Push entries with |x| < margin out to the margin (sign-preserving)."""
    x = np.asarray(x, dtype=np.float64).copy()
    small = np.abs(x) < margin
    x[small] = np.where(x[small] >= 0, margin, -margin)
    return x


def _check_case(build, rng, n_configs):
    """Run per-entry FD for one op family; build(rng) -> (inputs, forward)."""
    worst_rel = worst_abs = 0.0
    passed = True
    for _ in range(n_configs):
        inputs, forward = build(rng)
        with ad.Tape() as tape:
            out = forward()
            weights = rng.normal(size=out.data.shape)
            loss = ad.weighted_sum(out, weights)
        ad.backward(tape, loss)

        def loss_value():
            return float((forward().data * weights).sum())

        for t in inputs:
            if not t.requires_grad:
                continue
            numeric = fd_grad(loss_value, t.data)
            ok, rel, ab = grads_close(t.grad, numeric)
            worst_rel = max(worst_rel, rel)
            worst_abs = max(worst_abs, ab)
            passed = passed and ok
    return passed, worst_rel, worst_abs


def _param(rng, shape, scale=1.0):
    return ad.Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _build_linear(rng):
    b_, i_, o_ = rng.integers(1, 5, size=3)
    x, w, b = _param(rng, (b_, i_)), _param(rng, (i_, o_)), _param(rng, (o_,))
    return [x, w, b], lambda: ad.linear(x, w, b)


def _build_conv2d(rng):
    cin, cout = rng.integers(1, 4, size=2)
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    h = int(rng.integers(k, k + 4))
    w = int(rng.integers(k, k + 4))
    x = _param(rng, (cin, h, w))
    ker = _param(rng, (cout, cin, k, k))
    b = _param(rng, (cout,))
    return [x, ker, b], lambda: ad.conv2d(x, ker, b, stride=stride, padding=padding)


def _build_relu(rng):
    x = ad.Tensor(away_from_zero(rng.normal(size=rng.integers(1, 6, size=2))),
                  requires_grad=True)
    return [x], lambda: ad.relu(x)


def _build_sigmoid(rng):
    x = _param(rng, tuple(rng.integers(1, 6, size=2)), scale=2.0)
    return [x], lambda: ad.sigmoid(x)


def _build_add(rng):
    shape = tuple(rng.integers(1, 5, size=2))
    a, b = _param(rng, shape), _param(rng, shape)
    return [a, b], lambda: ad.add(a, b)


def _build_mul(rng):
    shape = tuple(rng.integers(1, 5, size=2))
    a, b = _param(rng, shape), _param(rng, shape)
    return [a, b], lambda: ad.mul(a, b)


def _build_scale(rng):
    x = _param(rng, tuple(rng.integers(1, 5, size=2)))
    c = float(rng.normal())
    return [x], lambda: ad.scale(x, c)


def _build_concat(rng):
    nd = int(rng.integers(1, 4))
    axis = int(rng.integers(0, nd))
    sa = list(rng.integers(1, 4, size=nd))
    sb = list(sa)
    sb[axis] = int(rng.integers(1, 4))
    a, b = _param(rng, tuple(sa)), _param(rng, tuple(sb))
    return [a, b], lambda: ad.concat(a, b, axis=axis)


def _build_instance_norm(rng):
    c = int(rng.integers(1, 4))
    h, w = rng.integers(1, 5, size=2)
    x = _param(rng, (c, int(h), int(w)))
    gamma, beta = _param(rng, (c,)), _param(rng, (c,))
    return [x, gamma, beta], lambda: ad.instance_norm(x, gamma, beta)


def _build_downsample2(rng):
    c = int(rng.integers(1, 4))
    h, w = 2 * rng.integers(1, 4, size=2)
    x = _param(rng, (c, int(h), int(w)))
    return [x], lambda: ad.downsample2(x)


def _build_upsample2(rng):
    c = int(rng.integers(1, 4))
    h, w = rng.integers(1, 4, size=2)
    x = _param(rng, (c, int(h), int(w)))
    return [x], lambda: ad.upsample2(x)


def _build_mse(rng):
    shape = tuple(rng.integers(1, 5, size=2))
    p, t = _param(rng, shape), _param(rng, shape)
    return [p, t], lambda: ad.mse(p, t)


def _build_pad_reflect(rng):
    c = int(rng.integers(1, 3))
    h, w = rng.integers(2, 5, size=2)
    pads = [int(rng.integers(0, int(h))), int(rng.integers(0, int(h))),
            int(rng.integers(0, int(w))), int(rng.integers(0, int(w)))]
    x = _param(rng, (c, int(h), int(w)))
    return [x], lambda: ad.pad_reflect2d(x, *pads)


def _build_crop(rng):
    c = int(rng.integers(1, 3))
    h, w = rng.integers(2, 6, size=2)
    ch = int(rng.integers(1, int(h) + 1))
    cw = int(rng.integers(1, int(w) + 1))
    top = int(rng.integers(0, int(h) - ch + 1))
    left = int(rng.integers(0, int(w) - cw + 1))
    x = _param(rng, (c, int(h), int(w)))
    return [x], lambda: ad.crop2d(x, top, left, ch, cw)


def _build_permute(rng):
    shape = tuple(rng.integers(1, 4, size=3))
    axes = tuple(rng.permutation(3))
    x = _param(rng, shape)
    return [x], lambda: ad.permute(x, axes)


def _build_reshape(rng):
    a, b = rng.integers(1, 5, size=2)
    x = _param(rng, (int(a), int(b)))
    return [x], lambda: ad.reshape(x, (int(a * b),))


def _build_scatter_rows(rng):
    m = int(rng.integers(2, 8))
    n = int(rng.integers(1, m + 1))
    c = int(rng.integers(1, 4))
    ids = rng.choice(m, size=n, replace=False)
    rows = _param(rng, (n, c))
    return [rows], lambda: ad.scatter_rows(rows, ids, m)


def _build_weighted_sum(rng):
    shape = tuple(rng.integers(1, 5, size=2))
    x = _param(rng, shape)
    w = rng.normal(size=shape)
    return [x], lambda: ad.weighted_sum(x, w)


PRIMITIVE_BUILDERS = {
    "linear": _build_linear,
    "conv2d": _build_conv2d,
    "relu": _build_relu,
    "sigmoid": _build_sigmoid,
    "add": _build_add,
    "mul": _build_mul,
    "scale": _build_scale,
    "concat": _build_concat,
    "instance_norm": _build_instance_norm,
    "downsample2": _build_downsample2,
    "upsample2": _build_upsample2,
    "mse": _build_mse,
    "pad_reflect2d": _build_pad_reflect,
    "crop2d": _build_crop,
    "permute": _build_permute,
    "reshape": _build_reshape,
    "scatter_rows": _build_scatter_rows,
    "weighted_sum": _build_weighted_sum,
}


def check_primitives(n_configs=100, seed=0):
    results = []
    for idx, (name, build) in enumerate(PRIMITIVE_BUILDERS.items()):
        rng = np.random.default_rng([seed, idx])
        passed, rel, ab = _check_case(build, rng, n_configs)
        results.append(CheckResult(name, passed, n_configs, rel, ab))
    return results


# ---------------------------------------------------------------------------
# full-model directional checks


def _min_relu_preactivation(tape):
    best = np.inf
    for node in tape.nodes:
        if node.op == "relu":
            best = min(best, float(np.abs(node.inputs[0].data).min()))
    return best


def directional_check(params, loss_fn, rng, h=H_DEFAULT):
    """Compare d/dt loss(theta + t*v) at t=0 against <grad, v>.

    loss_fn(record) must run the forward pass and return the loss tensor;
    when record is truthy it must run under an active tape and return
    (tape, loss). Returns (ok, rel_or_abs_err, is_small).
    """
    tape, loss = loss_fn(True)
    ad.backward(tape, loss)
    total = sum(p.data.size for p in params)
    v = rng.normal(size=total)
    v /= np.linalg.norm(v)
    analytic = 0.0
    offset = 0
    for p in params:
        n = p.data.size
        analytic += float((p.grad.reshape(-1) * v[offset : offset + n]).sum())
        offset += n

    def shift(sign):
        offset = 0
        for p in params:
            n = p.data.size
            p.data += sign * h * v[offset : offset + n].reshape(p.data.shape)
            offset += n

    shift(+1.0)
    lp = loss_fn(False).item()
    shift(-2.0)
    lm = loss_fn(False).item()
    shift(+1.0)
    numeric = (lp - lm) / (2.0 * h)
    ok, rel, ab = grads_close(
        np.asarray([analytic]), np.asarray([numeric])
    )
    for p in params:
        p.zero_grad()
    return ok, rel, ab


def _check_model(make_config, n_configs, seed, kink_margin=1e-4):
    worst_rel = worst_abs = 0.0
    passed = True
    done = 0
    attempt = 0
    while done < n_configs:
        rng = np.random.default_rng([seed, 7, attempt])
        attempt += 1
        params, loss_fn = make_config(rng)
        with ad.Tape() as tape:
            loss = loss_fn()
        if _min_relu_preactivation(tape) < kink_margin:
            continue  # too close to a relu kink for FD to be meaningful

        def runner(record):
            if record:
                with ad.Tape() as t:
                    out = loss_fn()
                return t, out
            return loss_fn()

        ok, rel, ab = directional_check(params, runner, rng)
        worst_rel = max(worst_rel, rel)
        worst_abs = max(worst_abs, ab)
        passed = passed and ok
        done += 1
    return passed, worst_rel, worst_abs, done


def _mlp_config(rng):
    from .models import RadianceMLP, radiance_params

    mlp = RadianceMLP(seed=int(rng.integers(0, 2**31)))
    n = 3
    coords = rng.normal(size=(n, mlp.coord_features))
    dirs = rng.normal(size=(n, mlp.dir_features))
    target = rng.normal(size=(n, mlp.widths[-1]))
    params = radiance_params(mlp)

    def loss_fn():
        out = mlp.forward(ad.Tensor(coords), ad.Tensor(dirs))
        return ad.mse(out, ad.Tensor(target))

    return list(params.values()), loss_fn


def _refine_config(rng):
    from .models import RefineNet, refine_params

    net = RefineNet(width_mult=0.25, seed=int(rng.integers(0, 2**31)))
    fmap = rng.normal(size=(16, 16, net.in_channels))
    target = rng.uniform(0.2, 0.8, size=(16, 16, 3))
    params = refine_params(net)

    def loss_fn():
        img = net.forward(ad.Tensor(fmap))
        return ad.mse(img, ad.Tensor(target))

    return list(params.values()), loss_fn


def _perceptual_config(rng):
    from .training import FeaturePyramid, perceptual_loss

    extractor = FeaturePyramid(seed=int(rng.integers(0, 2**31)))
    pred = ad.Tensor(rng.uniform(0.1, 0.9, size=(8, 8, 3)), requires_grad=True)
    gt = ad.Tensor(rng.uniform(0.1, 0.9, size=(8, 8, 3)))

    def loss_fn():
        return perceptual_loss(pred, gt, extractor)

    return [pred], loss_fn


def check_models(n_configs=100, seed=0):
    results = []
    for name, make in (
        ("radiance_mlp", _mlp_config),
        ("refine_net", _refine_config),
        ("perceptual_loss", _perceptual_config),
    ):
        passed, rel, ab, done = _check_model(make, n_configs, seed)
        results.append(CheckResult(name, passed, done, rel, ab))
    return results


def run_all(n_configs=100, seed=0):
    return check_primitives(n_configs, seed) + check_models(n_configs, seed)
