"""Finite-difference gradient suite shared by the CLI and the test-suite.

Every check runs in float64 and returns ``(name, rel_err, tol)``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .efd import coeffs_to_points, efd_forward, efd_regularizer
from .nn import grad_check
from .renderer import RasterSettings, compose_scene, rasterize_alpha

NETWORK_TOL = 1e-3
RASTER_TOL = 1e-2
GROUPS = ("tensor", "efd", "renderer", "chain")
# the signed distance has kinks where the nearest segment switches; small steps
# keep the central differences from straddling them
STEP = {"tensor": 1e-4, "efd": 1e-3, "renderer": 1e-5, "chain": 1e-5}


def _t(rng, *shape, scale=1.0):
    return T.Tensor(rng.normal(size=shape) * scale)


def _scalar(y):
    # fixed random projection (per output shape) so every output element matters
    w = np.random.default_rng(list(y.shape)).normal(size=y.shape)
    return T.tsum(T.mul(y, w))


def _unary_checks(rng):
    x = _t(rng, 3, 4)
    pos = T.Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
    b = _t(rng, 3, 4)
    nz = T.Tensor(rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4)))
    w = rng.normal(size=(3, 4))
    proj = lambda y: T.tsum(T.mul(y, w))
    # clip probes stay away from the kinks at the bounds
    xc = T.Tensor(np.array([[-2.0, -0.5, 0.3, 1.7]] * 3))
    return [
        ("add", lambda: proj(T.add(x, b)), [x, b]),
        ("add_broadcast", lambda: proj(T.add(x, b[0])), [x]),
        ("sub", lambda: proj(T.sub(x, b)), [x, b]),
        ("mul", lambda: proj(T.mul(x, b)), [x, b]),
        ("div", lambda: proj(T.div(x, nz)), [x, nz]),
        ("neg", lambda: proj(T.neg(x)), [x]),
        ("square", lambda: proj(T.square(x)), [x]),
        ("sqrt", lambda: proj(T.sqrt(pos)), [pos]),
        ("clip", lambda: proj(T.clip(xc, -1.0, 1.0)), [xc]),
        ("gelu", lambda: proj(T.gelu(x)), [x]),
        ("sigmoid", lambda: proj(T.sigmoid(x)), [x]),
        ("softplus", lambda: proj(T.softplus(x)), [x]),
        ("softmax", lambda: proj(T.softmax(x, axis=1)), [x]),
    ]


def _shape_checks(rng):
    x = _t(rng, 2, 3, 4)
    y = _t(rng, 2, 3, 4)
    a = _t(rng, 2, 3, 4)
    m = _t(rng, 2, 4, 5)
    W = _t(rng, 4, 5)
    bias = _t(rng, 5)
    rows = _t(rng, 3, 2, 4)
    wts = T.Tensor(rng.uniform(size=(5, 3)))
    idx = rng.integers(0, 3, size=(2, 6, 4))
    return [
        ("tsum", lambda: _scalar(T.tsum(x, axis=1)), [x]),
        ("mean", lambda: _scalar(T.mean(x, axis=(0, 2), keepdims=True)), [x]),
        ("reshape", lambda: _scalar(T.reshape(x, (6, 4))), [x]),
        ("transpose", lambda: _scalar(T.transpose(x, (2, 0, 1))), [x]),
        ("getitem", lambda: _scalar(x[:, 1:, ::2]), [x]),
        ("stack", lambda: _scalar(T.stack([x, y], axis=1)), [x, y]),
        ("concat", lambda: _scalar(T.concat([x, y], axis=2)), [x, y]),
        ("gather", lambda: _scalar(T.gather(a, idx, axis=1)), [a]),
        ("weighted_sum", lambda: _scalar(T.weighted_sum(wts, rows)), [wts, rows]),
        ("matmul", lambda: _scalar(T.matmul(x, m)), [x, m]),
        ("linear", lambda: _scalar(T.linear(T.reshape(x, (6, 4)), W, bias)), [x, W, bias]),
    ]


def _conv_checks(rng):
    x = _t(rng, 2, 3, 6, 6)
    xh = _t(rng, 2, 6, 6, 3)
    w = _t(rng, 4, 3, 3, 3, scale=0.5)
    b = _t(rng, 4)
    g, be = _t(rng, 3), _t(rng, 3)
    out = []
    for lay, inp in (("NCHW", x), ("NHWC", xh)):
        out += [
            (f"conv2d[{lay}]", lambda inp=inp, lay=lay: _scalar(T.conv2d(inp, w, b, layout=lay)), [inp, w, b]),
            (f"avg_pool2d[{lay}]", lambda inp=inp, lay=lay: _scalar(T.avg_pool2d(inp, lay)), [inp]),
        ]
    for training in (True, False):
        rm, rv = np.zeros(3), np.ones(3)

        def bn(training=training, rm=rm, rv=rv):
            # fresh buffer copies keep the running stats out of the probe
            return _scalar(T.batch_norm(x, g, be, rm.copy(), rv.copy(), training))

        out.append((f"batch_norm[{'train' if training else 'eval'}]", bn, [x, g, be]))
    tgt = T.Tensor(rng.uniform(size=(2, 3, 6, 6)))
    out.append(("mse_loss", lambda: T.mse_loss(x, tgt), [x]))
    return out


def tensor_checks(rng):
    return _unary_checks(rng) + _shape_checks(rng) + _conv_checks(rng)


def efd_checks(rng):
    c = efd_forward(np.stack([10 * np.cos(np.linspace(0, 2 * np.pi, 40, endpoint=False)),
                              6 * np.sin(np.linspace(0, 2 * np.pi, 40, endpoint=False))], 1), 8)
    coef = T.Tensor(np.stack([c.as_array(), c.as_array() * 0.7]) + rng.normal(size=(2, 4, 8)) * 0.3)
    return [
        ("efd_regularizer", lambda: efd_regularizer(coef), [coef]),
        ("coeffs_to_points", lambda: _scalar(coeffs_to_points(coef, 32)), [coef]),
    ]


def renderer_checks(rng):
    s = RasterSettings(height=16, width=16, samples=32, tau=1.0)
    base = efd_forward(np.stack([5 * np.cos(np.linspace(0, 2 * np.pi, 64, endpoint=False)),
                                 3.5 * np.sin(np.linspace(0, 2 * np.pi, 64, endpoint=False))], 1), 8)
    shape = T.Tensor(base.as_array()[None] + rng.normal(size=(1, 4, 8)) * 0.2)
    alpha = T.Tensor(rng.uniform(size=(2, 5, 5)))
    fg, bg = T.Tensor(rng.uniform(size=(2, 3))), T.Tensor(rng.uniform(size=(2, 3)))
    return [
        ("rasterize_alpha", lambda: _scalar(rasterize_alpha(shape, s)), [shape]),
        ("compose_scene", lambda: _scalar(compose_scene(alpha, fg, bg)), [alpha, fg, bg]),
    ]


def chain_checks(rng, program="dvp-p"):
    """perceive -> eval_program -> render -> MSE on a miniature model."""
    from .model import DVPModel

    model = DVPModel(program, seed=int(rng.integers(1 << 31)), channels_scale=0.125, image_size=16,
                     latent_dim=16, raster=RasterSettings(height=16, width=16, samples=32))
    model.astype(np.float64)
    model.eval()  # batch statistics would couple the probes across the batch
    img = T.Tensor(rng.uniform(size=(2, 3, 16, 16)))
    params = dict(model.named_parameters())
    picks = [params[k] for k in params if k.endswith("weight")][:2]
    picks += [p for k, p in params.items() if k.startswith("dsl.") and k.endswith("fc3.weight")]
    if "dsl.Prototype.bank" in params:
        picks.append(params["dsl.Prototype.bank"])

    def loss():
        return T.mse_loss(model(img).recon, img)

    return [(f"chain[{program}]", loss, picks)]


def run_suite(groups=GROUPS, seed=0, coords=12):
    """Run the selected check groups; returns a list of ``(name, err, tol)``."""
    unknown = set(groups) - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown gradcheck group(s) {sorted(unknown)}; choose from {GROUPS}")
    results = []
    with T.precision(np.float64):
        rng = np.random.default_rng(seed)
        for group in groups:
            tol = RASTER_TOL if group in ("renderer", "chain") else NETWORK_TOL
            if group == "tensor":
                checks = tensor_checks(rng)
            elif group == "efd":
                checks = efd_checks(rng)
            elif group == "renderer":
                checks = renderer_checks(rng)
            else:
                checks = chain_checks(rng, "dvp-d") + chain_checks(rng, "dvp-p")
            for name, f, xs in checks:
                err = grad_check(lambda _: f(), xs, h=STEP[group],
                                 coords=coords, rng=np.random.default_rng([seed, len(results)]))
                results.append((name, float(err), tol))
    return results
