"""Gradient-check cases shared by the unit and acceptance suites.

Each case maps a seeded generator to ``(loss_fn, leaves)``; all tensors are
float64 and inputs feeding kinks (relu, maxpool) are kept away from them.
"""
import numpy as np

from sftnkit import tensor as T
from sftnkit.tensor import Tensor


def _randn(rng, *shape):
    return Tensor(rng.normal(size=shape))


def _away(rng, *shape, margin=0.05):
    x = rng.normal(size=shape)
    return Tensor(np.sign(x) * (np.abs(x) + margin))


def _weights(rng, *shape):
    return _randn(rng, *shape)


def _bn_case(training):
    def case(rng):
        x, g, b = _randn(rng, 3, 2, 3, 3), _randn(rng, 2), _randn(rng, 2)
        rm, rv = rng.normal(size=2), rng.uniform(0.5, 2.0, size=2)
        w = _weights(rng, 3, 2, 3, 3)
        return (lambda: (T.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training) * w).sum()), [x, g, b]
    return case


def _pool_case(rng):
    x = _randn(rng, 2, 2, 4, 4)
    w = _weights(rng, 2, 2, 2, 2)
    return (lambda: (T.maxpool2d(x, 2) * w).sum()), [x]


PRIMITIVE_CASES = {
    "matmul": lambda r: ((lambda a, b, w: (lambda: (T.matmul(a, b) * w).sum(), [a, b]))(
        _randn(r, 3, 4), _randn(r, 4, 2), _weights(r, 3, 2))),
    "add": lambda r: ((lambda a, b, w: (lambda: ((a + b) * w).sum(), [a, b]))(
        _randn(r, 3, 4), _randn(r, 4), _weights(r, 3, 4))),
    "mul": lambda r: ((lambda a, b, w: (lambda: (a * b * w).sum(), [a, b]))(
        _randn(r, 3, 4), _randn(r, 3, 1), _weights(r, 3, 4))),
    "conv2d": lambda r: ((lambda x, k, b, w: (lambda: (T.conv2d(x, k, b, 1, 1) * w).sum(), [x, k, b]))(
        _randn(r, 2, 3, 5, 5), _randn(r, 4, 3, 3, 3), _randn(r, 4), _weights(r, 2, 4, 5, 5))),
    "conv2d_stride2": lambda r: ((lambda x, k, w: (lambda: (T.conv2d(x, k, None, 2, 1) * w).sum(), [x, k]))(
        _randn(r, 2, 3, 6, 6), _randn(r, 2, 3, 3, 3), _weights(r, 2, 2, 3, 3))),
    "conv_transpose2d": lambda r: ((lambda x, k, b, w: (lambda: (T.conv_transpose2d(x, k, b, 2, 1) * w).sum(), [x, k, b]))(
        _randn(r, 2, 3, 3, 3), _randn(r, 3, 2, 4, 4), _randn(r, 2), _weights(r, 2, 2, 6, 6))),
    "depthwise_conv2d": lambda r: ((lambda x, k, w: (lambda: (T.depthwise_conv2d(x, k, 1, 1) * w).sum(), [x, k]))(
        _randn(r, 2, 3, 4, 4), _randn(r, 3, 1, 3, 3), _weights(r, 2, 3, 4, 4))),
    "relu": lambda r: ((lambda x, w: (lambda: (T.relu(x) * w).sum(), [x]))(_away(r, 3, 5), _weights(r, 3, 5))),
    "maxpool2d": _pool_case,
    "global_avgpool": lambda r: ((lambda x, w: (lambda: (T.global_avgpool(x) * w).sum(), [x]))(
        _randn(r, 2, 3, 4, 4), _weights(r, 2, 3))),
    "batchnorm2d_train": _bn_case(True),
    "batchnorm2d_eval": _bn_case(False),
    "reshape": lambda r: ((lambda x, w: (lambda: (T.reshape(x, (4, 6)) * w).sum(), [x]))(
        _randn(r, 2, 3, 4), _weights(r, 4, 6))),
    "log": lambda r: ((lambda x, w: (lambda: (T.log(x) * w).sum(), [x]))(
        Tensor(r.uniform(0.5, 2.0, size=(3, 4))), _weights(r, 3, 4))),
    "exp": lambda r: ((lambda x, w: (lambda: (T.exp(x) * w).sum(), [x]))(_randn(r, 3, 4), _weights(r, 3, 4))),
    "sum": lambda r: ((lambda x, w: (lambda: (T.sum(x, axis=1) * w).sum(), [x]))(_randn(r, 3, 4), _weights(r, 3))),
    "mean": lambda r: ((lambda x, w: (lambda: (T.mean(x, axis=0) * w).sum(), [x]))(_randn(r, 3, 4), _weights(r, 4))),
    "log_softmax": lambda r: ((lambda x, w: (lambda: (T.log_softmax(x) * w).sum(), [x]))(_randn(r, 3, 5), _weights(r, 3, 5))),
    "sqrt": lambda r: ((lambda x, w: (lambda: (T.sqrt(x) * w).sum(), [x]))(
        Tensor(r.uniform(0.5, 2.0, size=(3, 4))), _weights(r, 3, 4))),
    "div": lambda r: ((lambda a, b, w: (lambda: (a / b * w).sum(), [a, b]))(
        _randn(r, 3, 4), Tensor(r.uniform(0.5, 2.0, size=(3, 1))), _weights(r, 3, 4))),
    "transpose": lambda r: ((lambda x, w: (lambda: (T.transpose(x, (1, 0)) * w).sum(), [x]))(
        _randn(r, 3, 4), _weights(r, 4, 3))),
}


def randomize_batchnorm(net, rng):
    """Move batchnorm affine params and running stats off their identity init."""
    from sftnkit.nn import BatchNorm2d
    for _, mod in net.named_modules():
        if isinstance(mod, BatchNorm2d):
            c = mod.weight.shape[0]
            mod.weight.data[...] = rng.uniform(0.5, 1.5, size=c)
            mod.bias.data[...] = rng.normal(0, 0.3, size=c)
            mod.running_mean[...] = rng.normal(0, 0.3, size=c)
            mod.running_var[...] = rng.uniform(0.5, 2.0, size=c)
    return net


def model_case(arch, seed, training):
    """Cross-entropy of a small float64 reference-topology net w.r.t. all its parameters."""
    from sftnkit.blocknet import build_architecture, init_params, plain_net
    from sftnkit.losses import cross_entropy
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        if arch == "plain":
            net = plain_net((2, 3), (3, 8, 8), 4)
        else:
            net = build_architecture(arch, input_shape=(3, 8, 8), num_classes=4)
    init_params(net, seed)
    net.train(training)
    x = nondegenerate_point(net, rng, (3, 3, 8, 8))
    y = rng.integers(0, 4, size=3)
    return (lambda: cross_entropy(net(x), y)), net.parameters()


def _layers_margin(layers, h):
    """Walk leaf layers from input ``h``; return (kink margin, output)."""
    from sftnkit.nn import MaxPool2d, ReLU
    margin = np.inf
    with T.no_grad():
        for layer in layers:
            if isinstance(layer, ReLU):
                margin = min(margin, np.abs(h.data).min())
            elif isinstance(layer, MaxPool2d):
                n, c, hh, ww = h.shape
                k = layer.kernel_size
                win = h.data.reshape(n, c, hh // k, k, ww // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(-1, k * k)
                top = np.sort(win, axis=1)
                live = top[:, -1] != 0  # ties among relu zeros carry no gradient either way
                if live.any():
                    margin = min(margin, (top[live, -1] - top[live, -2]).min())
            h = layer(h)
    return margin, h


def kink_margin(net, x):
    """Smallest distance of any relu input from 0 or any maxpool window's top-2 gap."""
    margin, _ = _layers_margin([layer for blk in net.blocks.layers for layer in blk.layers], x)
    return margin


def sftn_kink_margin(model, x):
    """Kink margin over the teacher trunk and every transform + branch path."""
    margin = kink_margin(model.teacher, x)
    with T.no_grad():
        taps = model.teacher.forward_with_taps(x)
    for i, transform, branch in zip(model.active, model.transforms.layers, model.branches.layers):
        layers = list(transform.layers.layers) + [layer for blk in branch.blocks.layers for layer in blk.layers]
        margin = min(margin, _layers_margin(layers, taps.features[i - 1])[0])
    return margin


def nondegenerate_point(net, rng, shape, margin=1e-4, tries=50, measure=kink_margin):
    """Redraw batchnorm state and inputs until no relu or maxpool sits within ``margin`` of its kink."""
    for _ in range(tries):
        randomize_batchnorm(net, rng)
        for _ in range(10):
            x = Tensor(rng.normal(size=shape))
            if measure(net, x) > margin:
                return x
    raise RuntimeError("could not find a non-degenerate point")


def sftn_case(seed):
    """Full three-term teacher objective of a tiny float64 teacher/student pair, all parameters."""
    from sftnkit.blocknet import plain_net
    from sftnkit.sftn import LossConfig, build_sftn, sftn_forward, sftn_loss
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        teacher = plain_net((3, 4, 5), (3, 8, 8), 4, convs_per_block=1, name="t")
        student = plain_net((2, 3, 4), (3, 8, 8), 4, convs_per_block=1, name="s")
        model = build_sftn(teacher, student, seed)
    model.eval()
    x = nondegenerate_point(model, rng, (3, 3, 8, 8), measure=sftn_kink_margin)
    y = rng.integers(0, 4, size=3)
    cfg = LossConfig(lambda_kl=rng.uniform(0.5, 5), lambda_ce=rng.uniform(0.5, 2), tau_tilde=rng.uniform(1, 4))
    return (lambda: sftn_loss(sftn_forward(model, x, cfg.tau_tilde), y, cfg)[0]), model.parameters()


def distill_case(seed, method):
    """KD (plus hint term for FitNets / SP) of a tiny float64 student against a fixed teacher."""
    from sftnkit.blocknet import init_params, plain_net
    from sftnkit.distill import fitnets_hint_loss, kd_loss, make_regressors, sp_loss
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        student = plain_net((2, 3), (3, 8, 8), 4, convs_per_block=1, name="s")
        teacher = plain_net((3, 4), (3, 8, 8), 4, convs_per_block=1, name="t")
    init_params(student, seed)
    init_params(teacher, seed + 1)
    student.eval()
    teacher.eval()
    x = nondegenerate_point(student, rng, (3, 3, 8, 8))
    y = rng.integers(0, 4, size=3)
    with T.no_grad():
        t_out = teacher.forward_with_taps(x)
    regs = make_regressors(student, teacher, [1], seed).astype(np.float64)

    def loss_fn():
        s_out = student.forward_with_taps(x)
        loss = kd_loss(s_out.logits, t_out.logits, y, 4.0, 1.0)
        if method == "FitNets":
            loss = loss + fitnets_hint_loss(s_out.features, t_out.features, regs.layers, [1])
        elif method == "SP":
            loss = loss + sp_loss(s_out.features, t_out.features, [1]) * 100.0
        return loss
    leaves = student.parameters() + (regs.parameters() if method == "FitNets" else [])
    return loss_fn, leaves
