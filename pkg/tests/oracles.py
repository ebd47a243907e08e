"""Slow, obviously-correct reference implementations used only by the tests."""

import itertools
import math

import numpy as np


def naive_conv2d(x, w, b, pad):
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for y in range(ho):
            for xx in range(wo):
                acc = float(b[o])
                for c in range(c_in):
                    for i in range(k):
                        for j in range(k):
                            acc += w[o, c, i, j] * xp[c, y + i, xx + j]
                out[o, y, xx] = acc
    return out


def naive_maxpool(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2), dtype=x.dtype)
    for ch in range(c):
        for y in range(h // 2):
            for xx in range(w // 2):
                best = -math.inf
                for dy, dx in itertools.product(range(2), range(2)):
                    best = max(best, x[ch, 2 * y + dy, 2 * xx + dx])
                out[ch, y, xx] = best
    return out


def pairwise_mean_knn(points, k):
    pts = [tuple(map(float, p)) for p in points]
    out = []
    for i, p in enumerate(pts):
        d = sorted(math.dist(p, q) for j, q in enumerate(pts) if j != i)
        kk = min(k, len(d))
        out.append(sum(d[:kk]) / kk)
    return np.array(out)


def central_difference(f, arrays, eps=1e-6):
    """Numerical gradient of scalar ``f()`` w.r.t. each array in ``arrays`` (perturbed in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f()
            flat[i] = orig - eps
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(analytic, numeric, floor=1e-8):
    analytic, numeric = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def half_sq_loss(out, target):
    r = out - target
    return 0.5 * np.sum(r * r, axis=tuple(range(r.ndim - 3, r.ndim)))


def model_fd_gradients(model, image, target, eps=1e-4, batch=256, min_eps=1e-8, stats=None):
    """Central differences of ``0.5*||forward - target||^2`` for every scalar parameter.

    Perturbing one weight of a convolution shifts its pre-activation by
    ``eps`` times one shifted input plane (or by ``eps`` everywhere for a
    bias). Those perturbed pre-activations are stacked into a batch and run
    through the remaining layers together, so every scalar gets a genuine
    two-sided difference of the network loss.

    The loss is piecewise quadratic in any single parameter of a ReLU/max-pool
    network, so a central difference is exact unless the two probes land on
    different linear pieces. Probes are compared by their ReLU sign pattern
    and pool argmax; a straddling pair is retried with ``eps / 10`` until
    ``min_eps``. ``stats`` (a dict) receives retry and unresolved counts.
    """
    from mscnn import model as mdl

    layers = model.spec.layers
    acts = [image]
    for i in range(len(layers)):
        acts.append(mdl.run_layers(model, acts[-1], i, i + 1))
    if stats is not None:
        stats.update(retried=0, unresolved=0)

    grads = []
    for i, (spec, layer) in enumerate(zip(layers, model.layers)):
        if isinstance(spec, mdl.PoolSpec):
            continue
        x = acts[i]
        convs = [layer] if isinstance(spec, mdl.ConvSpec) else layer
        pre = np.concatenate([_conv_def(x, c) for c in convs], axis=0)
        h, w = pre.shape[1:]
        offset = 0
        for conv in convs:
            p, k = conv.pad, conv.kernel
            xp = np.zeros((x.shape[0], h + 2 * p, w + 2 * p))
            xp[:, p:p + h, p:p + w] = x
            entries = [(offset + o, xp[c, a:a + h, b:b + w]) for o in range(conv.out_channels)
                       for c in range(conv.in_channels) for a in range(k) for b in range(k)]
            entries += [(offset + o, 1.0) for o in range(conv.out_channels)]
            values = np.empty(len(entries))
            todo = np.arange(len(entries))
            step = eps
            while todo.size:
                vals, straddled = _probe(model, i, spec, pre, [entries[j] for j in todo], step, target, batch)
                values[todo] = vals
                if step / 10 < min_eps:
                    if stats is not None:
                        stats["unresolved"] += int(straddled.sum())
                    break
                todo = todo[straddled]
                step /= 10
                if stats is not None:
                    stats["retried"] += int(todo.size)
            n_w = conv.weights.size
            grads.append(values[:n_w].reshape(conv.weights.shape))
            grads.append(values[n_w:])
            offset += conv.out_channels
    return grads


def _probe(model, index, spec, pre, entries, eps, target, batch):
    from mscnn import model as mdl

    values, straddled = [], []
    relu = mdl.layer_activation(spec)
    for start in range(0, len(entries), batch):
        chunk = entries[start:start + batch]
        stack = np.repeat(pre[None], 2 * len(chunk), axis=0)
        for n, (channel, delta) in enumerate(chunk):
            stack[2 * n, channel] += eps * delta
            stack[2 * n + 1, channel] -= eps * delta
        out, pattern = _run_suffix(model, stack, index, relu)
        losses = half_sq_loss(out, target)
        values.extend((losses[0::2] - losses[1::2]) / (2 * eps))
        straddled.extend(np.any(pattern[0::2] != pattern[1::2], axis=1))
    return np.array(values), np.array(straddled, dtype=bool)


def _run_suffix(model, stack, index, relu):
    """Finish the forward pass from layer ``index``'s pre-activation, recording the piece each probe is on."""
    from mscnn import model as mdl
    from mscnn import tensor_core as tc

    n = len(stack)
    marks = []
    x = stack
    if relu:
        marks.append(x.reshape(n, -1) > 0)
        x = np.maximum(x, 0)
    for spec, layer in list(zip(model.spec.layers, model.layers))[index + 1:]:
        if isinstance(spec, mdl.PoolSpec):
            x, idx = tc.maxpool2x2_forward(x)
            marks.append(idx.reshape(n, -1))
            continue
        x = tc.conv2d_forward(x, layer) if isinstance(spec, mdl.ConvSpec) else mdl.msb_forward(x, layer)
        if mdl.layer_activation(spec):
            marks.append(x.reshape(n, -1) > 0)
            x = np.maximum(x, 0)
    pattern = np.concatenate([m.astype(np.uint8) for m in marks], axis=1) if marks else np.zeros((n, 0))
    return x, pattern


def _conv_def(x, conv):
    from mscnn.tensor_core import conv2d_forward

    return conv2d_forward(x, conv)
