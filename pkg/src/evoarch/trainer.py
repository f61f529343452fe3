"""Dense-tensor CNN training straight from a genome, in numpy.

Every conv node runs convolution, batch normalization and ReLU; fully
connected nodes (and the head) are plain affine maps; dropout uses
inverted scaling so evaluation is a no-op.  Gradients are reverse-mode
through the DAG with multi-consumer outputs accumulating their
consumers' gradients.  Float32 is the working dtype for search runs;
float64 is used for finite-difference verification.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from evoarch.genome import (
    CONCAT,
    CONV,
    DROPOUT,
    FC,
    GLOBALPOOL,
    HEAD,
    INPUT,
    MAXPOOL,
    SKIP,
    conv_node,
    dropout_node,
    fc_node,
    infer_shapes,
    maxpool_node,
    topological_order,
)

BN_EPS = 1e-5
BN_RUNNING_KEEP = 0.9  # running <- 0.9 * running + 0.1 * batch
_COL_BUDGET = 16_000_000  # elements per im2col chunk, keeps peaks near 128 MB


class DivergedTraining(Exception):
    """Loss went non-finite during training."""


@dataclass(frozen=True)
class TrainPlan:
    """Budget and optimizer settings for one training run.

    The learning rate decays as stage_lr * (1 + gamma * t_local) ** -alpha
    within each of three stages; boundaries give the iterations where the
    second and third stages begin and the local clock resets.
    """

    max_iters: int = 600
    boundaries: tuple = (300, 450)
    stage_lrs: tuple = (1e-1, 1e-3, 1e-5)
    gamma: float = 0.001
    alpha: float = 0.75
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        b1, b2 = self.boundaries
        if not 0 <= b1 <= b2:
            raise ValueError("stage boundaries must be ascending and non-negative")
        if len(self.stage_lrs) != 3:
            raise ValueError("exactly three stage learning rates required")

    @classmethod
    def paper_scale(cls, **overrides):
        base = dict(max_iters=20000, boundaries=(10000, 15000), batch_size=128)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk_scale(cls, max_iters=600, **overrides):
        # stages split 50/25/25 like the full-scale 10k/5k/5k schedule
        base = dict(max_iters=max_iters, boundaries=(max_iters // 2, (max_iters * 3) // 4))
        base.update(overrides)
        return cls(**base)


def lr_at(t, plan):
    """Learning rate at iteration t under the three-stage inverse decay."""
    if not 0 <= t < plan.max_iters:
        raise ValueError(f"iteration {t} outside [0, {plan.max_iters})")
    b1, b2 = plan.boundaries
    if t < b1:
        stage, start = 0, 0
    elif t < b2:
        stage, start = 1, b1
    else:
        stage, start = 2, b2
    return plan.stage_lrs[stage] * (1.0 + plan.gamma * (t - start)) ** (-plan.alpha)


@dataclass
class ModelState:
    """Weights, batchnorm running stats and momentum buffers per node id."""

    params: dict
    buffers: dict
    velocity: dict
    dtype: object = np.float32

    def copy_shallow(self):
        return ModelState(dict(self.params), dict(self.buffers), dict(self.velocity), self.dtype)


def init_model(genome, rng, dtype=np.float32):
    """He-normal weights, zero biases, unit batchnorm, zero momentum.

    Nodes are initialized in id order so a given rng state always yields
    bitwise identical weights.
    """
    shapes = infer_shapes(genome)
    params, buffers, velocity = {}, {}, {}
    for i in sorted(genome.nodes):
        node = genome.nodes[i]
        if node.kind == CONV:
            cin = shapes[genome.preds[i][0]][0]
            cout = node.params["channels"]
            f = node.params["filter"]
            fan_in = cin * f * f
            params[i] = {
                "W": (rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, f, f))).astype(dtype),
                "b": np.zeros(cout, dtype),
                "gamma": np.ones(cout, dtype),
                "beta": np.zeros(cout, dtype),
            }
            buffers[i] = {"mean": np.zeros(cout, dtype), "var": np.ones(cout, dtype)}
        elif node.kind in (FC, HEAD):
            nin = int(np.prod(shapes[genome.preds[i][0]]))
            nout = node.params["units"] if node.kind == FC else node.params["classes"]
            params[i] = {
                "W": (rng.normal(0.0, np.sqrt(2.0 / nin), (nout, nin))).astype(dtype),
                "b": np.zeros(nout, dtype),
            }
    for i, group in params.items():
        velocity[i] = {k: np.zeros_like(v) for k, v in group.items()}
    return ModelState(params, buffers, velocity, dtype)


# ---------------------------------------------------------------------------
# convolution kernels (batch-chunked im2col)


def _conv_out_side(side, f, stride, pad):
    return (side + 2 * pad - f) // stride + 1


def _chunk_sizes(n, per_sample_cols):
    step = max(1, _COL_BUDGET // max(1, per_sample_cols))
    return [(s, min(s + step, n)) for s in range(0, n, step)]


def _im2col(x, f, stride, pad):
    """(n, OH*OW, Cin*f*f) patch matrix for a batch chunk."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (f, f), axis=(2, 3))[:, :, ::stride, ::stride]
    n, cin, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, cin * f * f), oh, ow


def _conv_forward(x, W, b, stride, pad):
    n, cin, h, w = x.shape
    cout, _, f, _ = W.shape
    oh = _conv_out_side(h, f, stride, pad)
    ow = _conv_out_side(w, f, stride, pad)
    w_rows = W.reshape(cout, -1)
    out = np.empty((n, cout, oh, ow), x.dtype)
    for s, e in _chunk_sizes(n, oh * ow * cin * f * f):
        cols, _, _ = _im2col(x[s:e], f, stride, pad)
        z = cols @ w_rows.T + b
        out[s:e] = z.transpose(0, 2, 1).reshape(e - s, cout, oh, ow)
    return out


def _conv_backward(x, W, stride, pad, dz):
    n, cin, h, w = x.shape
    cout, _, f, _ = W.shape
    _, _, oh, ow = dz.shape
    w_rows = W.reshape(cout, -1)
    dW = np.zeros_like(w_rows)
    db = dz.sum(axis=(0, 2, 3))
    dxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), x.dtype)
    for s, e in _chunk_sizes(n, oh * ow * cin * f * f):
        cols, _, _ = _im2col(x[s:e], f, stride, pad)
        dz_flat = dz[s:e].reshape(e - s, cout, oh * ow).transpose(0, 2, 1)
        dW += np.tensordot(dz_flat, cols, axes=([0, 1], [0, 1]))
        dcols = dz_flat @ w_rows
        patches = dcols.reshape(e - s, oh, ow, cin, f, f).transpose(0, 3, 1, 2, 4, 5)
        for di in range(f):
            for dj in range(f):
                dxp[s:e, :, di : di + stride * oh : stride, dj : dj + stride * ow : stride] += patches[
                    :, :, :, :, di, dj
                ]
    dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
    return dW.reshape(W.shape), db, dx


def _pool_forward(x, kernel, stride):
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    am = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]
    return out, am


def _pool_backward(x, kernel, stride, am, dout):
    n, c, h, w = x.shape
    oh, ow = dout.shape[2:]
    dx = np.zeros_like(x)
    for j in range(kernel * kernel):
        di, dj = divmod(j, kernel)
        contrib = dout * (am == j)
        dx[:, :, di : di + stride * oh : stride, dj : dj + stride * ow : stride] += contrib
    return dx


def _bn_forward(z, gamma, beta, mean, var):
    invstd = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mean[:, None, None]) * invstd[:, None, None]
    return gamma[:, None, None] * xhat + beta[:, None, None], xhat, invstd


# ---------------------------------------------------------------------------
# whole-graph forward and backward


def _forward_pass(model, genome, x, mode, dropout_rng):
    """Activations plus per-node caches and fresh batchnorm batch stats."""
    acts = {}
    caches = {}
    batch_stats = {}
    x = np.ascontiguousarray(x, model.dtype)
    for i in topological_order(genome):
        node = genome.nodes[i]
        ins = [acts[p] for p in genome.preds[i]]
        if node.kind == INPUT:
            acts[i] = x
        elif node.kind == CONV:
            p = model.params[i]
            z = _conv_forward(ins[0], p["W"], p["b"], node.params["stride"], node.params["pad"])
            if mode == "train":
                mu = z.mean(axis=(0, 2, 3))
                var = z.var(axis=(0, 2, 3))
                batch_stats[i] = (mu, var)
            else:
                mu, var = model.buffers[i]["mean"], model.buffers[i]["var"]
            y, xhat, invstd = _bn_forward(z, p["gamma"], p["beta"], mu, var)
            out = np.maximum(y, 0.0)
            acts[i] = out
            caches[i] = (ins[0], xhat, invstd, out)
        elif node.kind == MAXPOOL:
            out, am = _pool_forward(ins[0], node.params["kernel"], node.params["stride"])
            acts[i] = out
            caches[i] = (ins[0], am)
        elif node.kind == SKIP:
            acts[i] = ins[0] + ins[1]
        elif node.kind == CONCAT:
            acts[i] = np.concatenate(ins, axis=1)
            caches[i] = ins[0].shape[1]
        elif node.kind == GLOBALPOOL:
            acts[i] = ins[0].mean(axis=(2, 3), keepdims=True)
            caches[i] = ins[0].shape
        elif node.kind in (FC, HEAD):
            flat = ins[0].reshape(ins[0].shape[0], -1)
            p = model.params[i]
            acts[i] = flat @ p["W"].T + p["b"]
            caches[i] = (flat, ins[0].shape)
        elif node.kind == DROPOUT:
            if mode == "train":
                keep = 1.0 - node.params["ratio"]
                mask = (dropout_rng.random(ins[0].shape) < keep).astype(model.dtype) / keep
                acts[i] = ins[0] * mask
                caches[i] = mask
            else:
                acts[i] = ins[0]
                caches[i] = None
        else:
            raise ValueError(f"node {i}: no forward rule for {node.kind!r}")
    return acts, caches, batch_stats


def forward(model, genome, x, mode="eval", dropout_seed=0):
    """Head logits for a batch; mode picks batchnorm/dropout behaviour."""
    rng = np.random.default_rng(dropout_seed)
    acts, _, _ = _forward_pass(model, genome, x, mode, rng)
    return acts[genome.head_id()]


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy and the logits gradient."""
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = m[:, 0] + np.log(np.exp(shifted).sum(axis=1))
    n = logits.shape[0]
    loss = (lse - logits[np.arange(n), labels]).mean()
    probs = np.exp(logits - lse[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def _backward_pass(model, genome, caches, mode, dlogits):
    order = topological_order(genome)
    douts = {genome.head_id(): dlogits}
    grads = {}
    for i in reversed(order):
        node = genome.nodes[i]
        dout = douts.pop(i, None)
        if dout is None or node.kind == INPUT:
            continue
        preds = genome.preds[i]
        if node.kind == CONV:
            x_in, xhat, invstd, out = caches[i]
            p = model.params[i]
            dy = dout * (out > 0)
            dgamma = (dy * xhat).sum(axis=(0, 2, 3))
            dbeta = dy.sum(axis=(0, 2, 3))
            dxhat = dy * p["gamma"][:, None, None]
            if mode == "train":
                m = dy.shape[0] * dy.shape[2] * dy.shape[3]
                s1 = dxhat.sum(axis=(0, 2, 3))
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
                dz = (invstd[:, None, None] / m) * (m * dxhat - s1[:, None, None] - xhat * s2[:, None, None])
            else:
                dz = dxhat * invstd[:, None, None]
            dW, db, dx = _conv_backward(x_in, p["W"], node.params["stride"], node.params["pad"], dz)
            grads[i] = {"W": dW, "b": db, "gamma": dgamma, "beta": dbeta}
            _accumulate(douts, preds[0], dx)
        elif node.kind == MAXPOOL:
            x_in, am = caches[i]
            dx = _pool_backward(x_in, node.params["kernel"], node.params["stride"], am, dout)
            _accumulate(douts, preds[0], dx)
        elif node.kind == SKIP:
            for p_id in preds:
                _accumulate(douts, p_id, dout)
        elif node.kind == CONCAT:
            split = caches[i]
            _accumulate(douts, preds[0], dout[:, :split])
            _accumulate(douts, preds[1], dout[:, split:])
        elif node.kind == GLOBALPOOL:
            shape = caches[i]
            scale = shape[2] * shape[3]
            _accumulate(douts, preds[0], np.broadcast_to(dout / scale, shape).copy())
        elif node.kind in (FC, HEAD):
            flat, in_shape = caches[i]
            p = model.params[i]
            grads[i] = {"W": dout.T @ flat, "b": dout.sum(axis=0)}
            _accumulate(douts, preds[0], (dout @ p["W"]).reshape(in_shape))
        elif node.kind == DROPOUT:
            mask = caches[i]
            _accumulate(douts, preds[0], dout if mask is None else dout * mask)
    return grads


def _accumulate(douts, node_id, grad):
    if node_id in douts:
        douts[node_id] = douts[node_id] + grad
    else:
        douts[node_id] = grad


def _loss_grads_stats(model, genome, x, labels, mode, dropout_rng):
    acts, caches, batch_stats = _forward_pass(model, genome, x, mode, dropout_rng)
    loss, dlogits = softmax_cross_entropy(acts[genome.head_id()], labels)
    grads = _backward_pass(model, genome, caches, mode, dlogits)
    return loss, grads, batch_stats


def loss_and_grads(model, genome, x, labels, mode="train", dropout_seed=0):
    """Mean softmax cross entropy and gradients for every parameter."""
    rng = np.random.default_rng(dropout_seed)
    loss, grads, _ = _loss_grads_stats(model, genome, x, labels, mode, rng)
    return loss, grads


def sgd_step(model, grads, lr, plan):
    """One momentum update; weight decay skips batchnorm scale and shift."""
    params, velocity = {}, {}
    for i, group in model.params.items():
        params[i], velocity[i] = {}, {}
        for name, w in group.items():
            g = grads.get(i, {}).get(name)
            if g is None:
                g = np.zeros_like(w)
            if name not in ("gamma", "beta"):
                g = g + plan.weight_decay * w
            v = plan.momentum * model.velocity[i][name] + g
            velocity[i][name] = v.astype(model.dtype, copy=False)
            params[i][name] = (w - lr * v).astype(model.dtype, copy=False)
    return ModelState(params, dict(model.buffers), velocity, model.dtype)


def _commit_bn_stats(model, batch_stats):
    if not batch_stats:
        return model
    buffers = dict(model.buffers)
    for i, (mu, var) in batch_stats.items():
        old = buffers[i]
        buffers[i] = {
            "mean": (BN_RUNNING_KEEP * old["mean"] + (1 - BN_RUNNING_KEEP) * mu).astype(model.dtype),
            "var": (BN_RUNNING_KEEP * old["var"] + (1 - BN_RUNNING_KEEP) * var).astype(model.dtype),
        }
    return ModelState(model.params, buffers, model.velocity, model.dtype)


def _pad_crop_batch(x, pad, rng):
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    for s in range(n):
        oy, ox = offs[s]
        out[s] = padded[s, :, oy : oy + h, ox : ox + w]
    return out


def accuracy(model, genome, x, labels, batch_size=256):
    """Fraction of correct argmax predictions, evaluated in eval mode."""
    hits = 0
    for s in range(0, len(x), batch_size):
        logits = forward(model, genome, x[s : s + batch_size], mode="eval")
        hits += int((logits.argmax(axis=1) == labels[s : s + batch_size]).sum())
    return hits / len(x)


def train(genome, split, plan, curve_path=None, dtype=np.float32):
    """SGD over shuffled minibatch epochs; returns (model, val accuracy).

    Raises DivergedTraining as soon as the minibatch loss goes non-finite.
    """
    root = np.random.SeedSequence(plan.seed)
    init_seed, shuffle_seed, dropout_seed, aug_seed = root.spawn(4)
    model = init_model(genome, np.random.default_rng(init_seed), dtype)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)
    aug_rng = np.random.default_rng(aug_seed)

    n = len(split.train_x)
    bs = min(plan.batch_size, n)
    perm = shuffle_rng.permutation(n)
    cursor = 0
    curve = [] if curve_path else None

    for t in range(plan.max_iters):
        if cursor + bs > n:
            perm = shuffle_rng.permutation(n)
            cursor = 0
        idx = perm[cursor : cursor + bs]
        cursor += bs
        bx = split.train_x[idx]
        by = split.train_y[idx]
        if getattr(split, "augment", "none") == "pad_crop4":
            bx = _pad_crop_batch(bx, 4, aug_rng)
        lr = lr_at(t, plan)
        # overflow on the way to a non-finite loss is the divergence path,
        # detected and raised below, so the fp warnings are suppressed
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads, stats = _loss_grads_stats(model, genome, bx, by, "train", dropout_rng)
            if not np.isfinite(loss):
                raise DivergedTraining(f"non-finite loss at iteration {t}")
            model = sgd_step(model, grads, lr, plan)
        model = _commit_bn_stats(model, stats)
        if curve is not None:
            curve.append(f"{t},{lr:.10g},{float(loss):.6f}")

    if curve_path:
        with open(curve_path, "w") as fh:
            fh.write("iteration,lr,loss\n")
            fh.write("\n".join(curve) + ("\n" if curve else ""))
    with np.errstate(over="ignore", invalid="ignore"):
        return model, accuracy(model, genome, split.val_x, split.val_y)


# ---------------------------------------------------------------------------
# model state checkpointing: raw little-endian float32 plus a JSON manifest


def save_model(model, path_prefix):
    """Write <prefix>.bin (concatenated float32 LE) and <prefix>.json."""
    entries = []
    blobs = []
    offset = 0
    for group_name in ("params", "buffers", "velocity"):
        group = getattr(model, group_name)
        for i in sorted(group):
            for name in sorted(group[i]):
                arr = np.ascontiguousarray(group[i][name], dtype="<f4")
                entries.append(
                    {
                        "group": group_name,
                        "node": i,
                        "name": name,
                        "shape": list(arr.shape),
                        "offset": offset,
                    }
                )
                blobs.append(arr.tobytes())
                offset += arr.size
    with open(f"{path_prefix}.bin", "wb") as fh:
        fh.write(b"".join(blobs))
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump({"dtype": "<f4", "total": offset, "entries": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path_prefix):
    """Rebuild a float32 ModelState from save_model output."""
    with open(f"{path_prefix}.json") as fh:
        manifest = json.load(fh)
    raw = np.fromfile(f"{path_prefix}.bin", dtype="<f4")
    state = {"params": {}, "buffers": {}, "velocity": {}}
    for entry in manifest["entries"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = raw[entry["offset"] : entry["offset"] + size].reshape(entry["shape"]).astype(np.float32)
        state[entry["group"]].setdefault(entry["node"], {})[entry["name"]] = arr
    return ModelState(state["params"], state["buffers"], state["velocity"], np.float32)


# ---------------------------------------------------------------------------
# finite-difference verification


def relative_error(a, f, atol=1e-8):
    """|a - f| scaled by magnitude; differences below atol count as zero.

    atol absorbs float64 rounding noise in finite-difference numerators
    (measured around 1e-10 for these loss scales).
    """
    d = abs(a - f)
    if d <= atol:
        return 0.0
    return d / max(abs(a), abs(f), atol)


def gradient_check(model, genome, x, labels, step=1e-4, mode="train", dropout_seed=0, max_per_tensor=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    Checks every element of each parameter tensor unless max_per_tensor
    caps it, in which case a seeded sample of positions is used.
    """
    _, grads = loss_and_grads(model, genome, x, labels, mode, dropout_seed)

    def loss_at():
        l, _ = loss_and_grads(model, genome, x, labels, mode, dropout_seed)
        return l

    worst = 0.0
    for i in sorted(model.params):
        for name in sorted(model.params[i]):
            w = model.params[i][name]
            flat = w.reshape(-1)
            positions = range(flat.size)
            if max_per_tensor is not None and flat.size > max_per_tensor:
                sampler = rng if rng is not None else np.random.default_rng(0)
                positions = sorted(sampler.choice(flat.size, size=max_per_tensor, replace=False))
            for pos in positions:
                orig = flat[pos]
                flat[pos] = orig + step
                lp = loss_at()
                flat[pos] = orig - step
                lm = loss_at()
                flat[pos] = orig + step / 2
                lp_half = loss_at()
                flat[pos] = orig - step / 2
                lm_half = loss_at()
                flat[pos] = orig
                fd = (lp - lm) / (2 * step)
                fd_half = (lp_half - lm_half) / step
                # two central differences agree only on a locally smooth
                # stretch; disagreement means the step straddles a ReLU
                # kink or pooling tie, where fd does not estimate the
                # derivative at all (a wrong analytic gradient cannot
                # cause it, so skipping never hides a bug)
                if abs(fd - fd_half) > 1e-6 * max(1.0, abs(fd), abs(fd_half)):
                    continue
                worst = max(worst, relative_error(grads[i][name].reshape(-1)[pos], fd_half))
    return worst


def smoothness_margin(model, genome, x, mode="train", dropout_seed=0):
    """Distance of the batch from the nearest ReLU kink or pooling tie."""
    rng = np.random.default_rng(dropout_seed)
    _, caches, _ = _forward_pass(model, genome, x, mode, rng)
    margin = np.inf
    for i, cache in caches.items():
        kind = genome.nodes[i].kind
        if kind == CONV:
            _, xhat, invstd, out = cache
            p = model.params[i]
            pre = p["gamma"][:, None, None] * xhat + p["beta"][:, None, None]
            margin = min(margin, float(np.abs(pre).min()))
        elif kind == MAXPOOL:
            x_in, am = cache
            node = genome.nodes[i]
            k = node.params["kernel"]
            win = sliding_window_view(x_in, (k, k), axis=(2, 3))[:, :, :: node.params["stride"], :: node.params["stride"]]
            flat = win.reshape(win.shape[:4] + (k * k,))
            top2 = np.partition(flat, -2, axis=-1)[..., -2:]
            # windows whose max is 0 are all ReLU-dead inputs; their tie is
            # stable under small perturbations and not a kink
            gaps = (top2[..., 1] - top2[..., 0])[top2[..., 1] > 0]
            if gaps.size:
                margin = min(margin, float(gaps.min()))
    return margin


def _chain_genome(middle, input_shape, num_classes):
    """input -> middle nodes in order -> head."""
    from evoarch.genome import Genome, Node

    nodes = {0: Node(INPUT, {})}
    preds = {0: ()}
    for i, node in enumerate(middle, start=1):
        nodes[i] = node
        preds[i] = (i - 1,)
    h = len(middle) + 1
    nodes[h] = Node(HEAD, {"classes": num_classes})
    preds[h] = (h - 1,)
    return Genome(input_shape, num_classes, nodes, preds)


def _join_genome(kind, channels_b, input_shape, num_classes):
    """Two conv branches merged by a skip or concat node."""
    from evoarch.genome import Genome, Node

    nodes = {
        0: Node(INPUT, {}),
        1: conv_node(3, 3, 1, 1),
        2: conv_node(channels_b, 3, 1, 1),
        3: Node(kind, {}),
        4: Node(GLOBALPOOL, {}),
        5: Node(HEAD, {"classes": num_classes}),
    }
    preds = {0: (), 1: (0,), 2: (1,), 3: (1, 2), 4: (3,), 5: (4,)}
    return Genome(input_shape, num_classes, nodes, preds)


def _single_kind_cases(num_classes=4):
    from evoarch.genome import Node, new_seed_genome

    shape = (2, 6, 6)
    gp = Node(GLOBALPOOL, {})
    return [
        ("globalpool_head", new_seed_genome("global_pool", shape, num_classes)),
        ("fc_head", new_seed_genome("fully_connected", shape, num_classes)),
        ("conv", _chain_genome([conv_node(4, 3, 1, 1), gp], shape, num_classes)),
        ("conv_stride2_filter5", _chain_genome([conv_node(3, 5, 2, 2), gp], shape, num_classes)),
        ("conv_1x1", _chain_genome([conv_node(5, 1, 1, 0), gp], shape, num_classes)),
        ("maxpool", _chain_genome([conv_node(3, 3, 1, 1), maxpool_node(2, 2), gp], shape, num_classes)),
        ("fc_stack", _chain_genome([fc_node(9), fc_node(7)], shape, num_classes)),
        ("dropout", _chain_genome([fc_node(8), dropout_node(0.5)], shape, num_classes)),
        ("skip", _join_genome(SKIP, 3, shape, num_classes)),
        ("concat", _join_genome(CONCAT, 4, shape, num_classes)),
    ]


def _composite_cases(count, seed, max_mutations=6):
    # imported here so the trainer stays usable without the search stack
    from evoarch.genome import new_seed_genome
    from evoarch.mutation import ExhaustedRetries, MutationWeights, mutate_until_valid

    shape = (3, 8, 8)
    cases = []
    weights = MutationWeights.early()
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        kind = "global_pool" if i % 2 == 0 else "fully_connected"
        genome = new_seed_genome(kind, shape, 4)
        steps = int(rng.integers(1, max_mutations + 1))
        for _ in range(steps):
            try:
                genome = mutate_until_valid(genome, weights, rng)
            except ExhaustedRetries:
                break
        cases.append((f"composite_{i:02d}", genome))
    return cases


def gradient_check_suite(seed=0, composites=20, step=1e-4, max_per_tensor=32, batch=3):
    """Finite-difference audit over single-kind genomes and random composites.

    Returns a list of (name, max_relative_error) pairs, float64 end to
    end.  Input batches sitting too close to a ReLU kink or a pooling tie
    are redrawn, since central differences are meaningless across them.
    """
    results = []
    cases = _single_kind_cases() + _composite_cases(composites, seed)
    for pos, (name, genome) in enumerate(cases):
        streams = np.random.SeedSequence((seed, pos, 7)).spawn(3)
        model = init_model(genome, np.random.default_rng(streams[0]), dtype=np.float64)
        data_rng = np.random.default_rng(streams[1])
        labels = data_rng.integers(0, genome.num_classes, size=batch)
        x = best_margin = None
        for _ in range(40):
            cand = data_rng.normal(size=(batch,) + genome.input_shape)
            margin = smoothness_margin(model, genome, cand)
            if best_margin is None or margin > best_margin:
                x, best_margin = cand, margin
            if margin > 10 * step:
                break
        err = gradient_check(
            model,
            genome,
            x,
            labels,
            step=step,
            max_per_tensor=max_per_tensor,
            rng=np.random.default_rng(streams[2]),
        )
        results.append((name, err))
    return results
