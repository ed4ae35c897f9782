"""Per-layer reconstruction in embedding space, plus the layer-by-layer baseline.

For each pruned layer l the optimizer matches the frozen original
("teacher") embedding of the layer's output against the same quantity
recomputed from the pruned prefix ("student"):

    min over (Q', R')  of  mean_positions || T - Q'^T (m * relu(R'^T E')) ||^2

where E' is the student's input embedding, m the binary keep mask, R' the
layer's pointwise factor, and Q' the next layer's embedding factor
(applied to k x k patches, after any intervening pooling).  Surviving
neurons thus absorb the information the masked ones carried.  The final
classifier factor is trained against labels instead.

The baseline pruner implements the conventional alternative: pick
surviving channels, then least-squares refit each consumer layer to the
original pre-activation responses, letting errors accumulate with depth.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import linalg
from .errors import DivergenceError, InvalidArgumentError
from .netcore import (
    LayerSpec,
    Network,
    forward,
    im2col,
    col2im,
    layer_forward,
    maxpool,
    maxpool_backward,
)
from .decompose import decomposed_pairs
from .pruner import OptimSettings, PruneConfig, build_mask, score_neurons, validate_config
from .training import softmax_cross_entropy

VAR_NAMES = ("r", "r_bias", "q", "q_bias")


@dataclass
class ReconProblem:
    """One layer's reconstruction instance: data, mask, and the four variables.

    ``e_in`` holds the student input embedding maps (samples, z_l, h, w);
    ``target`` the teacher embedding of the layer output, flattened to
    (positions, z_next).  ``q`` is kept in matrix form (patch_dim, z_next);
    for a dense successor the patch dimension is the flattened map size.
    """

    layer: str
    e_in: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    r: np.ndarray
    r_bias: np.ndarray
    q: np.ndarray
    q_bias: np.ndarray
    relu: bool = True
    pools: tuple = ()            # ((k, stride), ...) applied before the next embed
    next_kind: str = "conv"      # conv | dense
    next_conv: tuple = (1, 0, 1)  # (k, pad, stride) of the next embedding factor

    @property
    def n_samples(self) -> int:
        return self.e_in.shape[0]

    def variables(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in VAR_NAMES}


def _check_batch(p: ReconProblem, batch):
    if batch is None:
        return np.arange(p.n_samples)
    idx = np.asarray(batch, dtype=np.intp)
    if idx.size == 0:
        raise InvalidArgumentError("reconstruction batch is empty")
    if idx.min() < 0 or idx.max() >= p.n_samples:
        raise InvalidArgumentError(
            f"batch indices out of range for {p.n_samples} samples"
        )
    return idx


def _recon_forward(p: ReconProblem, idx):
    """Shared forward pass; returns intermediates needed by the backward pass."""
    e = p.e_in[idx]
    b, z, h, w = e.shape
    e_mat = e.transpose(0, 2, 3, 1).reshape(-1, z)
    pre = e_mat @ p.r + p.r_bias
    act = np.maximum(pre, 0.0) if p.relu else pre
    act = act * p.mask
    n = p.r.shape[1]
    maps = act.reshape(b, h, w, n).transpose(0, 3, 1, 2)
    pool_cache = []
    for pk, ps in p.pools:
        shape = maps.shape
        maps, pidx = maxpool(maps, pk, ps)
        pool_cache.append((shape, pidx, pk, ps))
    if p.next_kind == "conv":
        ck, cp, cs = p.next_conv
        cols = im2col(maps, ck, cp, cs)
    else:
        cols = maps.reshape(b, -1)
    pred = cols @ p.q + p.q_bias
    target = p.target.reshape(p.n_samples, -1, p.q.shape[1])[idx].reshape(-1, p.q.shape[1])
    return {
        "e_mat": e_mat, "pre": pre, "maps_shape": (b, n, h, w),
        "pool_cache": pool_cache, "pooled_shape": maps.shape,
        "cols": cols, "pred": pred, "target": target, "b": b,
    }


def recon_loss(p: ReconProblem, batch=None) -> float:
    """Squared reconstruction error, summed over embedding dims, mean over positions."""
    idx = _check_batch(p, batch)
    f = _recon_forward(p, idx)
    diff = f["pred"] - f["target"]
    return float((diff ** 2).sum() / diff.shape[0])


def recon_grad(p: ReconProblem, batch=None) -> dict[str, np.ndarray]:
    """Analytic gradients of :func:`recon_loss` w.r.t. r, r_bias, q, q_bias.

    The ReLU subgradient at exactly 0 is taken as 0, and masked channels
    receive zero gradient because the mask cuts their forward path.
    """
    idx = _check_batch(p, batch)
    f = _recon_forward(p, idx)
    positions = f["pred"].shape[0]
    dpred = 2.0 * (f["pred"] - f["target"]) / positions
    dq = f["cols"].T @ dpred
    dq_bias = dpred.sum(axis=0)
    dcols = dpred @ p.q.T
    b, n, h, w = f["maps_shape"]
    if p.next_kind == "conv":
        ck, cp, cs = p.next_conv
        dmaps = col2im(dcols, f["pooled_shape"], ck, cp, cs)
    else:
        dmaps = dcols.reshape(f["pooled_shape"])
    for shape, pidx, pk, ps in reversed(f["pool_cache"]):
        dmaps = maxpool_backward(dmaps, pidx, shape, pk, ps)
    dact = dmaps.transpose(0, 2, 3, 1).reshape(-1, n) * p.mask
    dpre = dact * (f["pre"] > 0) if p.relu else dact
    dr = f["e_mat"].T @ dpre
    dr_bias = dpre.sum(axis=0)
    return {"r": dr, "r_bias": dr_bias, "q": dq, "q_bias": dq_bias}


def _descend(loss_fn, grad_fn, variables, optim: OptimSettings, n_samples: int,
             seed, layer: str):
    """Minibatch gradient descent with momentum, keep-best, and divergence abort.

    Mutates ``variables`` in place, leaving the best-evaluated iterate.
    Returns (init_loss, best_loss).  Divergence = full loss above 10x the
    initial on three consecutive evaluations.
    """
    rng = np.random.default_rng(seed)
    init_loss = loss_fn(None)
    best_loss = init_loss
    best = {k: v.copy() for k, v in variables.items()}
    velocity = {k: np.zeros_like(v) for k, v in variables.items()}
    eval_every = max(1, optim.iters // 20)
    batch = min(optim.batch, n_samples)
    order = rng.permutation(n_samples)
    cursor = 0
    bad_streak = 0
    for t in range(optim.iters):
        if cursor + batch > n_samples:
            order = rng.permutation(n_samples)
            cursor = 0
        idx = order[cursor:cursor + batch]
        cursor += batch
        grads = grad_fn(idx)
        gnorm = np.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
        if gnorm > optim.max_grad_norm:
            scale = optim.max_grad_norm / gnorm
            grads = {k: g * scale for k, g in grads.items()}
        lr = optim.lr * max(0.05, 1.0 - t / optim.iters)
        for name, v in variables.items():
            velocity[name] = optim.momentum * velocity[name] - lr * grads[name]
            v += velocity[name]
        if (t + 1) % eval_every == 0 or t + 1 == optim.iters:
            cur = loss_fn(None)
            if np.isfinite(cur) and cur < best_loss:
                best_loss = cur
                best = {k: v.copy() for k, v in variables.items()}
            if not np.isfinite(cur) or cur > 10.0 * init_loss + 1e-9:
                bad_streak += 1
                if bad_streak >= 3:
                    raise DivergenceError(layer)
            else:
                bad_streak = 0
    for name, v in variables.items():
        v[...] = best[name]
    return init_loss, best_loss


def optimize_layer(p: ReconProblem, optim: OptimSettings, seed=0) -> dict:
    """Minimize the reconstruction loss over (R', Q') and their biases."""
    init_loss, final_loss = _descend(
        lambda idx: recon_loss(p, idx),
        lambda idx: recon_grad(p, idx),
        p.variables(), optim, p.n_samples, seed, p.layer,
    )
    return {
        "layer": p.layer,
        "k": int(p.mask.sum()),
        "z": int(p.r.shape[0]),
        "init_loss": init_loss,
        "final_loss": final_loss,
        "iters": optim.iters,
    }


def train_final_layer(r, r_bias, embeddings, labels, optim: OptimSettings,
                      seed=0, layer="classifier"):
    """Train the last pointwise factor on labels with softmax cross-entropy.

    Returns (r, r_bias, report); inputs are the student's final embedding
    vectors, one row per sample.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if emb.ndim != 2 or emb.shape[0] != labels.shape[0]:
        raise InvalidArgumentError(
            f"embeddings {emb.shape} and labels {labels.shape} do not line up"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= r.shape[1]):
        raise InvalidArgumentError("labels out of range for classifier width")
    variables = {"r": np.array(r, dtype=np.float64),
                 "r_bias": np.array(r_bias, dtype=np.float64)}

    def loss_fn(idx):
        sel = slice(None) if idx is None else idx
        logits = emb[sel] @ variables["r"] + variables["r_bias"]
        return softmax_cross_entropy(logits, labels[sel])[0]

    def grad_fn(idx):
        logits = emb[idx] @ variables["r"] + variables["r_bias"]
        _, dlogits = softmax_cross_entropy(logits, labels[idx])
        return {"r": emb[idx].T @ dlogits, "r_bias": dlogits.sum(axis=0)}

    init_loss, final_loss = _descend(
        loss_fn, grad_fn, variables, optim, emb.shape[0], seed, layer)
    report = {
        "layer": layer,
        "k": int(r.shape[1]),
        "z": int(r.shape[0]),
        "init_loss": init_loss,
        "final_loss": final_loss,
        "iters": optim.iters,
    }
    return variables["r"], variables["r_bias"], report


class _NetRanks:
    """Rank lookup built from a decomposed network's factor widths."""

    def __init__(self, net: Network):
        self.ranks = {}
        for ei, pi in decomposed_pairs(net):
            point = net.layers[pi]
            base = net.layers[ei].name.rsplit(".", 1)[0]
            self.ranks[base] = (point.in_channels, point.out_channels)

    def entry(self, name: str) -> dict:
        if name not in self.ranks:
            raise InvalidArgumentError(f"no decomposed layer named {name!r}")
        z, n = self.ranks[name]
        return {"name": name, "z": z, "n": n}


def _capture(net: Network, x: np.ndarray, indices, batch_size=256):
    """Forward in chunks, concatenating the requested activations."""
    parts: dict[int, list] = {i: [] for i in indices}
    for start in range(0, x.shape[0], batch_size):
        _, trace = forward(net, x[start:start + batch_size], capture=indices)
        for i in indices:
            parts[i].append(trace[i])
    return {i: np.concatenate(chunks, axis=0) for i, chunks in parts.items()}


def _as_maps(act: np.ndarray) -> np.ndarray:
    """Normalize an activation to 4-D (n, c, h, w); dense outputs become 1x1 maps."""
    return act if act.ndim == 4 else act[:, :, None, None]


def _flatten_positions(act: np.ndarray) -> np.ndarray:
    """(n, c, h, w) or (n, c) -> (positions, c) with samples-major ordering."""
    if act.ndim == 4:
        return act.transpose(0, 2, 3, 1).reshape(-1, act.shape[1])
    return act


def ldrf_prune_network(
    dec_net: Network,
    cfg: PruneConfig,
    x: np.ndarray,
    y: np.ndarray,
    report=None,
    batch_size: int = 256,
) -> tuple[Network, list[dict]]:
    """Prune every configured layer of a decomposed network, layer by layer.

    The frozen input network provides reconstruction targets; the evolving
    copy provides inputs, so each layer compensates for the pruning of all
    layers before it.  Returns the pruned (still two-factor) network with
    recorded masks, plus one loss-report entry per optimized layer.
    """
    if dec_net.form != "decomposed":
        raise InvalidArgumentError(f"expected a decomposed network, got {dec_net.form!r}")
    ranks = report if report is not None else _NetRanks(dec_net)
    violations = validate_config(cfg, ranks)
    if violations:
        raise InvalidArgumentError("; ".join(v["message"] for v in violations))
    pairs = decomposed_pairs(dec_net)
    if len(pairs) < 2:
        raise InvalidArgumentError("network has no hidden layers to prune")
    teacher = dec_net
    student = dec_net.copy()
    base_names = [teacher.layers[ei].name.rsplit(".", 1)[0] for ei, pi in pairs]
    for entry in cfg.layers:
        if entry["name"] not in base_names[:-1]:
            raise InvalidArgumentError(
                f"layer {entry['name']!r} is not a prunable hidden layer "
                f"(prunable: {base_names[:-1]})"
            )

    capture_idx = sorted({i for ei, pi in pairs for i in (ei, pi)})
    teacher_trace = _capture(teacher, x, capture_idx, batch_size)
    reports: list[dict] = []
    try:
        for li in range(len(pairs) - 1):
            ei, pi = pairs[li]
            next_ei = pairs[li + 1][0]
            base = base_names[li]
            point = student.layers[pi]
            next_embed = student.layers[next_ei]
            n_l = point.out_channels
            keep = cfg.keep_for(base)
            if keep is None:
                keep = n_l
            merged = (
                student.layers[ei].weight_matrix().astype(np.float64)
                @ point.weight_matrix().astype(np.float64)
            )
            scores = score_neurons(
                cfg.criterion,
                weight_matrix=merged,
                activations=teacher_trace[pi],
                n=n_l,
                seed=[cfg.seed, li],
            )
            mask = build_mask(scores, keep)
            student.masks[base] = mask

            student_in = _capture(student, x, [ei], batch_size)[ei]
            pools = tuple(
                (student.layers[j].k, student.layers[j].stride)
                for j in range(pi + 1, next_ei)
                if student.layers[j].kind == "maxpool"
            )
            if next_embed.kind == "embed_conv":
                next_kind = "conv"
                next_conv = (next_embed.k, next_embed.pad, next_embed.stride)
            else:
                next_kind = "dense"
                next_conv = (1, 0, 1)
            problem = ReconProblem(
                layer=base,
                e_in=_as_maps(student_in),
                target=_flatten_positions(teacher_trace[next_ei]),
                mask=mask.astype(np.float64),
                r=point.weight_matrix().astype(np.float64),
                r_bias=point.bias.astype(np.float64),
                q=next_embed.weight_matrix().astype(np.float64),
                q_bias=next_embed.bias.astype(np.float64),
                relu=point.relu,
                pools=pools,
                next_kind=next_kind,
                next_conv=next_conv,
            )
            reports.append(optimize_layer(problem, cfg.optim, seed=[cfg.seed, 7, li]))
            dead = problem.mask == 0
            problem.r[:, dead] = 0.0
            problem.r_bias[dead] = 0.0
            point.weight = problem.r.reshape(point.weight.shape).astype(np.float32)
            point.bias = problem.r_bias.astype(np.float32)
            next_embed.weight = problem.q.reshape(next_embed.weight.shape).astype(np.float32)
            next_embed.bias = problem.q_bias.astype(np.float32)

        # final classifier factor: trained against labels
        last_ei, last_pi = pairs[-1]
        classifier = student.layers[last_pi]
        emb = _capture(student, x, [last_ei], batch_size)[last_ei]
        r, r_bias, rep = train_final_layer(
            classifier.weight_matrix().astype(np.float64),
            classifier.bias.astype(np.float64),
            _flatten_positions(emb), y, cfg.optim,
            seed=[cfg.seed, 7, len(pairs) - 1],
            layer=base_names[-1],
        )
        classifier.weight = r.reshape(classifier.weight.shape).astype(np.float32)
        classifier.bias = r_bias.astype(np.float32)
        reports.append(rep)
    except DivergenceError as exc:
        exc.partial_report = reports
        raise
    return student, reports


def baseline_prune_layer(layer: LayerSpec, survivors: np.ndarray,
                         inputs: np.ndarray, targets: np.ndarray) -> LayerSpec:
    """Least-squares refit of a consumer layer onto surviving input channels.

    ``inputs`` are the consumer's input maps from the pruned prefix (dead
    channels zero); ``targets`` are the consumer's original pre-activation
    responses, flattened to (positions, out_channels).  Dead input slices
    of the returned weight are zero.
    """
    surv = np.asarray(survivors, dtype=bool)
    if surv.sum() == 0:
        raise InvalidArgumentError("survivor set is empty")
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if layer.kind == "conv":
        if surv.shape != (layer.in_channels,):
            raise InvalidArgumentError(
                f"survivor mask length {surv.shape} != in_channels {layer.in_channels}"
            )
        cols = im2col(inputs, layer.k, layer.pad, layer.stride)
        col_mask = np.tile(surv, layer.k * layer.k)  # columns are (ki, kj, channel)
    elif layer.kind == "dense":
        flat = inputs.reshape(inputs.shape[0], -1)
        per_channel = flat.shape[1] // surv.shape[0]
        col_mask = np.repeat(surv, per_channel)      # flatten order is channel-major
        cols = flat
    else:
        raise InvalidArgumentError(f"cannot refit layer kind {layer.kind!r}")
    if targets.shape != (cols.shape[0], layer.out_channels):
        raise InvalidArgumentError(
            f"targets shape {targets.shape} does not match "
            f"({cols.shape[0]}, {layer.out_channels})"
        )
    a = np.concatenate([cols[:, col_mask], np.ones((cols.shape[0], 1))], axis=1)
    solution = linalg.lstsq(a, targets)
    w_full = np.zeros((cols.shape[1], layer.out_channels))
    w_full[col_mask] = solution[:-1]
    out = replace(layer)
    out.weight = (
        w_full.reshape(layer.weight.shape).astype(np.float32)
        if layer.kind == "conv" else w_full.astype(np.float32)
    )
    out.bias = solution[-1].astype(np.float32)
    return out


def baseline_prune_network(
    net: Network,
    cfg: PruneConfig,
    x: np.ndarray,
    batch_size: int = 256,
) -> tuple[Network, list[dict]]:
    """Conventional layer-by-layer pruning of a plain network.

    For each configured layer: select surviving output channels, zero the
    dropped ones, then least-squares refit the next layer to the original
    pre-activation responses using inputs from the pruned prefix.  Errors
    accumulate with depth — this is the comparison point for the
    embedding-space method.
    """
    from .decompose import canonicalize

    if net.form != "plain":
        raise InvalidArgumentError(f"expected a plain network, got {net.form!r}")
    teacher = canonicalize(net)
    student = teacher.copy()
    weighted = [i for i, l in enumerate(teacher.layers) if l.kind in ("conv", "dense")]
    if len(weighted) < 2:
        raise InvalidArgumentError("network has no hidden layers to prune")
    names = [teacher.layers[i].name for i in weighted]
    for entry in cfg.layers:
        if entry["name"] not in names[:-1]:
            raise InvalidArgumentError(
                f"layer {entry['name']!r} is not a prunable hidden layer "
                f"(prunable: {names[:-1]})"
            )
    capture_idx = sorted(set(weighted) | {i - 1 for i in weighted if i > 0})
    teacher_trace = _capture(teacher, x, capture_idx, batch_size)
    reports = []
    for pos in range(len(weighted) - 1):
        li = weighted[pos]
        layer = student.layers[li]
        n_l = layer.out_channels
        keep = cfg.keep_for(layer.name)
        if keep is None:
            keep = n_l
        scores = score_neurons(
            cfg.criterion,
            weight_matrix=teacher.layers[li].weight_matrix().astype(np.float64),
            activations=teacher_trace[li],
            n=n_l,
            seed=[cfg.seed, pos],
        )
        mask = build_mask(scores, keep)
        student.masks[layer.name] = mask
        dead = mask == 0
        if layer.kind == "conv":
            layer.weight[..., dead] = 0.0
        else:
            layer.weight[:, dead] = 0.0
        layer.bias[dead] = 0.0

        ci = weighted[pos + 1]
        consumer = teacher.layers[ci]
        teacher_in = x.astype(np.float64) if ci == 0 else teacher_trace[ci - 1]
        pre_target = layer_forward(replace(consumer, relu=False), _as_maps(teacher_in))
        student_in = _capture(student, x, [ci - 1], batch_size)[ci - 1]
        refit = baseline_prune_layer(
            consumer, mask.astype(bool), _as_maps(student_in),
            _flatten_positions(pre_target),
        )
        student.layers[ci].weight = refit.weight
        student.layers[ci].bias = refit.bias
        fit = _flatten_positions(
            layer_forward(replace(student.layers[ci], relu=False), _as_maps(student_in))
        )
        resid = float(np.sqrt(((fit - _flatten_positions(pre_target)) ** 2).mean()))
        reports.append({"layer": layer.name, "k": int(keep), "residual": resid})
    return student, reports


def fine_tune(net: Network, x, y, epochs: int, lr: float = 0.01,
              seed: int = 0, batch: int = 64):
    """End-to-end label fine-tuning hook (used for before/after comparisons)."""
    from .training import TrainConfig, train

    return train(net, x, y, TrainConfig(lr=lr, epochs=epochs, batch=batch,
                                        seed=seed, weight_decay=0.0))
