"""Neural building blocks: graph convolutions, hop-wise attention, fusion, MHSA.

All layers operate on batched joint features of shape (B, N, D) and keep
their parameters as named float tensors so the model can enumerate,
checkpoint, and optimize them uniformly. The op-level functions
(`gcn_layer`, `hop_gcn`, `ha_attention`) carry the mathematical contracts
and are what the oracle tests exercise; the module classes compose them.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "gcn_layer", "hop_gcn", "ha_attention", "normalized_affinity",
    "Linear", "Act", "GraphConvModule", "HopGCNModule", "HopAttention",
    "HopReduce", "HopAggregate", "HgfModule", "Mhsa", "IjrModule",
]


def _uniform(rng, shape, bound, dtype):
    return Tensor(rng.gen.uniform(-bound, bound, size=shape).astype(dtype),
                  requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# Op-level functions


def gcn_layer(h, affinity, weight, act=None):
    """Graph convolution: activation(affinity @ h @ weight).

    ``h`` is (N, D) or (B, N, D); ``affinity`` a normalized (N, N) matrix
    (AffinityMatrix, ndarray, or Tensor); ``weight`` maps D -> D'.
    """
    aff = _as_matrix(affinity, like=h)
    out = T.matmul(T.matmul(aff, T.as_tensor(h)), T.as_tensor(weight, like=h))
    return act(out) if act is not None else out


def hop_gcn(h, hop_matrix, weight):
    """Per-hop aggregation: (hop_matrix @ h) @ weight, no self-loops, no scaling."""
    m = _as_matrix(hop_matrix, like=h)
    return T.matmul(T.matmul(m, T.as_tensor(h)), T.as_tensor(weight, like=h))


def _as_matrix(value, like):
    if isinstance(value, Tensor):
        return value
    values = getattr(value, "values", value)
    return T.as_tensor(np.asarray(values), like=T.as_tensor(like))


def ha_attention(h, s, variant, projections=None, return_attention=False):
    """Hop-wise attention reconstructing per-hop features from all hop groups.

    The variant string names the (query, key, value) sources: H is the node
    feature matrix, S the hop group features. HSS computes
    softmax(H S^T / sqrt(d)) S; SSS and SHH swap sources accordingly.
    ``projections`` is an optional (q, k, v) triple of Linear layers applied
    to the sources first.
    """
    h, s = T.as_tensor(h), T.as_tensor(s)
    src = {"H": h, "S": s}
    try:
        q, k, v = (src[c] for c in variant)
    except KeyError:
        raise ValueError(f"unknown attention variant {variant!r}") from None
    if projections is not None:
        pq, pk, pv = projections
        q, k, v = pq(q), pk(k), pv(v)
    d = q.shape[-1]
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, v)
    if return_attention:
        return out, attn
    return out


def normalized_affinity(hop_matrix, learnable, mode="symmetric"):
    """Differentiable symmetric normalization of a hop matrix plus a learnable graph.

    Mirrors skeleton.normalize_affinity but runs on the tape so gradients
    reach the learnable matrix: sigmoid-squashed learnable values are added
    to the binary hop matrix, self-loops appended, then degree-normalized.
    """
    base = T.as_tensor(np.asarray(hop_matrix), like=learnable)
    eye = T.as_tensor(np.eye(base.shape[0]), like=learnable)
    aug = T.add(T.add(base, eye), T.sigmoid(learnable))
    deg = T.tsum(aug, axis=1, keepdims=True)
    if mode == "symmetric":
        inv_sqrt = T.power(deg, -0.5)
        return T.mul(T.mul(aug, inv_sqrt), T.transpose(inv_sqrt))
    if mode == "row":
        return T.mul(aug, T.power(deg, -1.0))
    raise ValueError(f"unknown normalization mode {mode!r}")


# ---------------------------------------------------------------------------
# Parameterized layers


class Linear:
    """Affine map x @ W.T + b with fan-in scaled uniform init."""

    def __init__(self, in_dim, out_dim, rng, bias=True, dtype=np.float64):
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = _uniform(rng, (out_dim, in_dim), bound, dtype)
        self.bias = _uniform(rng, (out_dim,), bound, dtype) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)

    def named_params(self, prefix):
        yield prefix + ".weight", self.weight
        if self.bias is not None:
            yield prefix + ".bias", self.bias


class Act:
    """Configured activation; prelu carries one learnable slope scalar."""

    def __init__(self, kind, dtype=np.float64):
        self.kind = kind
        self.slope = Tensor(np.asarray(0.25), requires_grad=True, dtype=dtype) if kind == "prelu" else None

    def __call__(self, x):
        return T.activation(x, self.kind, self.slope)

    def named_params(self, prefix):
        if self.slope is not None:
            yield prefix + ".slope", self.slope


class GraphConvModule:
    """First-order graph conv with decoupled self/neighbor transforms.

    out = act(affinity @ h @ W_nbr + h @ W_self); the separate self weight is
    the standard pose-lifting form of a vanilla graph conv layer.
    """

    def __init__(self, dim, rng, act_kind, dtype=np.float64):
        bound = 1.0 / math.sqrt(dim)
        self.w_self = _uniform(rng, (dim, dim), bound, dtype)
        self.w_nbr = _uniform(rng, (dim, dim), bound, dtype)
        self.act = Act(act_kind, dtype)

    def __call__(self, h, affinities, x2d=None, training=False, rng=None, trace=None, trace_prefix=""):
        aff = affinities[0]
        mixed = T.add(T.matmul(T.matmul(aff, h), self.w_nbr), T.matmul(h, self.w_self))
        return self.act(mixed)

    def named_params(self, prefix):
        yield prefix + ".self.weight", self.w_self
        yield prefix + ".nbr.weight", self.w_nbr
        yield from self.act.named_params(prefix + ".act")


class HopGCNModule:
    """Sum of per-hop aggregations, one weight matrix per hop, then activation.

    The identity path comes from the block-level residual, so there is no
    self transform here.
    """

    def __init__(self, dim, hops, rng, act_kind, dtype=np.float64):
        bound = 1.0 / math.sqrt(dim)
        self.hop_weights = [_uniform(rng, (dim, dim), bound, dtype) for _ in range(hops)]
        self.act = Act(act_kind, dtype)

    def __call__(self, h, affinities, x2d=None, training=False, rng=None, trace=None, trace_prefix=""):
        total = None
        for aff, w in zip(affinities, self.hop_weights):
            part = hop_gcn(h, aff, w)
            total = part if total is None else T.add(total, part)
        return self.act(total)

    def named_params(self, prefix):
        for k, w in enumerate(self.hop_weights, start=1):
            yield f"{prefix}.hop{k}.weight", w
        yield from self.act.named_params(prefix + ".act")


class HopAttention:
    """Hop-wise attention over all hops, optionally with learned q/k/v maps."""

    def __init__(self, dim, variant, with_projection, rng, dtype=np.float64):
        if variant not in ("HSS", "SSS", "SHH"):
            raise ValueError(f"unknown attention variant {variant!r}")
        self.variant = variant
        self.projections = None
        if with_projection:
            self.projections = tuple(Linear(dim, dim, rng, dtype=dtype) for _ in range(3))

    def __call__(self, h, s_list, trace=None, trace_prefix=""):
        outs = []
        for k, s in enumerate(s_list, start=1):
            z, attn = ha_attention(h, s, self.variant, self.projections, return_attention=True)
            if trace is not None:
                trace[f"{trace_prefix}hop{k}"] = np.array(attn.data)
            outs.append(z)
        return outs

    def named_params(self, prefix):
        if self.projections is not None:
            for name, proj in zip(("q", "k", "v"), self.projections):
                yield from proj.named_params(f"{prefix}.{name}")


class HopReduce:
    """Per-hop learned reduction to the configured narrower widths."""

    def __init__(self, dim, hop_dims, rng, dtype=np.float64):
        self.maps = [Linear(dim, dk, rng, dtype=dtype) for dk in hop_dims]

    def __call__(self, z_list):
        return [m(z) for m, z in zip(self.maps, z_list)]

    def named_params(self, prefix):
        for k, m in enumerate(self.maps, start=1):
            yield from m.named_params(f"{prefix}.hop{k}")


class HopAggregate:
    """Concat node features with all reduced hop features, map back to D, activate."""

    def __init__(self, dim, hop_dims, rng, act_kind, dtype=np.float64):
        self.fc = Linear(dim + sum(hop_dims), dim, rng, dtype=dtype)
        self.act = Act(act_kind, dtype)

    def __call__(self, h, r_list):
        return self.act(self.fc(T.concat([h] + list(r_list), axis=-1)))

    def named_params(self, prefix):
        yield from self.fc.named_params(prefix + ".fc")
        yield from self.act.named_params(prefix + ".act")


class HgfModule:
    """Hop-wise graph attention module with global/2D fusion.

    Pipeline per sample: per-hop aggregation -> hop-wise attention ->
    per-hop reduction -> concat aggregation -> a global vector squeezed from
    the flattened joint features -> per-joint fusion of [features, global,
    2D input] -> activation -> dropout. ``use_attention=False`` keeps every
    parameter but skips the (parameter-free) attention step.
    """

    def __init__(self, dim, num_joints, hops, hop_dims, rng, act_kind,
                 variant="HSS", with_projection=False, dropout=0.0,
                 use_attention=True, dtype=np.float64):
        bound = 1.0 / math.sqrt(dim)
        self.hop_weights = [_uniform(rng, (dim, dim), bound, dtype) for _ in range(hops)]
        self.attn = HopAttention(dim, variant, with_projection, rng, dtype)
        self.reduce = HopReduce(dim, hop_dims, rng, dtype)
        self.aggregate = HopAggregate(dim, hop_dims, rng, act_kind, dtype)
        self.global_dim = dim // 2
        self.global_fc = Linear(num_joints * dim, self.global_dim, rng, dtype=dtype)
        self.fuse_fc = Linear(dim + self.global_dim + 2, dim, rng, dtype=dtype)
        self.fuse_act = Act(act_kind, dtype)
        self.dropout = dropout
        self.use_attention = use_attention
        self.num_joints = num_joints
        self.dim = dim

    def __call__(self, h, affinities, x2d, training=False, rng=None, trace=None, trace_prefix=""):
        if x2d is None:
            raise ValueError("fusion requires the 2D input")
        s_list = [hop_gcn(h, aff, w) for aff, w in zip(affinities, self.hop_weights)]
        if self.use_attention:
            z_list = self.attn(h, s_list, trace, trace_prefix)
        else:
            z_list = s_list
        features = self.aggregate(h, self.reduce(z_list))

        batch = features.shape[0]
        flat = T.reshape(features, (batch, self.num_joints * self.dim))
        global_vec = T.reshape(self.global_fc(flat), (batch, 1, self.global_dim))
        global_tiled = T.expand(global_vec, 1, self.num_joints)

        fused = self.fuse_act(self.fuse_fc(T.concat([features, global_tiled, x2d], axis=-1)))
        return T.dropout(fused, self.dropout, training, rng)

    def named_params(self, prefix):
        for k, w in enumerate(self.hop_weights, start=1):
            yield f"{prefix}.hop{k}.weight", w
        yield from self.attn.named_params(prefix + ".attn")
        yield from self.reduce.named_params(prefix + ".reduce")
        yield from self.aggregate.named_params(prefix + ".agg")
        yield from self.global_fc.named_params(prefix + ".global")
        yield from self.fuse_fc.named_params(prefix + ".fuse")
        yield from self.fuse_act.named_params(prefix + ".fuse_act")


class Mhsa:
    """Multi-head self-attention with per-head dimension D / heads."""

    def __init__(self, dim, heads, rng, dtype=np.float64):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.out = Linear(dim, dim, rng, dtype=dtype)

    def __call__(self, h):
        h = T.as_tensor(h)
        squeeze = h.ndim == 2
        if squeeze:
            h = T.reshape(h, (1,) + h.shape)
        b, n, _ = h.shape

        def split_heads(x):
            return T.transpose(T.reshape(x, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

        q, k, v = split_heads(self.q(h)), split_heads(self.k(h)), split_heads(self.v(h))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, self.dim))
        out = self.out(merged)
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def named_params(self, prefix):
        for name, layer in (("q", self.q), ("k", self.k), ("v", self.v), ("out", self.out)):
            yield from layer.named_params(f"{prefix}.{name}")


class IjrModule:
    """Joint refinement: global self-attention, then per-limb-group self-attention.

    The second stage runs independently inside each group with one shared
    parameter set, so joints never attend across group boundaries there.
    """

    def __init__(self, dim, heads, groups, num_joints, rng, dropout=0.0, dtype=np.float64):
        order = []
        for members in groups.values():
            order.extend(members)
        if sorted(order) != list(range(num_joints)):
            raise ValueError("limb groups must partition the joints exactly")
        self.group_indices = [np.asarray(members, dtype=np.intp) for members in groups.values()]
        self.inverse_order = np.argsort(np.asarray(order, dtype=np.intp))
        self.global_attn = Mhsa(dim, heads, rng, dtype)
        self.group_attn = Mhsa(dim, heads, rng, dtype)
        self.dropout = dropout

    def __call__(self, h, affinities=None, x2d=None, training=False, rng=None, trace=None, trace_prefix=""):
        refined = self.global_attn(h)
        parts = [self.group_attn(T.index_select(refined, 1, idx)) for idx in self.group_indices]
        merged = T.index_select(T.concat(parts, axis=1), 1, self.inverse_order)
        return T.dropout(merged, self.dropout, training, rng)

    def named_params(self, prefix):
        yield from self.global_attn.named_params(prefix + ".global")
        yield from self.group_attn.named_params(prefix + ".group")
