"""Full network assembly: embedding, residual blocks, output head, checkpoints.

A block is a residual unit whose body is the module sequence named by the
arrangement string (H -> hop-wise attention module, I -> intragroup
refinement); ``module_mode`` swaps the block bodies for the ablation
configurations. The output head mirrors the hop aggregation pipeline without
attention or fusion, then maps to 3D; in gcn_only mode (first-order only,
no hop machinery anywhere) the head degrades to a first-order graph conv.
"""

from __future__ import annotations

import numpy as np

from . import layers as L
from . import tensor as T
from .config import HopFIRConfig, TrainConfig, parse_config, serialize_config
from .skeleton import SkeletonGraph, hop_matrix
from .tensor import Rng, Tensor

__all__ = ["HopFIRModel", "build_model", "load_checkpoint", "save_checkpoint"]

STREAM_INIT = 0


class _HgHead:
    """Output head: per-hop aggregation, reduction, concat, then a map to 3D."""

    def __init__(self, cfg, num_joints, rng, dtype):
        bound = 1.0 / np.sqrt(cfg.channels)
        self.hop_weights = [L._uniform(rng, (cfg.channels, cfg.channels), bound, dtype)
                            for _ in range(cfg.hops)]
        self.reduce = L.HopReduce(cfg.channels, cfg.hop_dims(), rng, dtype)
        self.aggregate = L.HopAggregate(cfg.channels, cfg.hop_dims(), rng, cfg.activation, dtype)
        self.out = L.Linear(cfg.channels, 3, rng, dtype=dtype)

    def __call__(self, h, affinities):
        s_list = [L.hop_gcn(h, aff, w) for aff, w in zip(affinities, self.hop_weights)]
        return self.out(self.aggregate(h, self.reduce(s_list)))

    def named_params(self, prefix):
        for k, w in enumerate(self.hop_weights, start=1):
            yield f"{prefix}.hop{k}.weight", w
        yield from self.reduce.named_params(prefix + ".reduce")
        yield from self.aggregate.named_params(prefix + ".agg")
        yield from self.out.named_params(prefix + ".out")


class _GcnHead:
    """First-order head used by gcn_only: one graph conv module, then a map to 3D."""

    def __init__(self, cfg, rng, dtype):
        self.conv = L.GraphConvModule(cfg.channels, rng, cfg.activation, dtype)
        self.out = L.Linear(cfg.channels, 3, rng, dtype=dtype)

    def __call__(self, h, affinities):
        return self.out(self.conv(h, affinities))

    def named_params(self, prefix):
        yield from self.conv.named_params(prefix + ".gcn")
        yield from self.out.named_params(prefix + ".out")


def _block_slots(cfg):
    """Module kind per arrangement slot for the configured ablation mode."""
    mode = cfg.module_mode
    slots = []
    for ch in cfg.arrangement:
        if mode == "full":
            slots.append("hgf" if ch == "H" else "ijr")
        elif mode == "gcn_only":
            slots.append("gcn")
        elif mode == "hopgcn_only":
            slots.append("hopgcn")
        elif mode == "hopgcn_ijr":
            slots.append("hopgcn" if ch == "H" else "ijr")
        elif mode == "hopgcn_hgf":
            if ch == "H":
                slots.append("hgf")
        else:
            raise ValueError(f"unknown module_mode {cfg.module_mode!r}")
    return slots


class HopFIRModel:
    """Assembled network; parameters are reachable only via named_parameters."""

    def __init__(self, cfg: HopFIRConfig, graph: SkeletonGraph, dtype=np.float32):
        cfg.validate()
        self.config = cfg
        self.graph = graph
        self.dtype = np.dtype(dtype).type
        self.num_hops = 1 if cfg.module_mode == "gcn_only" else cfg.hops
        # exact-k binary matrices are fixed at build time
        self.hop_matrices = [hop_matrix(graph, k) for k in range(1, self.num_hops + 1)]

        rng = Rng(cfg.seed, STREAM_INIT)
        n = graph.num_joints
        self.learnable_graphs = [
            Tensor(rng.gen.uniform(-0.01, 0.01, size=(n, n)).astype(self.dtype),
                   requires_grad=True, dtype=self.dtype)
            for _ in range(self.num_hops)
        ]
        self.embedding = L.Linear(2, cfg.channels, rng, dtype=self.dtype)

        needs_groups = cfg.module_mode in ("full", "hopgcn_ijr") and "I" in cfg.arrangement
        groups = None
        if needs_groups:
            from .skeleton import limb_groups
            groups = limb_groups(graph)

        self.blocks = []
        for _ in range(cfg.blocks):
            block = []
            for kind in _block_slots(cfg):
                if kind == "hgf":
                    block.append(L.HgfModule(
                        cfg.channels, n, cfg.hops, cfg.hop_dims(), rng, cfg.activation,
                        variant=cfg.ha_variant, with_projection=cfg.with_projection,
                        dropout=cfg.dropout, dtype=self.dtype))
                elif kind == "ijr":
                    block.append(L.IjrModule(cfg.channels, cfg.heads, groups, n, rng,
                                             dropout=cfg.dropout, dtype=self.dtype))
                elif kind == "hopgcn":
                    block.append(L.HopGCNModule(cfg.channels, cfg.hops, rng, cfg.activation,
                                                dtype=self.dtype))
                elif kind == "gcn":
                    block.append(L.GraphConvModule(cfg.channels, rng, cfg.activation,
                                                   dtype=self.dtype))
            self.blocks.append(block)

        if cfg.module_mode == "gcn_only":
            self.head = _GcnHead(cfg, rng, self.dtype)
        else:
            self.head = _HgHead(cfg, n, rng, self.dtype)

    # -- forward ------------------------------------------------------------

    def affinities(self):
        """Per-hop normalized affinities, recomputed on tape (learnable graphs)."""
        return [L.normalized_affinity(m.astype(self.dtype), g)
                for m, g in zip(self.hop_matrices, self.learnable_graphs)]

    def forward(self, x2d, training=False, rng=None, trace=None):
        """Lift (B, N, 2) inputs to root-relative (B, N, 3) coordinates."""
        x = T.as_tensor(x2d, dtype=self.dtype)
        if x.ndim != 3 or x.shape[1] != self.graph.num_joints or x.shape[2] != 2:
            raise T.ShapeError(
                f"expected input (B, {self.graph.num_joints}, 2), got {x.shape}")
        if T.debug_enabled() and not np.all(np.isfinite(x.data)):
            raise T.NonFiniteError("forward input contains NaN/Inf")
        if training and rng is None:
            raise ValueError("training-mode forward needs an Rng for dropout")
        affs = self.affinities()
        h = self.embedding(x)
        for bi, block in enumerate(self.blocks):
            body = h
            for mi, module in enumerate(block):
                body = module(body, affinities=affs, x2d=x, training=training, rng=rng,
                              trace=trace, trace_prefix=f"block{bi}.mod{mi}.")
            h = T.add(h, body)
        return self.head(h, affs)

    __call__ = forward

    # -- parameters -----------------------------------------------------------

    def named_parameters(self):
        """Stable, unique (name, tensor) ordering used by optimizer and checkpoints."""
        out = []
        out.extend(self.embedding.named_params("embedding"))
        for k, g in enumerate(self.learnable_graphs, start=1):
            out.append((f"graph.hop{k}.learnable", g))
        for bi, block in enumerate(self.blocks):
            for mi, module in enumerate(block):
                out.extend(module.named_params(f"block{bi}.mod{mi}"))
        out.extend(self.head.named_params("head"))
        return out

    def parameter_count(self):
        return sum(p.size for _, p in self.named_parameters())

    def set_parameters(self, values):
        """Load parameter values (dict name -> array), casting to the model dtype."""
        params = dict(self.named_parameters())
        missing = set(params) - set(values)
        extra = set(values) - set(params)
        if missing or extra:
            raise ValueError(
                f"parameter names differ from checkpoint: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}")
        for name, tensor in params.items():
            arr = np.asarray(values[name], dtype=self.dtype)
            if arr.shape != tensor.data.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {tensor.data.shape}")
            tensor.data = arr


def build_model(cfg, graph, dtype=np.float32):
    """Build a model with deterministic seed-derived initialization."""
    return HopFIRModel(cfg, graph, dtype=dtype)


# ---------------------------------------------------------------------------
# Checkpoint container: "HFM1", u64 LE config-text length, UTF-8 config text
# (canonical key = value form), then an HFT1 tensor container holding model
# parameters and any extra tensors (optimizer state, counters).

_CKPT_MAGIC = b"HFM1"


def save_checkpoint(path, model, train_cfg=None, extras=None):
    import io

    cfg_text = serialize_config(model.config, train_cfg or TrainConfig(seed=model.config.seed))
    named = dict(model.named_parameters())
    if extras:
        for key, value in extras.items():
            if key in named:
                raise ValueError(f"extra tensor name {key!r} collides with a parameter")
            named[key] = value
    buf = io.BytesIO()
    raw = cfg_text.encode("utf-8")
    buf.write(_CKPT_MAGIC)
    buf.write(len(raw).to_bytes(8, "little"))
    buf.write(raw)
    body = _tensors_bytes(named)
    buf.write(body)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _tensors_bytes(named):
    import io
    import tempfile

    buf = io.BytesIO()
    buf.write(b"HFT1")
    for name, value in named.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(len(raw).to_bytes(8, "little"))
        buf.write(raw)
        buf.write(int(arr.ndim).to_bytes(8, "little"))
        for ext in arr.shape:
            buf.write(int(ext).to_bytes(8, "little"))
        buf.write(arr.tobytes())
    return buf.getvalue()


def read_checkpoint(path):
    """Read a checkpoint; returns (HopFIRConfig, TrainConfig, tensors dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a model checkpoint (bad magic)")
    n = int.from_bytes(blob[4:12], "little")
    cfg_text = blob[12:12 + n].decode("utf-8")
    model_cfg, train_cfg = parse_config(cfg_text)
    tensors = T.load_tensors(blob[12 + n:])
    return model_cfg, train_cfg, tensors


def load_checkpoint(path, graph, dtype=np.float32):
    """Rebuild the model (and training config) stored at ``path``."""
    model_cfg, train_cfg, tensors = read_checkpoint(path)
    model = build_model(model_cfg, graph, dtype=dtype)
    params = {name: tensors[name] for name, _ in model.named_parameters()}
    model.set_parameters(params)
    extras = {k: v for k, v in tensors.items() if k not in params}
    return model, train_cfg, extras
