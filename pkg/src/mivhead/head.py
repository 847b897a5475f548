"""The classification head: attention pooling, cross-attention prototypes,
multi-block logits.

Three stages, each with its ablation switch:

1. Patch maps from each configured backbone block are max-pooled into a list
   of candidate grids; patches compete (softmax attention against a learned,
   zero-initialized channel query) to represent each candidate, and the
   candidates compete to represent the image. Zero init makes the whole stage
   start as average pooling. ``use_pooling_attention=False`` replaces the
   stage with plain GAP over the raw grid.
2. For every class, the support bag and the query feed a Siamese
   cross-attention pooling layer: bag instances compete, referenced against
   the query, to form a query-conditioned prototype. Attention scores come
   from an L1-distance z-score (or scaled dot-product), values are gated by a
   sigmoid co-excitation shared between the twins, and the key projection is
   added back into the value ("in-attention skip"). ``use_cap=False`` falls
   back to bag averaging.
3. Per block, logits are a centered cosine similarity between prototype and
   transformed query, divided by a temperature; block logits fuse with
   logsumexp.

All bag reductions and the class-centering mean run in canonical value order,
so prototypes are bitwise invariant under bag-row permutation and logits are
bitwise equivariant under class permutation.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .fmpack import BlockFeatures, ImageRecord


class ConfigError(ValueError):
    """Head configuration inconsistent with the pack or with itself."""


@dataclass(frozen=True)
class BlockHead:
    """Candidate list for one backbone block."""
    block_id: int
    shapes: tuple[tuple[int, int], ...] = ()
    use_cls: bool = False
    heads: int | None = None  # default rule: channels // 64


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.3
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_scale_component1: float = 0.05
    iterations: int = 40
    batch_cap: int = 256


@dataclass(frozen=True)
class HeadConfig:
    backbone_family: str  # cnn | vit
    blocks: tuple[BlockHead, ...]
    tau: float | None = None  # None: 500 for cnn, 200 for vit
    eta: float = 0.1
    temperature: float = 0.1
    cas_kind: str = "dba"  # dba | sdpa
    skip_mode: str = "in_attention"  # in_attention | none
    coexcitation: bool = True
    cross_attention: bool = True
    use_cap: bool = True
    use_pooling_attention: bool = True
    aug_threshold: int = 15
    self_in_bag: str = "include"  # include | exclude_if_bag_gt1
    init_seed: int = 0
    train: TrainConfig = TrainConfig()

    @property
    def resolved_tau(self) -> float:
        if self.tau is not None:
            return self.tau
        return 500.0 if self.backbone_family == "cnn" else 200.0


def config_from_dict(raw: dict) -> HeadConfig:
    raw = dict(raw)
    blocks = tuple(
        BlockHead(block_id=b["block_id"],
                  shapes=tuple(tuple(s) for s in b.get("shapes", [])),
                  use_cls=b.get("use_cls", False),
                  heads=b.get("heads"))
        for b in raw.pop("blocks"))
    train = TrainConfig(**raw.pop("train", {}))
    return HeadConfig(blocks=blocks, train=train, **raw)


def config_hash(cfg: HeadConfig) -> str:
    text = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def head_count(channels: int, spec: BlockHead) -> int:
    if spec.heads is not None:
        if channels % spec.heads:
            raise ConfigError(
                f"block {spec.block_id}: {channels} channels not divisible "
                f"into {spec.heads} heads")
        return spec.heads
    if channels % 64:
        raise ConfigError(
            f"block {spec.block_id}: {channels} channels not divisible by 64; "
            f"give an explicit head count")
    return channels // 64


def dba_constants(d: int) -> tuple[float, float]:
    """Mean and standard deviation of the bag-instance L1 distance under a
    standard-normal key model; used to z-score the attention logits."""
    return math.sqrt(4.0 / math.pi) * d, math.sqrt((2.0 - 4.0 / math.pi) * d)


def validate_config(cfg: HeadConfig, block_shapes: dict[int, tuple[int, int, int]],
                    family: str) -> None:
    if cfg.backbone_family not in ("cnn", "vit"):
        raise ConfigError(f"unknown backbone_family {cfg.backbone_family!r}")
    if cfg.backbone_family != family:
        raise ConfigError(
            f"config family {cfg.backbone_family!r} != pack family {family!r}")
    if cfg.cas_kind not in ("dba", "sdpa"):
        raise ConfigError(f"unknown cas_kind {cfg.cas_kind!r}")
    if cfg.skip_mode not in ("in_attention", "none"):
        raise ConfigError(f"unknown skip_mode {cfg.skip_mode!r}")
    if cfg.self_in_bag not in ("include", "exclude_if_bag_gt1"):
        raise ConfigError(f"unknown self_in_bag {cfg.self_in_bag!r}")
    if not cfg.blocks:
        raise ConfigError("at least one block required")
    for spec in cfg.blocks:
        if spec.block_id not in block_shapes:
            raise ConfigError(f"pack has no block {spec.block_id}")
        h, w, c = block_shapes[spec.block_id]
        if spec.use_cls and cfg.backbone_family != "vit":
            raise ConfigError("CLS candidate requires a vit pack")
        if not spec.shapes and not spec.use_cls:
            raise ConfigError(f"block {spec.block_id}: empty candidate list")
        for (sh, sw) in spec.shapes:
            if not (1 <= sh <= h and 1 <= sw <= w):
                raise ConfigError(
                    f"block {spec.block_id}: candidate shape ({sh},{sw}) "
                    f"outside permissible range of ({h},{w})")
        if cfg.use_cap:
            head_count(c, spec)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

COMPONENT1_KINDS = ("theta", "mu", "ln_vit_g", "ln_vit_b")
COMPONENT2_KINDS = ("ln_g", "ln_b", "wk", "wv", "kappa")


def param_name(block_id: int, kind: str) -> str:
    return f"b{block_id}.{kind}"


def param_kind(name: str) -> str:
    return name.split(".", 1)[1]


def init_params(cfg: HeadConfig,
                block_shapes: dict[int, tuple[int, int, int]]) -> dict[str, np.ndarray]:
    """Zero-init pooling queries and identity layer-norms; uniform(-a, a)
    with a = sqrt(6 / (C + d)) for the per-head projections."""
    params: dict[str, np.ndarray] = {}
    for b_idx, spec in enumerate(cfg.blocks):
        c = block_shapes[spec.block_id][2]
        if cfg.use_pooling_attention:
            params[param_name(spec.block_id, "theta")] = np.zeros(c)
            params[param_name(spec.block_id, "mu")] = np.zeros(c)
            if cfg.backbone_family == "vit":
                params[param_name(spec.block_id, "ln_vit_g")] = np.ones(c)
                params[param_name(spec.block_id, "ln_vit_b")] = np.zeros(c)
        if cfg.use_cap:
            h = head_count(c, spec)
            d = c // h
            a = math.sqrt(6.0 / (c + d))
            params[param_name(spec.block_id, "ln_g")] = np.ones(c)
            params[param_name(spec.block_id, "ln_b")] = np.zeros(c)
            for k_idx, kind in enumerate(("wk", "wv", "kappa")):
                rng = np.random.default_rng(
                    np.random.SeedSequence([cfg.init_seed, b_idx, k_idx]))
                params[param_name(spec.block_id, kind)] = rng.uniform(
                    -a, a, size=(h, c, d))
    return params


def param_group(name: str) -> str:
    kind = param_kind(name)
    if kind in COMPONENT1_KINDS:
        return "component1"
    if kind in COMPONENT2_KINDS:
        return "component2"
    raise ConfigError(f"unknown parameter {name!r}")


def default_block_shapes(h: int, w: int, n: int = 3) -> tuple[tuple[int, int], ...]:
    """`n` equally spaced square-ish candidate shapes up to the raw grid."""
    lo = max(1, (min(h, w) + 1) // 2)
    sizes = sorted({int(round(v)) for v in
                    np.linspace(lo, min(h, w), n)})
    return tuple((min(s, h), min(s, w)) for s in sizes)


def default_config(block_shapes: dict[int, tuple[int, int, int]], family: str,
                   block_ids: list[int] | None = None, **overrides) -> HeadConfig:
    """A usable configuration for a pack: 3 equally spaced candidate shapes
    per block (plus CLS for vit), default hyperparameters, and an explicit
    single head whenever the channel count breaks the divide-by-64 rule."""
    ids = block_ids if block_ids is not None else sorted(block_shapes)
    blocks = []
    for bid in ids:
        h, w, c = block_shapes[bid]
        blocks.append(BlockHead(
            block_id=bid,
            shapes=default_block_shapes(h, w),
            use_cls=(family == "vit"),
            heads=None if c % 64 == 0 else 1,
        ))
    return HeadConfig(backbone_family=family, blocks=tuple(blocks), **overrides)


# ---------------------------------------------------------------------------
# candidate construction (static per record; plain numpy)
# ---------------------------------------------------------------------------

def build_candidates(block: BlockFeatures, spec: BlockHead,
                     family: str) -> list[np.ndarray]:
    """Flattened candidate patch maps, one (P_i, C) array per configured
    shape; the raw (H, W) target is an identity copy. The CLS row is not a
    candidate here (it joins the stack directly, bypassing patch pooling)."""
    h, w, c = block.shape
    out = []
    for (sh, sw) in spec.shapes:
        pooled, _ = ad.adaptive_max_pool_2d_value(block.patches, sh, sw)
        out.append(pooled.reshape(sh * sw, c))
    if spec.use_cls:
        if family != "vit" or block.cls is None:
            raise ConfigError("CLS candidate requires a vit pack")
    return out


@dataclass
class BlockData:
    """Stacked per-record candidate tensors for one block (constants)."""
    spec: BlockHead
    c: int
    cand: list[np.ndarray]          # each (R, P_i, C)
    cand_normed_t: list[np.ndarray] # each (R, C, P_i): pre-normalized, transposed
    cls: np.ndarray | None          # (R, C) for vit blocks configured with CLS
    gap: np.ndarray                 # (R, C): raw-grid average pooling


def prepare_block_data(records: list[ImageRecord], spec: BlockHead,
                       cfg: HeadConfig) -> BlockData:
    blocks = [rec.block(spec.block_id) for rec in records]
    c = blocks[0].shape[2]
    per_record = [build_candidates(b, spec, cfg.backbone_family) for b in blocks]
    cand, normed = [], []
    for i in range(len(spec.shapes)):
        stacked = np.stack([pr[i] for pr in per_record])
        cand.append(stacked)
        if cfg.backbone_family == "cnn":
            norm = np.sqrt(ad.ordered_sum(stacked * stacked, axis=-1,
                                          keepdims=True))
            pre = stacked / (norm + 1e-6)
        else:
            pre = stacked / math.sqrt(c)
        normed.append(np.swapaxes(pre, -1, -2).copy())
    cls = None
    if spec.use_cls:
        if cfg.backbone_family != "vit":
            raise ConfigError("CLS candidate requires a vit pack")
        cls = np.stack([b.cls for b in blocks])
    raw = np.stack([b.patches.reshape(-1, c) for b in blocks])
    gap = ad.ordered_sum(raw, axis=1) / raw.shape[1]
    return BlockData(spec=spec, c=c, cand=cand, cand_normed_t=normed,
                     cls=cls, gap=gap)


def prepare_episode_blocks(records: list[ImageRecord],
                           cfg: HeadConfig) -> list[BlockData]:
    return [prepare_block_data(records, spec, cfg) for spec in cfg.blocks]


# ---------------------------------------------------------------------------
# component 1: pooling by attention
# ---------------------------------------------------------------------------

def pool_block_images(tape: Tape, pnodes: dict[str, Node], bd: BlockData,
                      cfg: HeadConfig) -> Node:
    """Image-level vectors for all R records of one block; returns (R, C)."""
    if not cfg.use_pooling_attention:
        return tape.constant(bd.gap)
    spec, c = bd.spec, bd.c
    tau_scale = cfg.resolved_tau / math.sqrt(c)
    theta = ad.reshape(pnodes[param_name(spec.block_id, "theta")], (1, c))
    parts: list[Node] = []
    for stacked, normed_t in zip(bd.cand, bd.cand_normed_t):
        logits = ad.scale(ad.matmul(theta, tape.constant(normed_t)), tau_scale)
        scores = ad.softmax(logits, axis=-1)            # (R, 1, P)
        pooled = ad.matmul(scores, tape.constant(stacked))  # (R, 1, C)
        if cfg.backbone_family == "vit":
            pooled = ad.layer_norm(
                pooled,
                pnodes[param_name(spec.block_id, "ln_vit_g")],
                pnodes[param_name(spec.block_id, "ln_vit_b")], axis=-1)
        parts.append(pooled)
    if bd.cls is not None:
        r = bd.cls.shape[0]
        parts.append(ad.reshape(tape.constant(bd.cls), (r, 1, c)))
    stack = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)  # (R, D, C)
    if cfg.backbone_family == "cnn":
        normed = ad.l2_normalize(stack, axis=-1)
    else:
        normed = ad.scale(stack, 1.0 / math.sqrt(c))
    mu = ad.reshape(pnodes[param_name(spec.block_id, "mu")], (1, c))
    logits = ad.scale(ad.matmul(mu, ad.transpose(normed, (0, 2, 1))), tau_scale)
    scores = ad.softmax(logits, axis=-1)                # (R, 1, D)
    pooled = ad.matmul(scores, stack)                   # (R, 1, C)
    return ad.reshape(pooled, (stack.shape[0], c))


# ---------------------------------------------------------------------------
# component 2: cross-attention pooling
# ---------------------------------------------------------------------------

def _cap_values(zv: Node, zk: Node | None, v_slice: Node | None,
                gate: Node | None, cfg: HeadConfig) -> Node:
    """Value rows per the configured skip/co-excitation variant."""
    values = ad.mul(zv, gate) if gate is not None else zv
    if cfg.skip_mode == "in_attention":
        skip = zk if cfg.cross_attention else v_slice
        values = ad.add(values, skip)
    return values


def cap_block(tape: Tape, pnodes: dict[str, Node], spec: BlockHead,
              cfg: HeadConfig, c: int, m_sup: Node, m_qry: Node,
              bags: list[np.ndarray]) -> tuple[list[Node], Node]:
    """Query-conditioned prototypes per class and the transformed query.

    Returns (prototypes, v_query) where each prototype and v_query is (B, C),
    B the number of query rows in `m_qry`.
    """
    b_rows = m_qry.shape[0]
    if not cfg.use_cap:
        protos = []
        for idx in bags:
            bag = ad.take(m_sup, idx, axis=0)
            proto = ad.mean(bag, axis=0, keepdims=True)
            protos.append(ad.broadcast_to(proto, (b_rows, c)))
        return protos, m_qry
    bid = spec.block_id
    h = head_count(c, spec)
    d = c // h
    ln_g = pnodes[param_name(bid, "ln_g")]
    ln_b = pnodes[param_name(bid, "ln_b")]
    v_sup = ad.layer_norm(m_sup, ln_g, ln_b, axis=-1)
    v_qry = ad.layer_norm(m_qry, ln_g, ln_b, axis=-1)
    c_dba, s_dba = dba_constants(d)

    proto_heads: list[list[Node]] = [[] for _ in bags]
    query_heads: list[Node] = []
    for j in range(h):
        wk = ad.slice_(pnodes[param_name(bid, "wk")], j)
        wv = ad.slice_(pnodes[param_name(bid, "wv")], j)
        kap = ad.slice_(pnodes[param_name(bid, "kappa")], j)
        qv = ad.matmul(v_qry, wv)                      # (B, d)
        gate = ad.sigmoid(ad.matmul(v_qry, kap)) if cfg.coexcitation else None
        if cfg.cross_attention:
            qk = ad.matmul(v_qry, wk)                  # (B, d)
            qk3 = ad.reshape(qk, (b_rows, 1, d))
            q_val = _cap_values(qv, qk, None, gate, cfg)
        else:
            q_slice = ad.slice_(v_qry, (slice(None), slice(j * d, (j + 1) * d)))
            q_val = _cap_values(qv, None, q_slice, gate, cfg)
        query_heads.append(q_val)

        gate3 = ad.reshape(gate, (b_rows, 1, d)) if gate is not None else None
        for l_idx, idx in enumerate(bags):
            s = len(idx)
            v_t = ad.take(v_sup, idx, axis=0)          # (S, C)
            zv = ad.reshape(ad.matmul(v_t, wv), (1, s, d))
            if cfg.cross_attention:
                zk = ad.reshape(ad.matmul(v_t, wk), (1, s, d))
                values = _cap_values(zv, zk, None, gate3, cfg)  # (B|1, S, d)
                if cfg.cas_kind == "dba":
                    dist = ad.sum_(ad.abs_(ad.sub(qk3, zk)), axis=-1)  # (B, S)
                    logits = ad.scale(ad.sub(tape.constant(c_dba), dist),
                                      cfg.eta / s_dba)
                else:
                    logits = ad.scale(
                        ad.matmul(qk, ad.transpose(ad.reshape(zk, (s, d)))),
                        cfg.eta / math.sqrt(d))
                scores = ad.softmax(logits, axis=-1)   # (B, S)
                weighted = ad.mul(ad.reshape(scores, (b_rows, s, 1)), values)
                o_p = ad.sum_(weighted, axis=1)        # (B, d)
            else:
                t_slice = ad.reshape(
                    ad.slice_(v_t, (slice(None), slice(j * d, (j + 1) * d))),
                    (1, s, d))
                values = _cap_values(zv, None, t_slice, gate3, cfg)
                o_p = ad.mean(values, axis=1)          # (B|1, d)
                if o_p.shape[0] != b_rows:
                    o_p = ad.broadcast_to(o_p, (b_rows, d))
            proto_heads[l_idx].append(o_p)

    v_q = query_heads[0] if h == 1 else ad.concat(query_heads, axis=-1)
    protos = [ph[0] if h == 1 else ad.concat(ph, axis=-1) for ph in proto_heads]
    return protos, v_q


# ---------------------------------------------------------------------------
# component 3: logits
# ---------------------------------------------------------------------------

def class_logits(tape: Tape, protos: list[Node], v_q: Node,
                 temperature: float) -> Node:
    """Centered cosine logits (B, L); centering mean is per query because
    prototypes are query-conditioned.

    Centering is computed as a mean of pairwise differences,
    x - m == mean_k(x - p_k), rather than subtracting the rounded mean: with
    the canonical reduction order this makes the two centered prototypes of a
    2-class task exact negations of each other, so their logits are exactly
    antipodal.
    """
    if len(protos) < 2:
        raise ConfigError("need at least 2 classes for logits")
    n_classes = len(protos)
    b_rows, c = protos[0].shape
    stack = ad.stack(protos, axis=0)                    # (L, B, C)
    centered = [
        ad.mean(ad.sub(ad.reshape(p, (1, b_rows, c)), stack), axis=0)
        for p in protos]                                # each (B, C)
    q_centered = ad.mean(
        ad.sub(ad.reshape(v_q, (1, b_rows, c)), stack), axis=0)
    p_hat = ad.l2_normalize(ad.stack(centered, axis=0), axis=-1)  # (L, B, C)
    q_hat = ad.l2_normalize(q_centered, axis=-1)        # (B, C)
    sims = ad.sum_(ad.mul(p_hat, ad.reshape(q_hat, (1, b_rows, c))),
                   axis=-1)                             # (L, B)
    return ad.scale(ad.transpose(sims), 1.0 / temperature)


def fuse_block_logits(per_block: list[Node]) -> Node:
    """Smooth-max fusion over blocks: logsumexp of the (N, B, L) stack."""
    if len(per_block) == 1:
        return per_block[0]
    return ad.logsumexp(ad.stack(per_block, axis=0), axis=0)


# ---------------------------------------------------------------------------
# end-to-end forward
# ---------------------------------------------------------------------------

def batch_logits(tape: Tape, pnodes: dict[str, Node],
                 sup_blocks: list[BlockData], qry_blocks: list[BlockData],
                 bags: list[np.ndarray], cfg: HeadConfig) -> Node:
    """Logits (B, L) for B query rows against the per-class support bags."""
    per_block = []
    for bd_s, bd_q in zip(sup_blocks, qry_blocks):
        m_sup = pool_block_images(tape, pnodes, bd_s, cfg)
        m_qry = pool_block_images(tape, pnodes, bd_q, cfg)
        protos, v_q = cap_block(tape, pnodes, bd_s.spec, cfg, bd_s.c,
                                m_sup, m_qry, bags)
        per_block.append(class_logits(tape, protos, v_q, cfg.temperature))
    return fuse_block_logits(per_block)


def param_nodes(tape: Tape, params: dict[str, np.ndarray],
                trainable: bool = True) -> dict[str, Node]:
    if trainable:
        return {k: tape.parameter(k, v) for k, v in params.items()}
    return {k: tape.constant(v) for k, v in params.items()}


def head_forward(support: dict[int, list[ImageRecord]], query: ImageRecord,
                 params: dict[str, np.ndarray], cfg: HeadConfig) -> np.ndarray:
    """Logits (L,) for one query episode, classes in sorted label order."""
    class_ids = sorted(support)
    sup_records: list[ImageRecord] = []
    bags = []
    for label in class_ids:
        idx = np.arange(len(sup_records), len(sup_records) + len(support[label]))
        bags.append(idx)
        sup_records.extend(support[label])
    tape = Tape()
    pnodes = param_nodes(tape, params, trainable=False)
    sup_blocks = prepare_episode_blocks(sup_records, cfg)
    qry_blocks = prepare_episode_blocks([query], cfg)
    out = batch_logits(tape, pnodes, sup_blocks, qry_blocks, bags, cfg)
    return out.value[0].copy()


# ---------------------------------------------------------------------------
# spec-level single-episode surfaces (thin wrappers used by tests/oracles)
# ---------------------------------------------------------------------------

def pool_candidate(a: np.ndarray, theta: np.ndarray, tau: float, family: str,
                   ln_affine: tuple[np.ndarray, np.ndarray] | None = None
                   ) -> np.ndarray:
    """One candidate map (H', W', C) or (P, C) to a single (1, C) vector."""
    flat = a.reshape(-1, a.shape[-1])
    c = flat.shape[-1]
    tape = Tape()
    x = tape.constant(flat)
    if family == "cnn":
        normed = ad.l2_normalize(x, axis=-1)
    else:
        normed = ad.scale(x, 1.0 / math.sqrt(c))
    th = tape.constant(theta.reshape(1, c))
    scores = ad.softmax(
        ad.scale(ad.matmul(th, ad.transpose(normed)), tau / math.sqrt(c)),
        axis=-1)
    pooled = ad.matmul(scores, x)
    if family == "vit":
        if ln_affine is None:
            ln_affine = (np.ones(c), np.zeros(c))
        pooled = ad.layer_norm(pooled, tape.constant(ln_affine[0]),
                               tape.constant(ln_affine[1]), axis=-1)
    return pooled.value.copy()


def pool_image(candidates: list[np.ndarray], cls: np.ndarray | None,
               mu: np.ndarray, tau: float, family: str) -> np.ndarray:
    """Candidate vectors (each (1, C)) plus optional CLS row to one (1, C)."""
    rows = [c.reshape(1, -1) for c in candidates]
    if cls is not None:
        rows.append(cls.reshape(1, -1))
    b = np.concatenate(rows, axis=0)
    c = b.shape[-1]
    tape = Tape()
    bn = tape.constant(b)
    normed = (ad.l2_normalize(bn, axis=-1) if family == "cnn"
              else ad.scale(bn, 1.0 / math.sqrt(c)))
    scores = ad.softmax(
        ad.scale(ad.matmul(tape.constant(mu.reshape(1, c)),
                           ad.transpose(normed)), tau / math.sqrt(c)),
        axis=-1)
    return ad.matmul(scores, bn).value.copy()


def dba_scores(yk: np.ndarray, zk: np.ndarray, eta: float) -> np.ndarray:
    """Bag attention scores (1, S) from broadcastable (1|S, d) key rows."""
    yk2 = np.asarray(yk, dtype=np.float64).reshape(-1, yk.shape[-1])
    zk2 = np.asarray(zk, dtype=np.float64).reshape(-1, zk.shape[-1])
    d = zk2.shape[-1]
    c_dba, s_dba = dba_constants(d)
    tape = Tape()
    dist = ad.sum_(ad.abs_(ad.sub(tape.constant(yk2), tape.constant(zk2))),
                   axis=-1)
    logits = ad.scale(ad.sub(tape.constant(c_dba), dist), eta / s_dba)
    return ad.softmax(logits, axis=-1).value.reshape(1, -1).copy()


def mhce(x: np.ndarray, kappa: np.ndarray) -> np.ndarray:
    tape = Tape()
    return ad.sigmoid(ad.matmul(tape.constant(np.atleast_2d(x)),
                                tape.constant(kappa))).value.copy()


def cap_forward(p: np.ndarray, q: np.ndarray, params: dict[str, np.ndarray],
                cfg: HeadConfig, block_id: int) -> tuple[np.ndarray, np.ndarray]:
    """(v_prototype, v_query), both (1, C), for one bag and one query."""
    spec = next(s for s in cfg.blocks if s.block_id == block_id)
    c = p.shape[-1]
    tape = Tape()
    pnodes = param_nodes(tape, params, trainable=False)
    protos, v_q = cap_block(tape, pnodes, spec, cfg, c,
                            tape.constant(p), tape.constant(np.atleast_2d(q)),
                            [np.arange(p.shape[0])])
    return protos[0].value.copy(), v_q.value.copy()


def block_logits(protos: np.ndarray, v_q: np.ndarray,
                 temperature: float) -> np.ndarray:
    """Centered cosine logits (1, L) from (L, C) prototypes and a (1, C) query."""
    tape = Tape()
    nodes = [tape.constant(protos[i:i + 1]) for i in range(protos.shape[0])]
    out = class_logits(tape, [ad.reshape(n, (1, protos.shape[-1])) for n in nodes],
                       tape.constant(np.atleast_2d(v_q)), temperature)
    return out.value.copy()


def aggregate_logits(per_block: np.ndarray) -> np.ndarray:
    """(N, L) per-block logits to (1, L) fused logits."""
    tape = Tape()
    nodes = [tape.constant(per_block[i:i + 1]) for i in range(per_block.shape[0])]
    return fuse_block_logits(nodes).value.copy()
