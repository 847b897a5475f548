"""Per-task test-time training, non-transductive evaluation, baselines.

Training follows a fixed recipe: SGD with momentum 0.9, no weight decay, a
constant learning rate, the attention-pooling parameters at 5% of it, and a
fixed number of steps. The training-query pool is the support set itself plus
any pseudo-query records bound to the task; mini-batches are a deterministic
round-robin over that pool.

Evaluation is non-transductive by construction: every query's logits are
computed on a fresh tape from (support set, that query) only, so partitioning
the query set any way cannot change any logits.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import head as head_mod
from .episodes import TaskSpec
from .fmpack import Pack, read_pack
from .head import HeadConfig, config_hash, param_group


class AdaptError(RuntimeError):
    pass


def derive_seed(root_seed: int, *tokens) -> int:
    """Splittable sub-seed: sha256 over the root seed and string tokens."""
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for t in tokens:
        h.update(b"/")
        h.update(str(t).encode())
    return int.from_bytes(h.digest()[:8], "little")


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    step: int
    seed: int
    loss_trace: list[float] = field(default_factory=list)


@dataclass
class EvalResult:
    accuracy: float
    logits: np.ndarray        # (n_queries, L)
    predictions: np.ndarray   # (n_queries,) class labels
    labels: np.ndarray        # (n_queries,) ground truth


def _resolve_records(pack: Pack, ids: list[str]):
    return [pack.record(i) for i in ids]


def _task_layout(task: TaskSpec, pack: Pack):
    """Support records in class order plus per-class row indices."""
    classes = list(task.class_ids)
    sup_records, bags = [], []
    for label in classes:
        ids = task.support[label]
        bags.append(np.arange(len(sup_records), len(sup_records) + len(ids)))
        sup_records.extend(_resolve_records(pack, ids))
    return classes, sup_records, bags


def _block_forward(tape, pnodes, cfg, sup_blocks, m_sups, qry_blocks, bags):
    per_block = []
    for bd_s, m_sup, bd_q in zip(sup_blocks, m_sups, qry_blocks):
        m_qry = head_mod.pool_block_images(tape, pnodes, bd_q, cfg)
        protos, v_q = head_mod.cap_block(tape, pnodes, bd_s.spec, cfg, bd_s.c,
                                         m_sup, m_qry, bags)
        per_block.append(head_mod.class_logits(tape, protos, v_q,
                                               cfg.temperature))
    return head_mod.fuse_block_logits(per_block)


def _pool_supports(tape, pnodes, cfg, sup_blocks):
    return [head_mod.pool_block_images(tape, pnodes, bd, cfg)
            for bd in sup_blocks]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_episode(task: TaskSpec, pack: Pack, cfg: HeadConfig,
                  seed: int = 0) -> TrainState:
    shapes = {bid: pack.block_shape(bid) for bid in pack.block_ids}
    head_mod.validate_config(cfg, shapes, pack.backbone_family)
    classes, sup_records, bags = _task_layout(task, pack)
    label_index = {label: i for i, label in enumerate(classes)}

    pool_records = list(sup_records)
    pool_labels = [label_index[r.class_label] for r in sup_records]
    pool_is_support = [True] * len(sup_records)
    if cfg.aug_threshold > 0:  # augmentation off drops bound pseudo-queries
        for pid, _, label in task.pseudo_queries:
            if pid is None:
                continue
            pool_records.append(pack.record(pid))
            pool_labels.append(label_index[label])
            pool_is_support.append(False)
    if not pool_records:
        raise AdaptError(f"{task.task_id}: empty training pool")
    pool_labels = np.asarray(pool_labels)

    params = head_mod.init_params(cfg, shapes)
    momentum = {k: np.zeros_like(v) for k, v in params.items()}
    state = TrainState(params=params, momentum=momentum, step=0, seed=seed)
    if cfg.train.iterations == 0:
        return state

    sup_blocks = head_mod.prepare_episode_blocks(sup_records, cfg)
    pool_blocks = head_mod.prepare_episode_blocks(pool_records, cfg)
    cap = cfg.train.batch_cap
    n_pool = len(pool_records)
    cursor = 0
    lr2 = cfg.train.lr
    lr1 = cfg.train.lr * cfg.train.lr_scale_component1

    for step in range(cfg.train.iterations):
        if n_pool <= cap:
            batch_idx = np.arange(n_pool)
        else:
            batch_idx = np.array([(cursor + i) % n_pool for i in range(cap)])
            cursor = (cursor + cap) % n_pool
        tape = ad.Tape()
        pnodes = head_mod.param_nodes(tape, params)
        try:
            loss = _batch_loss(tape, pnodes, cfg, sup_blocks, pool_blocks,
                               bags, batch_idx, pool_labels, pool_is_support)
            tape.backward(loss)
        except ad.NonFiniteError as exc:
            raise AdaptError(
                f"{task.task_id}: non-finite loss at step {step}: {exc}") from exc
        for name, node in pnodes.items():
            g = node.grad
            if cfg.train.weight_decay:
                g = g + cfg.train.weight_decay * params[name]
            momentum[name] = cfg.train.momentum * momentum[name] + g
            lr = lr1 if param_group(name) == "component1" else lr2
            params[name] -= lr * momentum[name]
        state.loss_trace.append(float(loss.value))
        state.step = step + 1
    return state


def _batch_loss(tape, pnodes, cfg, sup_blocks, pool_blocks, bags, batch_idx,
                pool_labels, pool_is_support):
    m_sups = _pool_supports(tape, pnodes, cfg, sup_blocks)
    labels = pool_labels[batch_idx]
    if cfg.self_in_bag == "include":
        qry_blocks = [_rows(bd, batch_idx) for bd in pool_blocks]
        logits = _block_forward(tape, pnodes, cfg, sup_blocks, m_sups,
                                qry_blocks, bags)
        return ad.cross_entropy(logits, labels)
    # leave-one-out: a support member drops out of its own bag (if it has
    # company), so each query gets its own bag layout
    losses = []
    for row in batch_idx:
        row = int(row)
        q_blocks = [_rows(bd, np.array([row])) for bd in pool_blocks]
        bags_q = []
        for l_idx, idx in enumerate(bags):
            if (pool_is_support[row] and l_idx == pool_labels[row]
                    and len(idx) > 1 and row in idx):
                bags_q.append(idx[idx != row])
            else:
                bags_q.append(idx)
        logits = _block_forward(tape, pnodes, cfg, sup_blocks, m_sups,
                                q_blocks, bags_q)
        losses.append(ad.cross_entropy(logits, [int(pool_labels[row])]))
    return ad.mean(ad.stack(losses, axis=0), axis=0)


def _rows(bd: head_mod.BlockData, idx: np.ndarray) -> head_mod.BlockData:
    return head_mod.BlockData(
        spec=bd.spec, c=bd.c,
        cand=[a[idx] for a in bd.cand],
        cand_normed_t=[a[idx] for a in bd.cand_normed_t],
        cls=None if bd.cls is None else bd.cls[idx],
        gap=bd.gap[idx],
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_task(task: TaskSpec, pack: Pack, params: dict[str, np.ndarray],
                  cfg: HeadConfig,
                  query_ids: list[str] | None = None) -> EvalResult:
    """Classify each query independently against the trained head."""
    classes, sup_records, bags = _task_layout(task, pack)
    sup_blocks = head_mod.prepare_episode_blocks(sup_records, cfg)

    # support pooling does not involve any query; compute once and reuse the
    # identical values for every query (non-transductive by construction)
    tape0 = ad.Tape()
    pn0 = head_mod.param_nodes(tape0, params, trainable=False)
    m_sup_values = [m.value for m in _pool_supports(tape0, pn0, cfg, sup_blocks)]

    queries = task.queries if query_ids is None else [
        (qid, label) for qid, label in task.queries if qid in set(query_ids)]
    logits_rows, preds, labels = [], [], []
    for qid, label in queries:
        tape = ad.Tape()
        pnodes = head_mod.param_nodes(tape, params, trainable=False)
        m_sups = [tape.constant(v) for v in m_sup_values]
        q_blocks = head_mod.prepare_episode_blocks([pack.record(qid)], cfg)
        logits = _block_forward(tape, pnodes, cfg, sup_blocks, m_sups,
                                q_blocks, bags).value[0]
        logits_rows.append(logits)
        preds.append(classes[int(np.argmax(logits))])
        labels.append(label)
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    acc = float(np.mean(preds == labels)) if len(labels) else 0.0
    return EvalResult(accuracy=acc, logits=np.asarray(logits_rows),
                      predictions=preds, labels=labels)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def _gap_embedding(pack: Pack, image_id: str, block_id: int) -> np.ndarray:
    rec = pack.record(image_id)
    blk = rec.block(block_id)
    if pack.backbone_family == "vit":
        return blk.cls.copy()
    flat = blk.patches.reshape(-1, blk.shape[2])
    return ad.ordered_sum(flat, axis=0) / flat.shape[0]


def _norm(x: np.ndarray) -> np.ndarray:
    return x / (np.linalg.norm(x) + 1e-12)


def ncc_classify(task: TaskSpec, pack: Pack, block_id: int) -> EvalResult:
    """Nearest-centroid cosine baseline; no learnable parameters."""
    classes = list(task.class_ids)
    protos = []
    for label in classes:
        embs = [_norm(_gap_embedding(pack, i, block_id))
                for i in task.support[label]]
        protos.append(_norm(np.mean(embs, axis=0)))
    protos = np.stack(protos)
    logits_rows, preds, labels = [], [], []
    for qid, label in task.queries:
        q = _norm(_gap_embedding(pack, qid, block_id))
        sims = protos @ q
        logits_rows.append(sims)
        preds.append(classes[int(np.argmax(sims))])
        labels.append(label)
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    return EvalResult(accuracy=float(np.mean(preds == labels)),
                      logits=np.asarray(logits_rows), predictions=preds,
                      labels=labels)


def cosine_classifier(task: TaskSpec, pack: Pack, block_id: int,
                      lr: float = 0.03, iters: int = 400,
                      temperature: float = 0.1) -> EvalResult:
    """Trainable cosine classifier over GAP embeddings (plain SGD).

    Weight rows start at the NCC class means, so step 0 reproduces the NCC
    decision rule exactly.
    """
    classes = list(task.class_ids)
    sup_embs, sup_labels = [], []
    weights = []
    for idx, label in enumerate(classes):
        embs = [_norm(_gap_embedding(pack, i, block_id))
                for i in task.support[label]]
        weights.append(_norm(np.mean(embs, axis=0)))
        sup_embs.extend(embs)
        sup_labels.extend([idx] * len(embs))
    weights = np.stack(weights)
    sup_embs = np.stack(sup_embs)
    sup_labels = np.asarray(sup_labels)

    for _ in range(iters):
        tape = ad.Tape()
        w = tape.parameter("w", weights)
        logits = ad.scale(
            ad.matmul(tape.constant(sup_embs),
                      ad.transpose(ad.l2_normalize(w, axis=-1))),
            1.0 / temperature)
        loss = ad.cross_entropy(logits, sup_labels)
        tape.backward(loss)
        weights = weights - lr * w.grad

    w_hat = weights / (np.linalg.norm(weights, axis=-1, keepdims=True) + 1e-6)
    logits_rows, preds, labels = [], [], []
    for qid, label in task.queries:
        q = _norm(_gap_embedding(pack, qid, block_id))
        sims = (w_hat @ q) / temperature
        logits_rows.append(sims)
        preds.append(classes[int(np.argmax(sims))])
        labels.append(label)
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    return EvalResult(accuracy=float(np.mean(preds == labels)),
                      logits=np.asarray(logits_rows), predictions=preds,
                      labels=labels)


# ---------------------------------------------------------------------------
# gradient suite
# ---------------------------------------------------------------------------

def episode_grad_check(seed: int, eps: float = 1e-5,
                       tol: float = 1e-4) -> ad.GradCheckReport:
    """Autodiff vs central differences on a full random small episode loss.

    Episode dimensions stay small (C <= 32, S <= 4, L <= 4, two blocks) so
    the finite-difference sweep over every parameter is cheap. Parameters are
    jittered away from the zero init so saddle symmetries do not hide errors.
    """
    from .episodes import SynthConfig, synth_records

    rng = np.random.default_rng(seed)
    c = int(rng.choice([8, 16]))
    n_classes = int(rng.integers(2, 5))
    shots = int(rng.integers(1, 5))
    cfg_s = SynthConfig(
        n_classes=max(n_classes, 2), images_per_class=shots + 1,
        blocks=[(-2, 3, 3, c), (-1, 2, 2, c)],
        modes_per_class=2, latent_dim=6,
        distractor_fraction=0.4, patch_noise=0.3, mode_noise=0.3,
        seed=int(rng.integers(1 << 30)))
    records = synth_records(cfg_s)
    by_class: dict[int, list] = {}
    for r in records:
        by_class.setdefault(r.class_label, []).append(r)

    cfg = head_mod.HeadConfig(
        backbone_family="cnn",
        blocks=(head_mod.BlockHead(-2, shapes=((2, 2), (3, 3)), heads=1),
                head_mod.BlockHead(-1, shapes=((1, 1), (2, 2)),
                                   heads=2 if c == 16 else 1)),
        cas_kind="dba" if rng.random() < 0.5 else "sdpa")
    sup_records, bags = [], []
    for label in range(n_classes):
        bags.append(np.arange(len(sup_records), len(sup_records) + shots))
        sup_records.extend(by_class[label][:shots])
    labels = np.asarray([i for i, bag in enumerate(bags) for _ in bag])
    sup_blocks = head_mod.prepare_episode_blocks(sup_records, cfg)

    def build(tape, pnodes):
        m_sups = _pool_supports(tape, pnodes, cfg, sup_blocks)
        logits = _block_forward(tape, pnodes, cfg, sup_blocks, m_sups,
                                sup_blocks, bags)
        return ad.cross_entropy(logits, labels)

    params = head_mod.init_params(cfg, {-2: (3, 3, c), -1: (2, 2, c)})
    for k in params:
        params[k] = params[k] + 0.05 * rng.normal(size=params[k].shape)
    return ad.grad_check(build, params, eps=eps, tol=tol)


# ---------------------------------------------------------------------------
# suite runner
# ---------------------------------------------------------------------------

METHODS = ("miv", "ncc", "cosine")


def method_hash(method: dict, cfg: HeadConfig | None) -> str:
    if method["name"] == "miv":
        return config_hash(cfg)
    text = json.dumps(method, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def run_task(pack: Pack, task: TaskSpec, method: dict,
             cfg: HeadConfig | None, seed: int) -> dict:
    name = method["name"]
    start = time.perf_counter()
    loss_trace = None
    if name == "miv":
        state = train_episode(task, pack, cfg,
                              seed=derive_seed(seed, "train", task.task_id))
        result = evaluate_task(task, pack, state.params, cfg)
        loss_trace = state.loss_trace
    elif name == "ncc":
        result = ncc_classify(task, pack, method.get("block_id",
                                                     pack.block_ids[-1]))
    elif name == "cosine":
        result = cosine_classifier(
            task, pack, method.get("block_id", pack.block_ids[-1]),
            lr=method.get("lr", 0.03), iters=method.get("iters", 400))
    else:
        raise AdaptError(f"unknown method {name!r}")
    row = {
        "task_id": task.task_id,
        "method": name,
        "config_hash": method_hash(method, cfg),
        "accuracy": result.accuracy,
        "n_queries": int(len(result.labels)),
        "wall_time_s": time.perf_counter() - start,
    }
    if loss_trace is not None:
        row["loss_trace"] = loss_trace
    return row


def _worker(args):
    pack_path, task_json, method_json, cfg_json, seed = args
    pack = read_pack(pack_path)
    task = TaskSpec.from_json(task_json)
    method = json.loads(method_json)
    cfg = head_mod.config_from_dict(json.loads(cfg_json)) if cfg_json else None
    try:
        return run_task(pack, task, method, cfg, seed)
    except Exception as exc:
        raise AdaptError(f"task {task.task_id} failed: {exc}") from exc


def run_suite(pack_path: str, tasks: list[TaskSpec], method: dict,
              cfg: HeadConfig | None = None, workers: int = 1,
              seed: int = 0) -> list[dict]:
    """Evaluate one method on every task; rows sorted by task_id.

    Tasks are independent; the rows are identical for any worker count.
    """
    if method["name"] not in METHODS:
        raise AdaptError(f"unknown method {method['name']!r}")
    if method["name"] == "miv" and cfg is None:
        raise AdaptError("method 'miv' requires a head config")
    cfg_json = json.dumps(asdict(cfg)) if cfg is not None else None
    method_json = json.dumps(method, sort_keys=True)
    jobs = [(pack_path, t.to_json(), method_json, cfg_json, seed)
            for t in tasks]
    if workers <= 1:
        rows = [_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_worker, jobs))
    return sorted(rows, key=lambda r: r["task_id"])
