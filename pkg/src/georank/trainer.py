"""Learning-to-rank training for the pair scorer.

Margin ranking loss over each query's top-k candidate list, hand-derived
gradients (verified against central finite differences), SGD/Adam, and
deterministic epoch shuffling. Per-batch gradients are accumulated in a
canonical sample order, so the batch gradient is independent of the order
samples arrive in.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geostore import Store
from .retriever import Ranking
from .reranker import (
    RerankerConfig,
    RerankerParams,
    _sigmoid,
    aligner_blocks,
    expected_shapes,
    init_params,
    save_params,
)


@dataclass(frozen=True)
class TrainingSample:
    """One query with its phase-1 candidate list and the positive's position."""

    query_id: str
    candidate_ids: tuple[str, ...]
    positive_index: int

    def validate(self) -> None:
        if len(self.candidate_ids) < 2:
            raise ValueError(f"sample '{self.query_id}' needs at least one negative candidate")
        if not (0 <= self.positive_index < len(self.candidate_ids)):
            raise ValueError(f"sample '{self.query_id}' positive_index {self.positive_index} out of range")
        if len(set(self.candidate_ids)) != len(self.candidate_ids):
            raise ValueError(f"sample '{self.query_id}' has duplicate candidates")


@dataclass
class TrainConfig:
    margin: float = 1.0
    optimizer: str = "adam"
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 10
    shuffle_seed: int = 0
    grad_clip: float | None = None
    loss_on: str = "scores"

    def validate(self) -> None:
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")
        if self.loss_on not in ("scores", "logits"):
            raise ValueError(f"loss_on must be 'scores' or 'logits', got '{self.loss_on}'")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------

def margin_loss(pos_score: float, neg_scores, margin: float) -> float:
    """Mean hinge over negatives: max(0, margin - (pos - neg)); 0 iff separated."""
    neg_scores = list(neg_scores)
    if not neg_scores:
        raise ValueError("margin_loss needs at least one negative score")
    total = 0.0
    for s in neg_scores:
        total += max(0.0, margin - (pos_score - s))
    return total / len(neg_scores)


def _gather_sample(sample: TrainingSample, store: Store, dtype):
    q = store.query(sample.query_id)
    if q.text_emb is None:
        raise ValueError(f"query '{q.id}' has no text embedding")
    imgs, txts = [], []
    for rid in sample.candidate_ids:
        rec = store.reference(rid)
        if rec.text_emb is None:
            raise ValueError(f"candidate '{rid}' has no text embedding")
        imgs.append(rec.image_emb)
        txts.append(rec.text_emb)
    return (
        np.asarray(q.image_emb, dtype),
        np.asarray(q.text_emb, dtype),
        np.stack(imgs).astype(dtype),
        np.stack(txts).astype(dtype),
    )


def _proj_names(config: RerankerConfig, side: str) -> tuple[str, str, str, str]:
    suffix = "" if config.shared_projections else ("_q" if side == "query" else "_r")
    return (
        f"proj_img{suffix}.w",
        f"proj_img{suffix}.b",
        f"proj_txt{suffix}.w",
        f"proj_txt{suffix}.b",
    )


def _aligner_forward_cached(x: np.ndarray, blocks, eps: float):
    caches = []
    for w, b, scale, shift in blocks:
        z = x @ w.T + b
        mu = z.mean(axis=-1, keepdims=True)
        zc = z - mu
        var = (zc * zc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = zc * inv
        y = scale * xhat + shift
        caches.append((x, xhat, inv, y))
        x = np.maximum(y, 0)
    return x, caches


def _aligner_backward(dout: np.ndarray, blocks, caches, grads: dict) -> np.ndarray:
    for i in reversed(range(len(blocks))):
        w, b, scale, shift = blocks[i]
        x_in, xhat, inv, y = caches[i]
        dy = dout * (y > 0)
        grads[f"align{i}.ln_scale"] += (dy * xhat).sum(axis=0)
        grads[f"align{i}.ln_shift"] += dy.sum(axis=0)
        dxhat = dy * scale
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dz = inv * (dxhat - m1 - xhat * m2)
        grads[f"align{i}.w"] += dz.T @ x_in
        grads[f"align{i}.b"] += dz.sum(axis=0)
        dout = dz @ w
    return dout


def _forward(sample: TrainingSample, params: RerankerParams, store: Store, margin: float, loss_on: str):
    cfg = params.config
    dtype = params.dtype
    q_img, q_txt, c_img, c_txt = _gather_sample(sample, store, dtype)
    blocks = aligner_blocks(params)
    eps = cfg.ln_epsilon

    wiq, biq, wtq, btq = (params.tensors[n] for n in _proj_names(cfg, "query"))
    wir, bir, wtr, btr = (params.tensors[n] for n in _proj_names(cfg, "reference"))
    fused_q = (q_img[None, :] @ wiq.T + biq) + (q_txt[None, :] @ wtq.T + btq)
    fused_c = (c_img @ wir.T + bir) + (c_txt @ wtr.T + btr)
    aligned_q, cache_q = _aligner_forward_cached(fused_q, blocks, eps)
    aligned_c, cache_c = _aligner_forward_cached(fused_c, blocks, eps)

    w_score = params.tensors["score.w"]
    u = aligned_q[0] @ w_score.T
    logits = aligned_c @ u + params.tensors["score.b"]
    scores = _sigmoid(logits)

    basis = logits.astype(np.float64) if loss_on == "logits" else scores
    pos = sample.positive_index
    neg_idx = np.array([i for i in range(len(sample.candidate_ids)) if i != pos])
    hinge = margin - (basis[pos] - basis[neg_idx])
    active = hinge > 0
    # np.maximum propagates NaN so a poisoned loss is caught by the train loop
    loss = float(np.sum(np.maximum(hinge, 0.0)) / len(neg_idx))

    ctx = {
        "q_img": q_img, "q_txt": q_txt, "c_img": c_img, "c_txt": c_txt,
        "aligned_q": aligned_q, "aligned_c": aligned_c,
        "cache_q": cache_q, "cache_c": cache_c,
        "u": u, "scores": scores, "pos": pos, "neg_idx": neg_idx, "active": active,
        "blocks": blocks,
    }
    return loss, ctx


def _backward(ctx, params: RerankerParams, loss_on: str) -> dict[str, np.ndarray]:
    cfg = params.config
    dtype = params.dtype
    grads = {name: np.zeros(shape, dtype) for name, shape in expected_shapes(cfg).items()}

    n_neg = len(ctx["neg_idx"])
    m = len(ctx["scores"])
    g_basis = np.zeros(m, np.float64)
    active_neg = ctx["neg_idx"][ctx["active"]]
    g_basis[active_neg] = 1.0 / n_neg
    g_basis[ctx["pos"]] = -len(active_neg) / n_neg
    if loss_on == "scores":
        s = ctx["scores"]
        g_logit = (g_basis * s * (1.0 - s)).astype(dtype)
    else:
        g_logit = g_basis.astype(dtype)

    aligned_q = ctx["aligned_q"]
    aligned_c = ctx["aligned_c"]
    w_score = params.tensors["score.w"]

    grads["score.b"] += np.asarray(g_logit.sum(), dtype)
    s_vec = aligned_c.T @ g_logit
    grads["score.w"] += np.outer(s_vec, aligned_q[0])
    d_aligned_q = (w_score.T @ s_vec)[None, :]
    d_aligned_c = np.outer(g_logit, ctx["u"])

    d_fused_q = _aligner_backward(d_aligned_q, ctx["blocks"], ctx["cache_q"], grads)
    d_fused_c = _aligner_backward(d_aligned_c, ctx["blocks"], ctx["cache_c"], grads)

    niq, biq, ntq, btq = _proj_names(cfg, "query")
    nir, bir, ntr, btr = _proj_names(cfg, "reference")
    grads[niq] += d_fused_q.T @ ctx["q_img"][None, :]
    grads[biq] += d_fused_q.sum(axis=0)
    grads[ntq] += d_fused_q.T @ ctx["q_txt"][None, :]
    grads[btq] += d_fused_q.sum(axis=0)
    grads[nir] += d_fused_c.T @ ctx["c_img"]
    grads[bir] += d_fused_c.sum(axis=0)
    grads[ntr] += d_fused_c.T @ ctx["c_txt"]
    grads[btr] += d_fused_c.sum(axis=0)
    return grads


def loss_and_gradients(
    sample: TrainingSample,
    params: RerankerParams,
    store: Store,
    margin: float,
    loss_on: str = "scores",
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss of one sample plus analytic gradients for every parameter tensor.

    Negatives already separated by more than the margin contribute exactly
    zero gradient.
    """
    sample.validate()
    loss, ctx = _forward(sample, params, store, margin, loss_on)
    return loss, _backward(ctx, params, loss_on)


def sample_loss(sample: TrainingSample, params: RerankerParams, store: Store, margin: float, loss_on: str = "scores") -> float:
    loss, _ = _forward(sample, params, store, margin, loss_on)
    return loss


def batch_gradients(
    batch: list[TrainingSample],
    params: RerankerParams,
    store: Store,
    config: TrainConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss and mean gradient over a batch, accumulated in canonical order."""
    if not batch:
        raise ValueError("empty batch")
    ordered = sorted(batch, key=lambda s: (s.query_id, s.positive_index, s.candidate_ids))
    total = {name: np.zeros(shape, params.dtype) for name, shape in expected_shapes(params.config).items()}
    loss_sum = 0.0
    for sample in ordered:
        loss, grads = loss_and_gradients(sample, params, store, config.margin, config.loss_on)
        loss_sum += loss
        for name in total:
            total[name] += grads[name]
    n = len(ordered)
    return loss_sum / n, {name: g / n for name, g in total.items()}


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def init_optimizer_state(params: RerankerParams, config: TrainConfig) -> dict:
    if config.optimizer == "sgd":
        return {}
    zeros = lambda: {name: np.zeros_like(t) for name, t in params.tensors.items()}
    return {"t": 0, "m": zeros(), "v": zeros()}


def optimizer_step(
    params: RerankerParams,
    grads: dict[str, np.ndarray],
    state: dict,
    config: TrainConfig,
) -> tuple[RerankerParams, dict]:
    """One SGD or Adam update; returns new params and new state."""
    for name, t in params.tensors.items():
        if name not in grads or grads[name].shape != t.shape:
            raise ValueError(f"gradient shape mismatch for '{name}'")
    if config.grad_clip is not None:
        norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
        if norm > config.grad_clip:
            scale = config.grad_clip / norm
            grads = {name: g * scale for name, g in grads.items()}

    new_tensors: dict[str, np.ndarray] = {}
    if config.optimizer == "sgd":
        for name, t in params.tensors.items():
            new_tensors[name] = t - config.lr * grads[name]
        return RerankerParams(params.config, new_tensors), state

    t_step = state["t"] + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** t_step
    bc2 = 1.0 - b2 ** t_step
    new_m, new_v = {}, {}
    for name, theta in params.tensors.items():
        g = grads[name]
        m = b1 * state["m"][name] + (1.0 - b1) * g
        v = b2 * state["v"][name] + (1.0 - b2) * g * g
        new_m[name] = m
        new_v[name] = v
        m_hat = m / bc1
        v_hat = v / bc2
        new_tensors[name] = theta - config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return RerankerParams(params.config, new_tensors), {"t": t_step, "m": new_m, "v": new_v}


def _optimizer_tensors(state: dict) -> dict[str, np.ndarray]:
    """Optimizer state under the checkpoint's tensor framing ('opt.*' names)."""
    if not state:
        return {}
    out = {"opt.t": np.array(float(state["t"]), np.float32)}
    for name, t in state["m"].items():
        out[f"opt.m.{name}"] = t
    for name, t in state["v"].items():
        out[f"opt.v.{name}"] = t
    return out


# ---------------------------------------------------------------------------
# sample construction
# ---------------------------------------------------------------------------

def build_training_samples(
    queries,
    rankings: list[Ranking],
    semipositives: dict[str, set[str]] | None = None,
) -> tuple[list[TrainingSample], int]:
    """One sample per query (per positive, for multi-positive queries) whose
    positive landed in the phase-1 candidate list; the rest are counted as
    skipped. ``semipositives`` maps query ids to reference ids to drop from
    the negative side."""
    by_id = {r.query_id: r for r in rankings}
    samples: list[TrainingSample] = []
    skipped = 0
    for q in queries:
        ranking = by_id.get(q.id)
        if ranking is None:
            raise ValueError(f"no ranking for query '{q.id}'")
        positives = set(q.ground_truth)
        if not positives:
            raise ValueError(f"query '{q.id}' has an empty ground-truth set")
        all_ids = ranking.ids()
        for pos in sorted(positives):
            ids = [rid for rid in all_ids if rid == pos or rid not in positives]
            if semipositives is not None:
                drop = semipositives.get(q.id, set())
                ids = [rid for rid in ids if rid == pos or rid not in drop]
            if pos in ids and len(ids) >= 2:
                samples.append(TrainingSample(q.id, tuple(ids), ids.index(pos)))
            else:
                skipped += 1
    return samples, skipped


def save_samples(samples: list[TrainingSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {"candidates": list(s.candidate_ids), "positive_index": s.positive_index, "query_id": s.query_id}
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def load_samples(path: str | Path) -> list[TrainingSample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
                s = TrainingSample(rec["query_id"], tuple(rec["candidates"]), int(rec["positive_index"]))
                s.validate()
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}, line {ln}: malformed sample ({exc})") from None
            out.append(s)
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    val_r1: float | None
    val_r5: float | None
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    train_count: int = 0
    val_count: int = 0

    def deterministic_dict(self) -> dict:
        """Report content without wall-clock timings (those vary run to run)."""
        return {
            "train_count": self.train_count,
            "val_count": self.val_count,
            "epochs": [
                {"epoch": e.epoch, "mean_loss": e.mean_loss, "val_r1": e.val_r1, "val_r5": e.val_r5}
                for e in self.epochs
            ],
        }

    def digest(self) -> str:
        blob = json.dumps(self.deterministic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.epochs:
                rec = {"epoch": e.epoch, "mean_loss": e.mean_loss, "seconds": e.seconds,
                       "val_r1": e.val_r1, "val_r5": e.val_r5}
                fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")

    def write_csv(self, path: str | Path) -> None:
        lines = ["epoch,mean_loss,val_r1,val_r5,seconds"]
        for e in self.epochs:
            r1 = "" if e.val_r1 is None else f"{e.val_r1:.6f}"
            r5 = "" if e.val_r5 is None else f"{e.val_r5:.6f}"
            lines.append(f"{e.epoch},{e.mean_loss:.8f},{r1},{r5},{e.seconds:.3f}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _candidate_recall(samples: list[TrainingSample], params: RerankerParams, store: Store) -> tuple[float, float]:
    """R@1 / R@5 of the positive within each sample's candidate list after scoring."""
    from .reranker import score_candidates

    hits1 = hits5 = 0
    for s in samples:
        q = store.query(s.query_id)
        imgs = np.stack([store.reference(r).image_emb for r in s.candidate_ids])
        txts = np.stack([store.reference(r).text_emb for r in s.candidate_ids])
        scores = score_candidates(q.image_emb, q.text_emb, imgs, txts, params)
        order = sorted(range(len(s.candidate_ids)), key=lambda i: (-scores[i], s.candidate_ids[i]))
        rank = order.index(s.positive_index)
        hits1 += rank == 0
        hits5 += rank < 5
    n = len(samples)
    return hits1 / n, hits5 / n


def train(
    samples: list[TrainingSample],
    store: Store,
    reranker_config: RerankerConfig,
    config: TrainConfig,
    val_split: float = 0.2,
    checkpoint_dir: str | Path | None = None,
) -> tuple[RerankerParams, TrainReport]:
    """Shuffled mini-batch training; deterministic given seeds; checkpoints each epoch."""
    config.validate()
    if not samples:
        raise ValueError("no training samples")
    for s in samples:
        s.validate()
    if not (0.0 <= val_split < 1.0):
        raise ValueError("val_split must be in [0, 1)")

    params = init_params(reranker_config)
    rng = np.random.default_rng(config.shuffle_seed)
    perm = rng.permutation(len(samples))
    n_val = int(round(len(samples) * val_split))
    val_set = [samples[i] for i in perm[:n_val]]
    train_set = [samples[i] for i in perm[n_val:]]
    if not train_set:
        raise ValueError("val_split leaves no training samples")

    state = init_optimizer_state(params, config)
    report = TrainReport(train_count=len(train_set), val_count=len(val_set))
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(train_set))
        loss_sum = 0.0
        for b0 in range(0, len(order), config.batch_size):
            chunk = order[b0 : b0 + config.batch_size]
            batch = [train_set[i] for i in chunk]
            loss, grads = batch_gradients(batch, params, store, config)
            if not np.isfinite(loss):
                raise RuntimeError(f"NaN loss in epoch {epoch}, batch starting at sample {b0}")
            params, state = optimizer_step(params, grads, state, config)
            loss_sum += loss * len(batch)
        mean_loss = loss_sum / len(train_set)
        val_r1, val_r5 = _candidate_recall(val_set, params, store) if val_set else (None, None)
        report.epochs.append(EpochStats(epoch, mean_loss, val_r1, val_r5, time.perf_counter() - started))
        if ckpt is not None:
            save_params(ckpt / f"epoch_{epoch:03d}.gvck", params, extra=_optimizer_tensors(state))
    if ckpt is not None:
        save_params(ckpt / "final.gvck", params, extra=_optimizer_tensors(state))
    return params, report


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_difference_gradients(
    sample: TrainingSample,
    params: RerankerParams,
    store: Store,
    margin: float,
    loss_on: str = "scores",
    epsilon: float = 1e-4,
) -> dict[str, np.ndarray]:
    """Central differences of the sample loss for every parameter element (float64).

    Elements are perturbed by direct index assignment: reshape views of 0-d
    arrays can silently be copies (numpy 2.x), which would leave the loss
    unperturbed.
    """
    p = params.astype(np.float64)
    out: dict[str, np.ndarray] = {}
    for name, tensor in p.tensors.items():
        grad = np.zeros_like(tensor)
        for idx in np.ndindex(tensor.shape):
            orig = float(tensor[idx])
            tensor[idx] = orig + epsilon
            up = sample_loss(sample, p, store, margin, loss_on)
            tensor[idx] = orig - epsilon
            down = sample_loss(sample, p, store, margin, loss_on)
            tensor[idx] = orig
            grad[idx] = (up - down) / (2.0 * epsilon)
        out[name] = grad
    return out


def gradient_check(
    sample: TrainingSample,
    params: RerankerParams,
    store: Store,
    margin: float,
    loss_on: str = "scores",
    epsilon: float = 1e-4,
) -> dict[str, float]:
    """Per-tensor max relative error of analytic vs finite-difference gradients."""
    p = params.astype(np.float64)
    _, analytic = loss_and_gradients(sample, p, store, margin, loss_on)
    numeric = finite_difference_gradients(sample, p, store, margin, loss_on, epsilon)
    errors: dict[str, float] = {}
    for name in analytic:
        a = np.atleast_1d(analytic[name])
        n = np.atleast_1d(numeric[name])
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        errors[name] = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
    return errors


def make_gradcheck_fixture(seed: int, n_candidates: int = 5) -> tuple[TrainingSample, RerankerParams, Store]:
    """Small random store/sample/params for gradient verification."""
    from .geostore import QueryRecord, ReferenceRecord, StoreManifest

    rng = np.random.default_rng(seed)
    cfg = RerankerConfig(
        image_dim=7, text_dim=5, latent_dim=6, aligner_layers=2, aligner_hidden=6, init_seed=seed + 1
    )
    refs = [
        ReferenceRecord(
            id=f"c{i}",
            image_emb=rng.standard_normal(cfg.image_dim).astype(np.float32),
            text_emb=rng.standard_normal(cfg.text_dim).astype(np.float32),
        )
        for i in range(n_candidates)
    ]
    query = QueryRecord(
        id="q0",
        image_emb=rng.standard_normal(cfg.image_dim).astype(np.float32),
        text_emb=rng.standard_normal(cfg.text_dim).astype(np.float32),
        ground_truth=("c1",),
    )
    manifest = StoreManifest(cfg.image_dim, cfg.text_dim, n_candidates, 1)
    store = Store(manifest, refs, [query])
    sample = TrainingSample("q0", tuple(f"c{i}" for i in range(n_candidates)), 1)
    return sample, init_params(cfg), store


def run_gradcheck(seed: int, margin: float = 1.0, loss_on: str = "scores", epsilon: float = 1e-4) -> float:
    """Max relative error over all tensors for one seeded fixture."""
    sample, params, store = make_gradcheck_fixture(seed)
    errors = gradient_check(sample, params, store, margin, loss_on, epsilon)
    return max(errors.values())
