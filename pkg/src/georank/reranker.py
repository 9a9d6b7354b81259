"""Pair scoring network: project image+text to a shared latent space, fuse by
element-wise sum, align each side with FC+LayerNorm+ReLU blocks, then score
query/reference pairs through a bilinear map and a sigmoid.

Parameters are a flat name -> array mapping so the optimizer, gradient
checker, and checkpoint format all see the same named tensors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geostore import FormatError, Store, QueryRecord
from .retriever import Ranking

CKPT_MAGIC = b"GVCK"
CKPT_VERSION = 1

# sigmoid outputs clamped to the open interval so scores are strictly in (0,1)
_SCORE_FLOOR = np.nextafter(0.0, 1.0)
_SCORE_CEIL = np.nextafter(1.0, 0.0)


@dataclass
class RerankerConfig:
    image_dim: int = 1024
    text_dim: int = 1536
    latent_dim: int = 512
    aligner_layers: int = 2
    aligner_hidden: int = 512
    ln_epsilon: float = 1e-5
    shared_projections: bool = True
    init_seed: int = 0

    def validate(self) -> None:
        for name in ("image_dim", "text_dim", "latent_dim", "aligner_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.aligner_layers < 1:
            raise ValueError("aligner_layers must be >= 1")
        if self.ln_epsilon <= 0:
            raise ValueError("ln_epsilon must be positive")

    def aligner_dims(self) -> list[tuple[int, int]]:
        """(in, out) per block; the stack starts and ends at latent_dim."""
        h, hid, n = self.latent_dim, self.aligner_hidden, self.aligner_layers
        ins = [h] + [hid] * (n - 1)
        outs = [hid] * (n - 1) + [h]
        return list(zip(ins, outs))

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "RerankerConfig":
        cfg = cls(**json.loads(text))
        cfg.validate()
        return cfg


def expected_shapes(config: RerankerConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names and shapes; also fixes the init draw order."""
    h = config.latent_dim
    shapes: dict[str, tuple[int, ...]] = {}
    sides = ("",) if config.shared_projections else ("_q", "_r")
    for side in sides:
        shapes[f"proj_img{side}.w"] = (h, config.image_dim)
        shapes[f"proj_img{side}.b"] = (h,)
        shapes[f"proj_txt{side}.w"] = (h, config.text_dim)
        shapes[f"proj_txt{side}.b"] = (h,)
    for i, (d_in, d_out) in enumerate(config.aligner_dims()):
        shapes[f"align{i}.w"] = (d_out, d_in)
        shapes[f"align{i}.b"] = (d_out,)
        shapes[f"align{i}.ln_scale"] = (d_out,)
        shapes[f"align{i}.ln_shift"] = (d_out,)
    shapes["score.w"] = (h, h)
    shapes["score.b"] = ()
    return shapes


class RerankerParams:
    """Named parameter tensors plus the config they were built for."""

    def __init__(self, config: RerankerConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        # numpy turns 0-d array arithmetic into scalars; keep ndarrays throughout
        self.tensors = {k: np.asarray(v) for k, v in tensors.items()}

    def validate(self) -> None:
        shapes = expected_shapes(self.config)
        if set(self.tensors) != set(shapes):
            missing = set(shapes) - set(self.tensors)
            extra = set(self.tensors) - set(shapes)
            raise ValueError(f"parameter names mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, shape in shapes.items():
            t = self.tensors[name]
            if tuple(t.shape) != shape:
                raise ValueError(f"tensor '{name}' has shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"tensor '{name}' contains NaN/Inf")

    @property
    def dtype(self):
        return self.tensors["score.w"].dtype

    def astype(self, dtype) -> "RerankerParams":
        return RerankerParams(self.config, {k: np.asarray(v).astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "RerankerParams":
        return RerankerParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode("utf-8"))
            h.update(np.asarray(self.tensors[name], dtype="<f4").tobytes())
        return h.hexdigest()


def init_params(config: RerankerConfig) -> RerankerParams:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases, identity LayerNorm."""
    config.validate()
    rng = np.random.default_rng(config.init_seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".w"):
            fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif name.endswith(".ln_scale"):
            tensors[name] = np.ones(shape, np.float32)
        else:
            tensors[name] = np.zeros(shape, np.float32)
    return RerankerParams(config, tensors)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _proj(params: RerankerParams, kind: str, side: str) -> tuple[np.ndarray, np.ndarray]:
    suffix = "" if params.config.shared_projections else ("_q" if side == "query" else "_r")
    return params.tensors[f"proj_{kind}{suffix}.w"], params.tensors[f"proj_{kind}{suffix}.b"]


def project_fuse(image_emb: np.ndarray, text_emb: np.ndarray, params: RerankerParams, side: str = "query") -> np.ndarray:
    """Element-wise sum of the projected image and text embeddings."""
    if side not in ("query", "reference"):
        raise ValueError(f"side must be 'query' or 'reference', got '{side}'")
    dt = params.dtype
    img = np.atleast_2d(np.asarray(image_emb, dtype=dt))
    txt = np.atleast_2d(np.asarray(text_emb, dtype=dt))
    wi, bi = _proj(params, "img", side)
    wt, bt = _proj(params, "txt", side)
    if img.shape[1] != wi.shape[1]:
        raise ValueError(f"image dim {img.shape[1]} does not match projection {wi.shape[1]}")
    if txt.shape[1] != wt.shape[1]:
        raise ValueError(f"text dim {txt.shape[1]} does not match projection {wt.shape[1]}")
    fused = img @ wi.T + bi + txt @ wt.T + bt
    return fused if np.ndim(image_emb) == 2 else fused[0]


def layer_norm(z: np.ndarray, scale: np.ndarray, shift: np.ndarray, eps: float) -> np.ndarray:
    mu = z.mean(axis=-1, keepdims=True)
    zc = z - mu
    var = (zc * zc).mean(axis=-1, keepdims=True)
    return scale * (zc / np.sqrt(var + eps)) + shift


def aligner_blocks(params: RerankerParams) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    n = params.config.aligner_layers
    return [
        (
            params.tensors[f"align{i}.w"],
            params.tensors[f"align{i}.b"],
            params.tensors[f"align{i}.ln_scale"],
            params.tensors[f"align{i}.ln_shift"],
        )
        for i in range(n)
    ]


def align(fused: np.ndarray, params: RerankerParams) -> np.ndarray:
    """Linear -> LayerNorm -> ReLU blocks applied to fused vectors."""
    dt = params.dtype
    x = np.atleast_2d(np.asarray(fused, dtype=dt))
    if x.shape[1] != params.config.latent_dim:
        raise ValueError(f"fused dim {x.shape[1]} does not match latent_dim {params.config.latent_dim}")
    eps = params.config.ln_epsilon
    for w, b, scale, shift in aligner_blocks(params):
        x = np.maximum(layer_norm(x @ w.T + b, scale, shift, eps), 0)
    return x if np.ndim(fused) == 2 else x[0]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SCORE_FLOOR, _SCORE_CEIL)


def score_logits(
    query_img: np.ndarray,
    query_txt: np.ndarray,
    cand_img: np.ndarray,
    cand_txt: np.ndarray,
    params: RerankerParams,
) -> np.ndarray:
    """Pre-sigmoid pair logits for one query against (m, dim) candidate stacks."""
    aligned_q = align(project_fuse(query_img, query_txt, params, "query"), params)
    aligned_r = align(project_fuse(cand_img, cand_txt, params, "reference"), params)
    u = params.tensors["score.w"] @ aligned_q
    return np.asarray(aligned_r @ u + params.tensors["score.b"], np.float64)


def score_candidates(query_img, query_txt, cand_img, cand_txt, params: RerankerParams) -> np.ndarray:
    return _sigmoid(score_logits(query_img, query_txt, cand_img, cand_txt, params))


def score_pair(query: tuple[np.ndarray, np.ndarray], ref: tuple[np.ndarray, np.ndarray], params: RerankerParams) -> float:
    """Likelihood in (0,1) that the reference matches the query."""
    q_img, q_txt = query
    r_img, r_txt = ref
    if q_txt is None or r_txt is None:
        raise ValueError("score_pair requires text embeddings on both sides")
    return float(score_candidates(q_img, q_txt, np.atleast_2d(r_img), np.atleast_2d(r_txt), params)[0])


@dataclass
class PairScoreTrace:
    """Intermediate vectors of one pair scoring, for inspection and tests."""

    fused_query: np.ndarray
    fused_ref: np.ndarray
    aligned_query: np.ndarray
    aligned_ref: np.ndarray
    logit: float
    score: float


def score_pair_trace(query, ref, params: RerankerParams) -> PairScoreTrace:
    q_img, q_txt = query
    r_img, r_txt = ref
    fused_q = project_fuse(q_img, q_txt, params, "query")
    fused_r = project_fuse(r_img, r_txt, params, "reference")
    aligned_q = align(fused_q, params)
    aligned_r = align(fused_r, params)
    logit = float(aligned_r @ (params.tensors["score.w"] @ aligned_q) + params.tensors["score.b"])
    score = float(_sigmoid(np.array([logit]))[0])
    return PairScoreTrace(fused_q, fused_r, aligned_q, aligned_r, logit, score)


def rerank(query: QueryRecord, ranking: Ranking, params: RerankerParams, store: Store) -> Ranking:
    """Reorder the candidate list by pair score; the id set never changes."""
    if query.text_emb is None:
        raise ValueError(f"query '{query.id}' has no text embedding")
    ids = ranking.ids()
    if not ids:
        return Ranking(query_id=query.id, entries=[], k=ranking.k, reranked=True)
    imgs, txts = [], []
    for rid in ids:
        rec = store.reference(rid)
        if rec.text_emb is None:
            raise ValueError(f"candidate '{rid}' has no text embedding")
        imgs.append(rec.image_emb)
        txts.append(rec.text_emb)
    scores = score_candidates(query.image_emb, query.text_emb, np.stack(imgs), np.stack(txts), params)
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    entries = [(ids[i], float(scores[i])) for i in order]
    return Ranking(query_id=query.id, entries=entries, k=ranking.k, reranked=True)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, config: RerankerConfig, tensors: dict[str, np.ndarray]) -> None:
    """GVCK file: magic, version, config JSON, then framed named f32 tensors."""
    cfg = config.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(cfg)))
        fh.write(cfg)
        for name, tensor in tensors.items():
            arr = np.asarray(tensor, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def done(self) -> bool:
        return self.off == len(self.data)


def load_checkpoint(path: str | Path) -> tuple[RerankerConfig, dict[str, np.ndarray]]:
    rd = _Reader(Path(path).read_bytes(), path)
    if rd.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {CKPT_MAGIC!r}")
    version, cfg_len = struct.unpack("<II", rd.take(8))
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    try:
        config = RerankerConfig.from_json(rd.take(cfg_len).decode("utf-8"))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: unreadable config block ({exc})") from None
    tensors: dict[str, np.ndarray] = {}
    while not rd.done():
        (name_len,) = struct.unpack("<I", rd.take(4))
        name = rd.take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", rd.take(4))
        dims = struct.unpack(f"<{rank}Q", rd.take(8 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        payload = rd.take(count * 4)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return config, tensors


def save_params(path: str | Path, params: RerankerParams, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = dict(params.tensors)
    if extra:
        tensors.update(extra)
    save_checkpoint(path, params.config, tensors)


def load_params(path: str | Path) -> RerankerParams:
    """Load model tensors; optimizer-state tensors ('opt.*') are ignored."""
    config, tensors = load_checkpoint(path)
    params = RerankerParams(config, {k: v for k, v in tensors.items() if not k.startswith("opt.")})
    params.validate()
    return params
