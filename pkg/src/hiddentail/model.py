"""Toy vision-language model: tokenizer, image processor, visual-prefix transformer, decoders."""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

# -- vocabulary -------------------------------------------------------------

PAD, BOS, EOS, IM_START, IM_END, BOX_START, BOX_END, QUAD_START = range(8)
SPECIAL_NAMES = ("PAD", "BOS", "EOS", "IM_START", "IM_END", "BOX_START", "BOX_END", "QUAD_START")
N_SPECIAL = len(SPECIAL_NAMES)
_EXCLUDED = set("\\^`{|}~")
SYMBOLS = "".join(chr(c) for c in range(32, 127) if chr(c) not in _EXCLUDED)
VOCAB_SIZE = N_SPECIAL + len(SYMBOLS)
assert VOCAB_SIZE == 96
_CHAR_TO_ID = {ch: N_SPECIAL + i for i, ch in enumerate(SYMBOLS)}


class CapacityError(ValueError):
    """Sequence does not fit the model context window."""


class TrainingError(RuntimeError):
    pass


def special_id(name: str) -> int:
    return SPECIAL_NAMES.index(name.upper())


def is_special(token: int) -> bool:
    return 0 <= token < N_SPECIAL


def encode(text: str) -> list[int]:
    try:
        return [_CHAR_TO_ID[ch] for ch in text]
    except KeyError as err:
        raise ValueError(f"character {err.args[0]!r} is not in the vocabulary") from None


def decode(ids: Sequence[int]) -> str:
    out = []
    for t in ids:
        t = int(t)
        if is_special(t):
            out.append(f"<{SPECIAL_NAMES[t].lower()}>")
        else:
            out.append(SYMBOLS[t - N_SPECIAL])
    return "".join(out)


def render_visible(tokens: Sequence[int]) -> tuple[str, int]:
    """Drop special tokens (as ``skip_special_tokens=True`` would) and decode the rest."""
    kept = [int(t) for t in tokens if not is_special(int(t))]
    return decode(kept), len(kept)


def vocab_hash() -> str:
    return hashlib.sha256(("|".join(SPECIAL_NAMES) + "|" + SYMBOLS).encode()).hexdigest()[:16]


# -- images -------------------------------------------------------------------

IMAGE_SIZE = 16
PATCH = 4


@dataclass(frozen=True)
class ImageSpec:
    pixels: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"image must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)


def process_image(img: ImageSpec) -> np.ndarray:
    """Normalise to [-1, 1] and flatten each 4x4 patch into one feature row (16x16)."""
    f = (img.pixels - 0.5) / 0.5
    g = IMAGE_SIZE // PATCH
    return f.reshape(g, PATCH, g, PATCH).transpose(0, 2, 1, 3).reshape(g * g, PATCH * PATCH).copy()


def features_to_pixels(features: np.ndarray) -> np.ndarray:
    """Inverse of :func:`process_image` without clamping or quantisation."""
    g = IMAGE_SIZE // PATCH
    f = np.asarray(features, dtype=np.float64).reshape(g, g, PATCH, PATCH).transpose(0, 2, 1, 3)
    return f.reshape(IMAGE_SIZE, IMAGE_SIZE) * 0.5 + 0.5


# -- parameters ----------------------------------------------------------------


@dataclass
class ModelDims:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ffn_dim: int = 128
    context_len: int = 256
    n_visual_tokens: int = 16
    vocab_size: int = VOCAB_SIZE
    patch_dim: int = PATCH * PATCH


@dataclass
class ToyVlmParams:
    seed: int
    dims: ModelDims = field(default_factory=ModelDims)
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.weights.items()}

    def copy(self) -> "ToyVlmParams":
        return ToyVlmParams(self.seed, ModelDims(**vars(self.dims)),
                            {k: v.copy() for k, v in self.weights.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.weights):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.weights[k], dtype="<f8").tobytes())
        return h.hexdigest()


def init_params(seed: int, dims: ModelDims | None = None) -> ToyVlmParams:
    dims = dims or ModelDims()
    rng = np.random.default_rng(seed)
    d, f, v = dims.d_model, dims.ffn_dim, dims.vocab_size

    def normal(*shape, std=0.02):
        return rng.normal(0.0, std, size=shape)

    w = {
        "tok_emb": normal(v, d, std=0.1),
        "pos_emb": normal(dims.context_len, d, std=0.02),
        "vis_w1": normal(dims.patch_dim, d, std=dims.patch_dim ** -0.5),
        "vis_b1": np.zeros(d),
        "vis_w2": normal(d, d, std=d ** -0.5),
        "vis_b2": np.zeros(d),
    }
    for i in range(dims.n_layers):
        p = f"h{i}."
        w[p + "ln1_g"] = np.ones(d)
        w[p + "ln1_b"] = np.zeros(d)
        w[p + "qkv_w"] = normal(d, 3 * d, std=d ** -0.5)
        w[p + "qkv_b"] = np.zeros(3 * d)
        w[p + "out_w"] = normal(d, d, std=(2 * dims.n_layers * d) ** -0.5)
        w[p + "out_b"] = np.zeros(d)
        w[p + "ln2_g"] = np.ones(d)
        w[p + "ln2_b"] = np.zeros(d)
        w[p + "ff1_w"] = normal(d, f, std=d ** -0.5)
        w[p + "ff1_b"] = np.zeros(f)
        w[p + "ff2_w"] = normal(f, d, std=(2 * dims.n_layers * f) ** -0.5)
        w[p + "ff2_b"] = np.zeros(d)
    w["lnf_g"] = np.ones(d)
    w["lnf_b"] = np.zeros(d)
    w["head_w"] = normal(d, v, std=d ** -0.5)
    w["head_b"] = np.zeros(v)
    return ToyVlmParams(seed=seed, dims=dims, weights=w)


# -- forward ---------------------------------------------------------------------


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    lead = x.shape[:-1]
    y = T.matmul(T.reshape(x, (-1, x.shape[-1])), w)
    return T.add(T.reshape(y, lead + (w.shape[1],)), b)


_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(n: int) -> Tensor:
    m = _MASKS.get(n)
    if m is None:
        m = np.triu(np.full((n, n), -1e9), k=1)
        _MASKS[n] = m
    return Tensor(m)


def _attention(x: Tensor, w: dict[str, Tensor], p: str, dims: ModelDims) -> Tensor:
    B, n, d = x.shape
    H = dims.n_heads
    dh = d // H
    qkv = T.reshape(_linear(x, w[p + "qkv_w"], w[p + "qkv_b"]), (B, n, 3, H, dh))
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, H, n, dh)
    q = T.reshape(T.slice_(qkv, 0, 1, axis=0), (B, H, n, dh))
    k = T.reshape(T.slice_(qkv, 1, 2, axis=0), (B, H, n, dh))
    v = T.reshape(T.slice_(qkv, 2, 3, axis=0), (B, H, n, dh))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), dh ** -0.5)
    att = T.softmax(T.add(scores, _causal_mask(n)), axis=-1)
    out = T.transpose(T.matmul(att, v), (0, 2, 1, 3))
    return _linear(T.reshape(out, (B, n, d)), w[p + "out_w"], w[p + "out_b"])


def _mlp(x: Tensor, w: dict[str, Tensor], p: str) -> Tensor:
    h = T.softplus(_linear(x, w[p + "ff1_w"], w[p + "ff1_b"]))
    return _linear(h, w[p + "ff2_w"], w[p + "ff2_b"])


def hidden_states(w: dict[str, Tensor], dims: ModelDims, features: Tensor,
                  ids: np.ndarray) -> Tensor:
    """Run the transformer over ``[visual prefix ; ids]``.

    ``features`` is ``(B, 16, 16)`` and ``ids`` an int array ``(B, n)``; the
    result is the final-layer residual stream ``(B, 16 + n, d_model)``.
    """
    B, n = ids.shape
    total = dims.n_visual_tokens + n
    if total > dims.context_len:
        raise CapacityError(f"sequence needs {total} positions but context holds {dims.context_len}")
    vis = _linear(T.softplus(_linear(features, w["vis_w1"], w["vis_b1"])),
                  w["vis_w2"], w["vis_b2"])
    txt = T.embedding(w["tok_emb"], ids)
    x = T.concat([vis, txt], axis=1)
    x = T.add(x, T.slice_(w["pos_emb"], 0, total, axis=0))
    for i in range(dims.n_layers):
        p = f"h{i}."
        x = T.add(x, _attention(T.layer_norm(x, w[p + "ln1_g"], w[p + "ln1_b"]), w, p, dims))
        x = T.add(x, _mlp(T.layer_norm(x, w[p + "ln2_g"], w[p + "ln2_b"]), w, p))
    return x


def project_logits(w: dict[str, Tensor], x: Tensor) -> Tensor:
    return _linear(T.layer_norm(x, w["lnf_g"], w["lnf_b"]), w["head_w"], w["head_b"])


def _as_feature_tensor(features) -> Tensor:
    f = features if isinstance(features, Tensor) else Tensor(features)
    if f.data.ndim == 2:
        f = T.reshape(f, (1,) + f.shape)
    return f


def forward_logits(params: ToyVlmParams, features, prompt: Sequence[int],
                   teacher: Sequence[int], weights: dict[str, Tensor] | None = None) -> Tensor:
    """Teacher-forced logits ``(L, |V|)`` for ``L = len(teacher)``.

    Row ``i`` predicts ``teacher[i]`` from the visual prefix, the prompt and
    ``teacher[:i]``. Differentiable w.r.t. ``features`` when it is a
    requires-grad :class:`Tensor`.
    """
    if not prompt:
        raise ValueError("prompt must be non-empty")
    L = len(teacher)
    w = weights if weights is not None else params.tensors()
    ids = np.asarray([list(prompt) + list(teacher[:-1])], dtype=np.int64)
    need = params.dims.n_visual_tokens + len(prompt) + L - 1
    if need > params.dims.context_len:
        raise CapacityError(
            f"sequence needs {need} positions but context holds {params.dims.context_len}")
    x = hidden_states(w, params.dims, _as_feature_tensor(features), ids)
    start = params.dims.n_visual_tokens + len(prompt) - 1
    x = T.reshape(T.slice_(x, start, start + L, axis=1), (L, params.dims.d_model))
    return project_logits(w, x)


# -- decoding ------------------------------------------------------------------------


@dataclass
class GenerationConfig:
    strategy: str = "greedy"
    top_p: float = 1.0
    temperature: float = 1.0
    max_new_tokens: int = 160
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("greedy", "nucleus"):
            raise ValueError(f"unknown decoding strategy {self.strategy!r}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")


@dataclass
class Generation:
    tokens: list[int]
    reached_limit: bool
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.tokens)


def greedy_pick(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest id on ties
    return int(np.argmax(logits))


def nucleus_pick(logits: np.ndarray, top_p: float, temperature: float,
                 rng: np.random.Generator) -> int:
    z = logits / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    order = np.argsort(-p, kind="stable")
    cum = np.cumsum(p[order])
    k = min(int(np.searchsorted(cum, top_p)) + 1, len(order))
    keep = order[:k]
    q = p[keep] / p[keep].sum()
    return int(keep[rng.choice(k, p=q)])


def next_token_logits(params: ToyVlmParams, w: dict[str, Tensor], features: Tensor,
                      seq: list[int]) -> np.ndarray:
    x = hidden_states(w, params.dims, features, np.asarray([seq], dtype=np.int64))
    last = T.reshape(T.slice_(x, x.shape[1] - 1, x.shape[1], axis=1), (1, params.dims.d_model))
    return project_logits(w, last).data[0]


def generate(params: ToyVlmParams, features, prompt: Sequence[int],
             cfg: GenerationConfig | None = None, weights: dict[str, Tensor] | None = None,
             logits_fn=None) -> Generation:
    """Autoregressive decoding; stops on EOS, ``max_new_tokens`` or a full context.

    ``logits_fn(seq) -> logits`` replaces the model forward when given.
    """
    cfg = cfg or GenerationConfig()
    if logits_fn is None:
        w = weights if weights is not None else params.tensors()
        feats = _as_feature_tensor(np.asarray(features.data if isinstance(features, Tensor)
                                              else features))

        def logits_fn(seq):
            return next_token_logits(params, w, feats, seq)
    room = params.dims.context_len - params.dims.n_visual_tokens
    if len(prompt) > room:
        raise CapacityError(f"prompt of {len(prompt)} tokens exceeds context")
    rng = np.random.default_rng(cfg.seed)
    seq = list(prompt)
    out: list[int] = []
    while len(out) < cfg.max_new_tokens:
        if len(seq) >= room + 1:
            return Generation(out, reached_limit=True, truncated=True)
        z = np.asarray(logits_fn(seq), dtype=np.float64)
        if cfg.strategy == "greedy":
            tok = greedy_pick(z)
        else:
            tok = nucleus_pick(z, cfg.top_p, cfg.temperature, rng)
        out.append(tok)
        if tok == EOS:
            return Generation(out, reached_limit=False)
        seq.append(tok)
    return Generation(out, reached_limit=True)


# -- pretraining ------------------------------------------------------------------------


@dataclass
class TrainExample:
    """One pretraining row: ``tokens`` after the visual prefix, and which of them are targets."""

    features: np.ndarray
    tokens: list[int]
    target_mask: list[int]

    @classmethod
    def single_turn(cls, features, prompt: Sequence[int], response: Sequence[int]) -> "TrainExample":
        return cls(features, list(prompt) + list(response), [0] * len(prompt) + [1] * len(response))


def _batch_loss(params: ToyVlmParams, w: dict[str, Tensor],
                batch: Sequence[TrainExample]) -> Tensor:
    n = max(len(ex.tokens) for ex in batch) - 1
    ids = np.full((len(batch), n), PAD, dtype=np.int64)
    targets = np.zeros((len(batch), n), dtype=np.int64)
    mask = np.zeros((len(batch), n))
    for b, ex in enumerate(batch):
        k = len(ex.tokens) - 1
        ids[b, :k] = ex.tokens[:-1]
        targets[b, :k] = ex.tokens[1:]
        mask[b, :k] = ex.target_mask[1:]
    feats = Tensor(np.stack([ex.features for ex in batch]))
    x = hidden_states(w, params.dims, feats, ids)
    x = T.slice_(x, params.dims.n_visual_tokens, x.shape[1], axis=1)
    z = project_logits(w, T.reshape(x, (-1, params.dims.d_model)))
    ce = T.cross_entropy(z, targets.reshape(-1))
    return T.mul(T.sum_(T.mul(ce, Tensor(mask.reshape(-1)))), 1.0 / mask.sum())


def corpus_loss(params: ToyVlmParams, corpus: Sequence[TrainExample], batch_size: int = 32) -> float:
    w = params.tensors()
    total, count = 0.0, 0
    for i in range(0, len(corpus), batch_size):
        chunk = corpus[i:i + batch_size]
        k = sum(sum(ex.target_mask[1:]) for ex in chunk)
        total += _batch_loss(params, w, chunk).item() * k
        count += k
    return total / count


@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 3e-3
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 0


def pretrain_toy(params: ToyVlmParams, corpus: Sequence[TrainExample],
                 steps: int | None = None, cfg: PretrainConfig | None = None,
                 history: list | None = None) -> ToyVlmParams:
    """Adam on next-token cross-entropy over response tokens. Returns new params."""
    cfg = cfg or PretrainConfig()
    steps = cfg.steps if steps is None else steps
    out = params.copy()
    if steps <= 0:
        return out
    rng = np.random.default_rng(cfg.seed)
    m = {k: np.zeros_like(v) for k, v in out.weights.items()}
    s = {k: np.zeros_like(v) for k, v in out.weights.items()}
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(corpus), size=cfg.batch_size)
        w = out.tensors(requires_grad=True)
        with T.Tape() as tape:
            loss = _batch_loss(out, w, [corpus[i] for i in idx])
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"pretraining diverged at step {step}")
        T.backward(loss, tape)
        if history is not None:
            history.append(value)
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("pretrain step %d loss %.4f", step, value)
        lr = cfg.lr * min(1.0, step / max(cfg.warmup, 1))
        lr *= 0.5 * (1 + np.cos(np.pi * step / steps)) * 0.9 + 0.1
        for k, t in w.items():
            g = t.grad
            if g is None:
                continue
            m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
            s[k] = cfg.beta2 * s[k] + (1 - cfg.beta2) * g * g
            mh = m[k] / (1 - cfg.beta1 ** step)
            sh = s[k] / (1 - cfg.beta2 ** step)
            out.weights[k] = out.weights[k] - lr * (mh / (np.sqrt(sh) + 1e-8)
                                                    + cfg.weight_decay * out.weights[k])
    return out


# -- checkpoints ----------------------------------------------------------------------------

_CKPT_MAGIC = b"HTVLM1\n"


def save_checkpoint(params: ToyVlmParams, path) -> None:
    meta = {"dims": vars(params.dims), "seed": params.seed, "vocab_hash": vocab_hash(),
            "tensors": sorted(params.weights)}
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
    for k in sorted(params.weights):
        T.write_tensor(buf, params.weights[k])
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ToyVlmParams:
    with open(path, "rb") as fh:
        if fh.readline() != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a toy VLM checkpoint")
        meta = json.loads(fh.readline())
        if meta["vocab_hash"] != vocab_hash():
            raise ValueError(f"{path}: vocabulary mismatch")
        weights = {k: T.read_tensor(fh) for k in meta["tensors"]}
    return ToyVlmParams(seed=meta["seed"], dims=ModelDims(**meta["dims"]), weights=weights)
