"""Hidden-tail perturbation crafting.

Three objectives (preserve the clean answer, then emit a run of one special
token, and keep the EOS logit low everywhere) are combined with fixed
scales and per-step adaptive weights, and minimised by sign-gradient PGD on
the processed image features under an L-infinity budget.
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .dataprep import GuidingDataset
from .model import BOS, EOS, ImageSpec, ToyVlmParams
from .tensor import ContractError, Tensor

logger = logging.getLogger(__name__)

LOSS_NAMES = ("sem", "spe", "eos")


class ConfigError(ValueError):
    pass


class CraftingError(RuntimeError):
    def __init__(self, msg: str, trace: list | None = None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass
class AttackConfig:
    alpha: float = 1 / 255
    epsilon: float = 64 / 255
    iterations: int = 2000
    tail_length: int = 64
    tail_token: int = BOS
    mu_sem: float = 1.0
    mu_spe: float = 1e3
    mu_eos: float = 1e4
    temperature: float = 2.0
    lambda_min: float = 0.15
    sigma: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.alpha <= 0 or self.epsilon <= 0:
            raise ConfigError("alpha and epsilon must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.tail_length < 1:
            raise ConfigError("tail_length must be at least 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0 <= self.lambda_min < 1 / 3:
            raise ConfigError("lambda_min must lie in [0, 1/3)")
        if not M.is_special(self.tail_token) or self.tail_token == EOS:
            raise ConfigError(f"tail token {self.tail_token} must be a special id other than EOS")

    @property
    def mu(self) -> tuple[float, float, float]:
        return (self.mu_sem, self.mu_spe, self.mu_eos)

    def with_losses(self, active: Sequence[str]) -> "AttackConfig":
        """Copy with the static scale of every loss not in ``active`` set to zero."""
        unknown = set(active) - set(LOSS_NAMES)
        if unknown:
            raise ConfigError(f"unknown loss names {sorted(unknown)}")
        d = asdict(self)
        for name in LOSS_NAMES:
            if name not in active:
                d[f"mu_{name}"] = 0.0
        return AttackConfig(**d)


# -- losses --------------------------------------------------------------------


def loss_sem(logits: Tensor, response: Sequence[int]) -> Tensor:
    K = len(response)
    if K == 0:
        raise ContractError("semantic loss needs a non-empty response")
    if logits.shape[0] < K:
        raise ContractError(f"logits cover {logits.shape[0]} positions, response has {K}")
    return T.mean(T.cross_entropy(T.slice_(logits, 0, K, axis=0), list(response)))


def loss_spe(logits: Tensor, K: int, M_: int, tail_token: int) -> Tensor:
    if M_ == 0:
        raise ContractError("tail loss needs M >= 1")
    if logits.shape[0] < K + M_:
        raise ContractError(f"logits cover {logits.shape[0]} positions, need {K + M_}")
    return T.mean(T.cross_entropy(T.slice_(logits, K, K + M_, axis=0), [tail_token] * M_))


def loss_eos(logits: Tensor, eos_id: int = EOS) -> Tensor:
    """Mean raw EOS logit over every position (can be negative)."""
    if logits.shape[0] < 1:
        raise ContractError("EOS loss needs at least one position")
    return T.mean(T.slice_(logits, eos_id, eos_id + 1, axis=1))


# -- dynamic weighting ---------------------------------------------------------


@dataclass
class DwaState:
    prev_losses: tuple[float, float, float] | None = None
    lambdas: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    t: int = 1


def dwa_weights(ratios: Sequence[float], temperature: float, lambda_min: float) -> tuple[float, ...]:
    """Tempered softmax of the loss ratios, floored at ``lambda_min`` and renormalised."""
    r = np.asarray(ratios, dtype=np.float64) / temperature
    e = np.exp(r - r.max())
    soft = e / e.sum()
    floored = np.maximum(soft, lambda_min)
    return tuple(float(v) for v in floored / floored.sum())


def dwa_update(state: DwaState, current: Sequence[float], cfg: AttackConfig) -> DwaState:
    cur = tuple(float(c) for c in current)
    if state.prev_losses is None:
        lam = (1 / 3, 1 / 3, 1 / 3)
    else:
        ratios = []
        for c, p in zip(cur, state.prev_losses):
            den = p + cfg.sigma
            ratios.append(c / (den if den != 0.0 else cfg.sigma))
        lam = dwa_weights(ratios, cfg.temperature, cfg.lambda_min)
    return DwaState(prev_losses=cur, lambdas=lam, t=state.t + 1)


def total_loss(raw: Sequence[Tensor], lambdas: Sequence[float], cfg: AttackConfig) -> Tensor:
    """Sum of ``mu_k * lambda_k * L_k``; the weights are constants for the gradient."""
    out = None
    for li, lam, mu in zip(raw, lambdas, cfg.mu):
        term = T.mul(li, float(mu * lam))
        out = term if out is None else T.add(out, term)
    return out


def pgd_step(delta: np.ndarray, grad: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if delta.shape != grad.shape:
        raise ContractError(f"delta {delta.shape} and grad {grad.shape} differ")
    return np.clip(delta - cfg.alpha * np.sign(grad), -cfg.epsilon, cfg.epsilon)


# -- crafting ---------------------------------------------------------------------


@dataclass
class TraceRow:
    step: int
    loss_sem: float
    loss_spe: float
    loss_eos: float
    lambda_sem: float
    lambda_spe: float
    lambda_eos: float
    total: float
    delta_linf: float

    CSV_FIELDS = ("step", "loss_sem", "loss_spe", "loss_eos",
                  "lambda_sem", "lambda_spe", "lambda_eos", "total")

    def csv_row(self) -> str:
        return ",".join([str(self.step)] + [repr(getattr(self, f)) for f in self.CSV_FIELDS[1:]])


@dataclass
class CraftState:
    """Everything needed to continue a crafting run bit-exactly."""

    delta: np.ndarray
    dwa: DwaState
    rng_state: dict
    step: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step,
            "shape": list(self.delta.shape),
            "delta": [float(v).hex() for v in self.delta.reshape(-1)],
            "dwa_prev": None if self.dwa.prev_losses is None
            else [float(v).hex() for v in self.dwa.prev_losses],
            "dwa_lambdas": [float(v).hex() for v in self.dwa.lambdas],
            "dwa_t": self.dwa.t,
            "rng_state": self.rng_state,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CraftState":
        d = json.loads(text)
        delta = np.array([float.fromhex(v) for v in d["delta"]]).reshape(d["shape"])
        prev = None if d["dwa_prev"] is None else tuple(float.fromhex(v) for v in d["dwa_prev"])
        dwa = DwaState(prev, tuple(float.fromhex(v) for v in d["dwa_lambdas"]), d["dwa_t"])
        return cls(delta, dwa, d["rng_state"], d["step"])


@dataclass
class Perturbation:
    delta: np.ndarray
    epsilon: float
    iterations: int
    trace: list[TraceRow] = field(default_factory=list)
    image_id: str = ""
    config: AttackConfig | None = None
    state: CraftState | None = None

    @property
    def final_losses(self) -> dict[str, float]:
        if not self.trace:
            return {}
        r = self.trace[-1]
        return {"sem": r.loss_sem, "spe": r.loss_spe, "eos": r.loss_eos, "total": r.total}


def teacher_sequence(response: Sequence[int], cfg: AttackConfig) -> list[int]:
    return list(response) + [cfg.tail_token] * cfg.tail_length


def attack_losses(params: ToyVlmParams, feats: Tensor, prompt: Sequence[int],
                  response: Sequence[int], cfg: AttackConfig,
                  weights: dict[str, Tensor] | None = None) -> tuple[Tensor, Tensor, Tensor]:
    teacher = teacher_sequence(response, cfg)
    z = M.forward_logits(params, feats, prompt, teacher, weights=weights)
    K = len(response)
    return loss_sem(z, response), loss_spe(z, K, cfg.tail_length, cfg.tail_token), loss_eos(z)


def composite_objective(params: ToyVlmParams, x_clean: np.ndarray, prompt: Sequence[int],
                        response: Sequence[int], lambdas: Sequence[float], cfg: AttackConfig,
                        weights: dict[str, Tensor] | None = None) -> Callable[[Tensor], Tensor]:
    """``delta -> total loss`` with frozen weights, for gradient checking."""
    w = weights if weights is not None else params.tensors()
    x = Tensor(x_clean)

    def f(delta: Tensor) -> Tensor:
        return total_loss(attack_losses(params, T.add(x, delta), prompt, response, cfg, w),
                          lambdas, cfg)

    return f


def _check_fits(params: ToyVlmParams, dataset: GuidingDataset, cfg: AttackConfig) -> None:
    for pair in dataset.optimization:
        need = params.dims.n_visual_tokens + len(pair.prompt_tokens) + pair.K + cfg.tail_length - 1
        if need > params.dims.context_len:
            raise ConfigError(
                f"prompt+response+tail needs {need} positions, context is {params.dims.context_len}")


def craft(params: ToyVlmParams, image: ImageSpec, dataset: GuidingDataset, cfg: AttackConfig,
          resume: CraftState | None = None, stop_after: int | None = None,
          on_step: Callable[[TraceRow], None] | None = None) -> Perturbation:
    """Run PGD for ``cfg.iterations`` steps from ``delta = 0`` (or ``resume``).

    ``stop_after`` ends the run early at that step index; the returned
    :attr:`Perturbation.state` continues it.
    """
    opt = dataset.optimization
    if not opt:
        raise ConfigError("dataset has no optimization pairs")
    _check_fits(params, dataset, cfg)
    x = M.process_image(image)
    w = params.tensors()
    rng = np.random.default_rng(cfg.seed)
    if resume is None:
        delta = np.zeros_like(x)
        dwa = DwaState()
        start = 0
    else:
        delta = resume.delta.copy()
        dwa = resume.dwa
        rng.bit_generator.state = resume.rng_state
        start = resume.step
    end = cfg.iterations if stop_after is None else min(stop_after, cfg.iterations)
    trace: list[TraceRow] = []
    xt = Tensor(x)
    for step in range(start + 1, end + 1):
        pair = opt[int(rng.integers(len(opt)))]
        d = Tensor(delta, requires_grad=True)
        with T.Tape() as tape:
            raw = attack_losses(params, T.add(xt, d), pair.prompt_tokens,
                                pair.response_tokens, cfg, w)
            values = [r.item() for r in raw]
            if not all(math.isfinite(v) for v in values):
                raise CraftingError(f"non-finite loss at step {step}: {values}", trace)
            dwa = dwa_update(dwa, values, cfg)
            loss = total_loss(raw, dwa.lambdas, cfg)
        T.backward(loss, tape)
        delta = pgd_step(delta, d.grad, cfg)
        row = TraceRow(step, *values, *dwa.lambdas, loss.item(), float(np.abs(delta).max()))
        trace.append(row)
        if on_step is not None:
            on_step(row)
    state = CraftState(delta.copy(), dwa, rng.bit_generator.state, end)
    return Perturbation(delta, cfg.epsilon, end, trace, image.image_id, cfg, state)


def invert_to_pixels(x_clean: np.ndarray, delta: np.ndarray) -> tuple[ImageSpec, np.ndarray]:
    """Map ``x + delta`` back to an 8-bit image; also return its re-processed features."""
    if x_clean.shape != delta.shape:
        raise ContractError(f"features {x_clean.shape} and delta {delta.shape} differ")
    px = np.clip(M.features_to_pixels(x_clean + delta), 0.0, 1.0)
    img = ImageSpec(np.round(px * 255.0) / 255.0)
    return img, M.process_image(img)


# -- artifacts ------------------------------------------------------------------------

_ADV_MAGIC = b"HTADV1\n"


def save_perturbation(pert: Perturbation, x_clean: np.ndarray, path, extra: dict | None = None) -> None:
    img, _ = invert_to_pixels(x_clean, pert.delta)
    meta = {"config": asdict(pert.config) if pert.config else None, "image_id": pert.image_id,
            "epsilon": pert.epsilon, "iterations": pert.iterations,
            "final_losses": pert.final_losses}
    meta.update(extra or {})
    buf = io.BytesIO()
    buf.write(_ADV_MAGIC)
    buf.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
    T.write_tensor(buf, pert.delta)
    buf.write(np.round(img.pixels * 255).astype(np.uint8).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_perturbation(path) -> tuple[Perturbation, dict, ImageSpec]:
    with open(path, "rb") as fh:
        if fh.readline() != _ADV_MAGIC:
            raise ValueError(f"{path}: not a perturbation artifact")
        meta = json.loads(fh.readline())
        delta = T.read_tensor(fh)
        raw = fh.read(M.IMAGE_SIZE * M.IMAGE_SIZE)
    if len(raw) != M.IMAGE_SIZE * M.IMAGE_SIZE:
        raise ValueError(f"{path}: truncated pixel block")
    img = ImageSpec(np.frombuffer(raw, dtype=np.uint8).reshape(M.IMAGE_SIZE, M.IMAGE_SIZE) / 255.0,
                    image_id=meta.get("image_id", ""))
    cfg = AttackConfig(**meta["config"]) if meta.get("config") else None
    pert = Perturbation(delta, meta["epsilon"], meta["iterations"], [], meta.get("image_id", ""), cfg)
    return pert, meta, img


def write_trace(trace: Sequence[TraceRow], path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(TraceRow.CSV_FIELDS) + "\n")
        for row in trace:
            fh.write(row.csv_row() + "\n")
