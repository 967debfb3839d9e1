"""Evaluation of clean vs. adversarial generations and the ablation studies."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import attack as A
from . import model as M
from .dataprep import GuidingDataset
from .model import GenerationConfig, ImageSpec, ToyVlmParams

logger = logging.getLogger(__name__)

REPORT_FIELDS = ("condition", "prompt_idx", "total_tokens", "visible_tokens",
                 "reached_limit", "latency_proxy", "quality")


def token_f1(candidate: Sequence[int], reference: Sequence[int]) -> float:
    """Multiset F1 over non-special tokens."""
    c = Counter(int(t) for t in candidate if not M.is_special(int(t)))
    r = Counter(int(t) for t in reference if not M.is_special(int(t)))
    nc, nr = sum(c.values()), sum(r.values())
    if nc == 0 and nr == 0:
        return 1.0
    if nc == 0 or nr == 0:
        return 0.0
    overlap = sum((c & r).values())
    if overlap == 0:
        return 0.0
    precision, recall = overlap / nc, overlap / nr
    return 2 * precision * recall / (precision + recall)


@dataclass
class PromptResult:
    prompt_idx: int
    total_tokens: int
    visible_tokens: int
    reached_limit: bool
    latency_proxy: int
    quality: float
    tokens: list[int] = field(default_factory=list, repr=False)
    wall_seconds: float = 0.0
    truncated: bool = False


@dataclass
class Aggregates:
    n: int
    asr: float
    latency: float
    output_length: float
    visible_length: float
    quality: float
    quality_success: float | None
    errors: int = 0


def aggregate(results: Sequence[PromptResult], errors: int = 0) -> Aggregates:
    if not results:
        return Aggregates(0, float("nan"), float("nan"), float("nan"), float("nan"),
                          float("nan"), None, errors)
    hits = [r for r in results if r.reached_limit]
    return Aggregates(
        n=len(results),
        asr=len(hits) / len(results),
        latency=float(np.mean([r.latency_proxy for r in results])),
        output_length=float(np.mean([r.total_tokens for r in results])),
        visible_length=float(np.mean([r.visible_tokens for r in results])),
        quality=float(np.mean([r.quality for r in results])),
        quality_success=float(np.mean([r.quality for r in hits])) if hits else None,
        errors=errors,
    )


class Evaluation(list):
    """List of :class:`PromptResult` that also carries the failed-prompt tally."""

    errors: int = 0


def evaluate(params: ToyVlmParams, features: np.ndarray, dataset: GuidingDataset,
             gen_cfg: GenerationConfig, weights=None) -> Evaluation:
    """Generate once per test prompt on ``features`` and score each output.

    Failures are logged and counted in ``.errors``, never raised.
    """
    test = dataset.test_idx
    if not test:
        raise ValueError("dataset has no test prompts")
    w = weights if weights is not None else params.tensors()
    out = Evaluation()
    for idx in test:
        pair = dataset.pairs[idx]
        t0 = time.perf_counter()
        try:
            g = M.generate(params, features, pair.prompt_tokens, gen_cfg, weights=w)
        except Exception as err:  # tallied, evaluation continues
            logger.warning("prompt %d failed: %s", idx, err)
            out.errors += 1
            continue
        _, visible = M.render_visible(g.tokens)
        out.append(PromptResult(
            prompt_idx=idx, total_tokens=len(g.tokens), visible_tokens=visible,
            reached_limit=g.reached_limit, latency_proxy=len(g.tokens),
            quality=token_f1(g.tokens, pair.response_tokens), tokens=list(g.tokens),
            wall_seconds=time.perf_counter() - t0, truncated=g.truncated))
    return out


def _ratio(a: float, b: float) -> float | None:
    return a / b if b > 0 else None


@dataclass
class AttackReport:
    label: str
    clean: list[PromptResult]
    adversarial: list[PromptResult]
    clean_errors: int = 0
    adversarial_errors: int = 0
    meta: dict = field(default_factory=dict)
    pixel: list[PromptResult] | None = None
    pixel_errors: int = 0

    @property
    def clean_summary(self) -> Aggregates:
        return aggregate(self.clean, self.clean_errors)

    @property
    def adv_summary(self) -> Aggregates:
        return aggregate(self.adversarial, self.adversarial_errors)

    def multipliers(self) -> dict[str, float | None]:
        c, a = self.clean_summary, self.adv_summary
        return {"latency": _ratio(a.latency, c.latency),
                "output_length": _ratio(a.output_length, c.output_length),
                "visible_length": _ratio(a.visible_length, c.visible_length)}

    def rows(self) -> list[dict]:
        rows = []
        conds = [("clean", self.clean), ("adversarial", self.adversarial)]
        if self.pixel is not None:
            conds.append(("pixel", self.pixel))
        for cond, results in conds:
            for r in results:
                rows.append({"condition": cond, "prompt_idx": r.prompt_idx,
                             "total_tokens": r.total_tokens, "visible_tokens": r.visible_tokens,
                             "reached_limit": int(r.reached_limit),
                             "latency_proxy": r.latency_proxy, "quality": f"{r.quality:.6f}"})
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        wr.writeheader()
        wr.writerows(self.rows())
        return buf.getvalue()

    def summary(self) -> dict:
        out = {"label": self.label, "clean": asdict(self.clean_summary),
               "adversarial": asdict(self.adv_summary), "multipliers": self.multipliers(),
               "meta": self.meta}
        if self.pixel is not None:
            out["pixel"] = asdict(aggregate(self.pixel, self.pixel_errors))
        return out


def summary_from_csv(text: str) -> dict[str, Aggregates]:
    """Recompute aggregates from an emitted report CSV (no hidden state)."""
    by: dict[str, list[PromptResult]] = {}
    for row in csv.DictReader(io.StringIO(text)):
        by.setdefault(row["condition"], []).append(PromptResult(
            int(row["prompt_idx"]), int(row["total_tokens"]), int(row["visible_tokens"]),
            bool(int(row["reached_limit"])), int(row["latency_proxy"]), float(row["quality"])))
    return {k: aggregate(v) for k, v in by.items()}


def run_attack(params: ToyVlmParams, image: ImageSpec, dataset: GuidingDataset,
               cfg: A.AttackConfig, gen_cfg: GenerationConfig, label: str = "attack",
               clean: Evaluation | None = None, pixel_path: bool = False
               ) -> tuple[AttackReport, A.Perturbation]:
    """Craft against ``image`` then evaluate clean and adversarial conditions."""
    x = M.process_image(image)
    pert = A.craft(params, image, dataset, cfg)
    w = params.tensors()
    if clean is None:
        clean = evaluate(params, x, dataset, gen_cfg, weights=w)
    adv = evaluate(params, x + pert.delta, dataset, gen_cfg, weights=w)
    report = AttackReport(label, list(clean), list(adv), clean.errors, adv.errors,
                          meta={"image_id": image.image_id, "tail_token": cfg.tail_token})
    if pixel_path:
        pix = evaluate(params, A.invert_to_pixels(x, pert.delta)[1], dataset, gen_cfg, weights=w)
        report.pixel, report.pixel_errors = list(pix), pix.errors
    return report, pert


def evaluate_perturbation(params: ToyVlmParams, image: ImageSpec, delta: np.ndarray,
                          dataset: GuidingDataset, gen_cfg: GenerationConfig, label: str,
                          pixel_path: bool = False) -> AttackReport:
    x = M.process_image(image)
    w = params.tensors()
    clean = evaluate(params, x, dataset, gen_cfg, weights=w)
    adv = evaluate(params, x + delta, dataset, gen_cfg, weights=w)
    rep = AttackReport(label, list(clean), list(adv), clean.errors, adv.errors,
                       meta={"image_id": image.image_id})
    if pixel_path:
        pix = evaluate(params, A.invert_to_pixels(x, delta)[1], dataset, gen_cfg, weights=w)
        rep.pixel, rep.pixel_errors = list(pix), pix.errors
    return rep


# -- studies ---------------------------------------------------------------------------

LOSS_COMBOS = (("sem",), ("spe",), ("eos",), ("sem", "spe"), ("sem", "eos"), ("spe", "eos"),
               ("sem", "spe", "eos"))


def run_ablation_losses(params: ToyVlmParams, image: ImageSpec, dataset: GuidingDataset,
                        base_cfg: A.AttackConfig, gen_cfg: GenerationConfig | None = None,
                        combos: Iterable[Sequence[str]] = LOSS_COMBOS
                        ) -> dict[str, AttackReport | None]:
    """One craft+evaluate per loss subset; excluded losses get a zero static scale."""
    gen_cfg = gen_cfg or GenerationConfig()
    clean = evaluate(params, M.process_image(image), dataset, gen_cfg)
    out: dict[str, AttackReport | None] = {}
    for combo in combos:
        label = "+".join(combo)
        try:
            out[label] = run_attack(params, image, dataset, base_cfg.with_losses(combo),
                                    gen_cfg, label=label, clean=clean)[0]
        except (A.CraftingError, A.ConfigError) as err:
            logger.warning("loss combination %s failed: %s", label, err)
            out[label] = None
    return out


def run_ablation_token(params: ToyVlmParams, image: ImageSpec, dataset: GuidingDataset,
                       cfg: A.AttackConfig, tokens: Sequence[int],
                       gen_cfg: GenerationConfig | None = None) -> dict[str, AttackReport]:
    gen_cfg = gen_cfg or GenerationConfig()
    clean = evaluate(params, M.process_image(image), dataset, gen_cfg)
    out = {}
    for tok in tokens:
        tcfg = replace(cfg, tail_token=int(tok))
        name = M.SPECIAL_NAMES[tok]
        out[name] = run_attack(params, image, dataset, tcfg, gen_cfg, label=name, clean=clean)[0]
    return out


def run_ablation_decode(params: ToyVlmParams, image: ImageSpec, delta: np.ndarray,
                        dataset: GuidingDataset, strategies: Sequence[GenerationConfig] | None = None
                        ) -> dict[str, AttackReport]:
    """Evaluate one fixed perturbation under several decoding settings."""
    if strategies is None:
        strategies = [GenerationConfig(max_new_tokens=160),
                      GenerationConfig(strategy="nucleus", top_p=1.0, temperature=1.0,
                                       max_new_tokens=160),
                      GenerationConfig(max_new_tokens=320)]
    out = {}
    for g in strategies:
        label = f"{g.strategy}@{g.max_new_tokens}"
        out[label] = evaluate_perturbation(params, image, delta, dataset, g, label)
    return out


def run_transfer(delta: np.ndarray, image: ImageSpec, target: ToyVlmParams,
                 target_dataset: GuidingDataset, gen_cfg: GenerationConfig | None = None,
                 label: str = "transfer") -> AttackReport:
    """Evaluate a perturbation crafted elsewhere against ``target``.

    ``target_dataset`` must hold the target model's own clean responses.
    """
    return evaluate_perturbation(target, image, delta, target_dataset,
                                 gen_cfg or GenerationConfig(), label)


@dataclass
class Histogram:
    name: str
    edges: list[int]
    counts: list[int]


def length_distributions(reports: Sequence[AttackReport], limit: int) -> list[Histogram]:
    """Binned clean length, adversarial visible length and adversarial total length."""
    width = max(limit // 16, 1)
    edges = list(range(0, limit + width, width))

    def hist(name, values):
        counts = [0] * 16
        for v in values:
            counts[min(int(v) // width, 15)] += 1
        return Histogram(name, edges[:17], counts)

    clean = [r.total_tokens for rep in reports for r in rep.clean]
    vis = [r.visible_tokens for rep in reports for r in rep.adversarial]
    tot = [r.total_tokens for rep in reports for r in rep.adversarial]
    return [hist("clean_length", clean), hist("adv_visible_length", vis),
            hist("adv_total_length", tot)]


def histograms_csv(hists: Sequence[Histogram]) -> str:
    lines = ["series,bin_lo,bin_hi,count"]
    for h in hists:
        for i, c in enumerate(h.counts):
            lines.append(f"{h.name},{h.edges[i]},{h.edges[i + 1]},{c}")
    return "\n".join(lines) + "\n"


def comparison_table(reports: dict[str, AttackReport | None]) -> str:
    """One CSV row per study arm."""
    cols = ["arm", "asr", "latency", "output_length", "visible_length", "quality",
            "clean_output_length", "output_multiplier"]
    lines = [",".join(cols)]
    for label, rep in reports.items():
        if rep is None:
            lines.append(f"{label},failed,,,,,,")
            continue
        a, c = rep.adv_summary, rep.clean_summary
        mult = rep.multipliers()["output_length"]
        lines.append(",".join([label, f"{a.asr:.4f}", f"{a.latency:.4f}", f"{a.output_length:.4f}",
                               f"{a.visible_length:.4f}", f"{a.quality:.4f}",
                               f"{c.output_length:.4f}", "" if mult is None else f"{mult:.4f}"]))
    return "\n".join(lines) + "\n"


def dump_summary(report: AttackReport) -> str:
    return json.dumps(report.summary(), sort_keys=True, indent=2)
