"""Guiding-dataset construction: procedural scenes, template prompts, captured responses."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from .model import BOS, EOS, ImageSpec

KINDS = ("blob", "bar", "frame")
TONES = ("bright", "dark")
WHERES = ("left", "right", "top", "bottom")
COUNTS = (1, 2, 3)
FAMILIES = ("describe", "count", "locate", "attribute", "yesno", "compare")
_NUM = {1: "one", 2: "two", 3: "three"}


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Descriptor:
    kind: str
    tone: str
    where: str
    count: int


# -- images ----------------------------------------------------------------------


def _stamp(canvas: np.ndarray, kind: str, cy: int, cx: int, value: float, vertical: bool) -> None:
    yy, xx = np.mgrid[0:16, 0:16]
    dy, dx = np.abs(yy - cy), np.abs(xx - cx)
    if kind == "blob":
        m = dy + dx <= 2
    elif kind == "bar":
        m = (dx <= 0) & (dy <= 3) if vertical else (dy <= 0) & (dx <= 3)
    else:
        m = (np.maximum(dy, dx) == 2)
    canvas[m] = value


def _centres(where: str, count: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    slots = {1: [8], 2: [5, 11], 3: [2, 8, 14]}[count]
    off = int(rng.integers(-1, 1)) if count == 3 else int(rng.integers(-1, 2))
    side = {"left": 3, "right": 12, "top": 3, "bottom": 12}[where] + int(rng.integers(-1, 2))
    if where in ("left", "right"):
        return [(s + off, side) for s in slots]
    return [(side, s + off) for s in slots]


def render_scene(desc: Descriptor, rng: np.random.Generator,
                 with_centres: bool = False):
    bright = desc.tone == "bright"
    bg = rng.uniform(0.1, 0.3) if bright else rng.uniform(0.7, 0.9)
    fg = rng.uniform(0.75, 0.95) if bright else rng.uniform(0.05, 0.25)
    yy, xx = np.mgrid[0:16, 0:16]
    ramp = rng.uniform(-0.05, 0.05) * (xx - 7.5) / 7.5 + rng.uniform(-0.05, 0.05) * (yy - 7.5) / 7.5
    canvas = bg + ramp
    vertical = desc.where in ("top", "bottom")
    centres = _centres(desc.where, desc.count, rng)
    for cy, cx in centres:
        _stamp(canvas, desc.kind, cy, cx, fg, vertical)
    canvas = canvas + rng.uniform(-0.03, 0.03, size=canvas.shape)
    pixels = np.round(np.clip(canvas, 0.0, 1.0) * 255.0) / 255.0
    return (pixels, centres) if with_centres else pixels


def all_descriptors() -> list[Descriptor]:
    return [Descriptor(k, t, w, c) for k in KINDS for t in TONES for w in WHERES for c in COUNTS]


def random_descriptor(rng: np.random.Generator) -> Descriptor:
    return Descriptor(KINDS[rng.integers(3)], TONES[rng.integers(2)],
                      WHERES[rng.integers(4)], COUNTS[rng.integers(3)])


def synthesize_images(count: int, seed: int) -> list[tuple[ImageSpec, Descriptor]]:
    """``count`` procedural scenes with their symbolic descriptors, deterministic in ``seed``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    pool = all_descriptors()
    order = rng.permutation(len(pool))
    out = []
    for i in range(count):
        desc = pool[order[i % len(pool)]]
        out.append((ImageSpec(render_scene(desc, rng), image_id=f"img{i:02d}"), desc))
    return out


# -- prompts ------------------------------------------------------------------------

PREFIXES = ("", "please ", "hey, ", "quick question: ", "tell me, ", "ok. ")
SUFFIXES = ("", " thanks")

_BASES = {
    "describe": ("describe:", "describe the image.", "what do you see?",
                 "what is in the picture?", "caption this."),
    "count": ("how many shapes?", "count the shapes.", "how many are there?",
              "count them.", "what is the count?"),
    "locate": ("where is it?", "where are the shapes?", "which side?",
               "locate the shapes.", "where do they sit?"),
    "attribute": ("what tone?", "bright or dark?", "what shade are they?",
                  "is it light or dim?", "tone of the shapes?"),
    "yesno": tuple(f"is there a {k}?" for k in KINDS) + tuple(f"on the {w}?" for w in WHERES),
    "compare": ("brighter than the back?", "darker than the back?",
                "more than one?", "more than two?", "fewer than three?"),
}


def template_pool() -> dict[str, list[str]]:
    """All prompt strings per family (prefix x base x suffix)."""
    return {fam: [p + b + s for b in bases for p in PREFIXES for s in SUFFIXES]
            for fam, bases in _BASES.items()}


def prompt_family(text: str) -> str:
    for fam, prompts in template_pool().items():
        if text in prompts:
            return fam
    raise KeyError(text)


def prompt_ids(text: str) -> list[int]:
    return [BOS] + M.encode(text)


def generate_prompts(descriptor: Descriptor | None = None, n: int = 60, seed: int = 0,
                     round_size: int = 10) -> list[str]:
    """``n`` distinct prompts, drawn in rounds that exclude every earlier prompt.

    Families are visited cyclically within each round so every family is
    represented. The descriptor does not enter the prompt text: questions
    are generic and the answer carries the image content.
    """
    pool = template_pool()
    capacity = sum(len(v) for v in pool.values())
    if n > capacity:
        raise GenerationError(f"requested {n} prompts but the templates hold {capacity}")
    rng = np.random.default_rng(seed)
    used: set[str] = set()
    out: list[str] = []
    fam_cycle = list(FAMILIES)
    while len(out) < n:
        rng.shuffle(fam_cycle)
        batch: list[str] = []
        i = 0
        while len(batch) < min(round_size, n - len(out)):
            fam = fam_cycle[i % len(fam_cycle)]
            i += 1
            fresh = [p for p in pool[fam] if p not in used]
            if not fresh:
                if all(p in used for v in pool.values() for p in v):
                    raise GenerationError("template capacity exhausted")
                continue
            pick = fresh[int(rng.integers(len(fresh)))]
            used.add(pick)
            batch.append(pick)
        out.extend(batch)
    return out


def reference_answer(desc: Descriptor, prompt: str) -> str:
    """Ground-truth caption used to build the pretraining corpus."""
    fam = prompt_family(prompt)
    n, kind = desc.count, desc.kind
    noun = kind + ("s" if n > 1 else "")
    be = "are" if n > 1 else "is"
    if fam == "describe":
        return f"{_NUM[n]} {desc.tone} {noun} on the {desc.where}."
    if fam == "count":
        return f"there {be} {_NUM[n]} {noun}."
    if fam == "locate":
        return f"the {noun} {be} on the {desc.where}."
    if fam == "attribute":
        return f"the {noun} {be} {desc.tone}."
    if fam == "yesno":
        for k in KINDS:
            if f"a {k}?" in prompt:
                return f"yes, a {kind}." if k == kind else f"no, it is a {kind}."
        for w in WHERES:
            if f"the {w}?" in prompt:
                return "yes, it is." if w == desc.where else f"no, on the {desc.where}."
    if fam == "compare":
        if "brighter" in prompt:
            return "yes, brighter." if desc.tone == "bright" else "no, it is darker."
        if "darker" in prompt:
            return "yes, darker." if desc.tone == "dark" else "no, it is brighter."
        limit = {"one": 1, "two": 2}
        for word, m in limit.items():
            if f"more than {word}?" in prompt:
                return f"yes, {_NUM[n]}." if n > m else f"no, just {_NUM[n]}."
        if "fewer than three" in prompt:
            return f"yes, {_NUM[n]}." if n < 3 else "no, there are three."
    raise KeyError(prompt)


GROUNDING_PROMPTS = ("box the shapes.", "ground them.", "give boxes.", "mark the shapes.")
OUTLINE_PROMPTS = ("outline the shapes.", "trace them.", "give outlines.")


def _grounding_answer(centres, quad: bool) -> list[int]:
    out: list[int] = []
    for cy, cx in centres:
        if quad:
            out += [M.QUAD_START] + M.encode(f"{cy - 2},{cx - 2},{cy + 2},{cx + 2}") + [M.IM_END]
        else:
            out += [M.BOX_START] + M.encode(f"{cy},{cx}") + [M.BOX_END]
    return out + [EOS]


def _dither(pixels: np.ndarray, amp: float) -> np.ndarray:
    """Processed features of ``pixels`` overlaid with a pixel checkerboard of ``amp``."""
    checker = np.indices(pixels.shape).sum(axis=0) % 2 * 2.0 - 1.0
    return np.clip(M.process_image(ImageSpec(pixels)) + amp * (
        M.process_image(ImageSpec((checker + 1) / 2))), -1.0, 1.0)


FILLER_TOKENS = (BOS, M.IM_START, M.IM_END, M.BOX_START, M.BOX_END, M.QUAD_START)


def synthesize_corpus(size: int, seed: int, multi_turn: float = 0.25,
                      grounding: float = 0.15, filler: float = 0.15,
                      max_filler: int = 120) -> list[M.TrainExample]:
    """Pretraining rows for random scenes.

    Most rows are one guiding-family question with its reference answer.
    The rest exercise the special tokens the way a chat VLM sees them:
    several turns packed into one row (next turn opened by BOS or
    IM_START), box/outline answers wrapped in BOX_*/QUAD_START/IM_END, and, for
    dithered images, answers trailed by a run of one control token before
    EOS (degenerate output on corrupted input). Only
    answers, EOS and turn openers are targets.
    """
    rng = np.random.default_rng(seed)
    pool = template_pool()
    flat = [p for fam in FAMILIES for p in pool[fam]]
    out = []
    while len(out) < size:
        desc = random_descriptor(rng)
        pixels, centres = render_scene(desc, rng, with_centres=True)
        feats = M.process_image(ImageSpec(pixels))
        u = rng.random()
        if u < grounding:
            quad = rng.random() < 0.4
            texts = OUTLINE_PROMPTS if quad else GROUNDING_PROMPTS
            prompt = prompt_ids(texts[int(rng.integers(len(texts)))])
            out.append(M.TrainExample.single_turn(feats, prompt, _grounding_answer(centres, quad)))
            continue
        if u < grounding + filler:
            text = flat[int(rng.integers(len(flat)))]
            tok = FILLER_TOKENS[int(rng.integers(len(FILLER_TOKENS)))]
            run = [tok] * int(rng.integers(1, max_filler + 1))
            noisy = _dither(pixels, rng.uniform(0.1, 0.3) * rng.choice((-1.0, 1.0)))
            caption = M.encode(reference_answer(desc, text))
            out.append(M.TrainExample.single_turn(noisy, prompt_ids(text), caption + run + [EOS]))
            # the same question on the clean image stops normally, so the
            # text alone never predicts the tail
            out.append(M.TrainExample.single_turn(feats, prompt_ids(text), caption + [EOS]))
            continue
        turns = 1 + int(rng.integers(1, 3)) if u < grounding + filler + multi_turn else 1
        tokens: list[int] = []
        mask: list[int] = []
        for t in range(turns):
            text = flat[int(rng.integers(len(flat)))]
            body = M.encode(text)
            if t == 0:
                opener = [BOS]
                opener_mask = [0]
            else:
                opener = [BOS] if rng.random() < 0.5 else [M.IM_START]
                opener_mask = [1]
            answer = M.encode(reference_answer(desc, text)) + [EOS]
            tokens += opener + body + answer
            mask += opener_mask + [0] * len(body) + [1] * len(answer)
        out.append(M.TrainExample(feats, tokens, mask))
    return out[:size]


# -- responses / dataset ------------------------------------------------------------------------


@dataclass
class PromptResponsePair:
    prompt_tokens: list[int]
    response_tokens: list[int]

    def __post_init__(self):
        if not self.prompt_tokens:
            raise ValueError("prompt must be non-empty")
        if not self.response_tokens or self.response_tokens[-1] != EOS:
            raise ValueError("response must end with EOS")

    @property
    def K(self) -> int:
        return len(self.response_tokens)


@dataclass
class GuidingDataset:
    image_id: str
    pairs: list[PromptResponsePair]
    opt_idx: list[int] = field(default_factory=list)
    test_idx: list[int] = field(default_factory=list)

    @property
    def optimization(self) -> list[PromptResponsePair]:
        return [self.pairs[i] for i in self.opt_idx]

    @property
    def testing(self) -> list[PromptResponsePair]:
        return [self.pairs[i] for i in self.test_idx]

    def mean_k(self) -> float:
        return float(np.mean([p.K for p in self.pairs]))


def capture_responses(params: M.ToyVlmParams, image: ImageSpec, prompts: Sequence[Sequence[int]],
                      cap: int = 48, generate_fn=None) -> list[PromptResponsePair]:
    """Greedy responses on the clean image, truncated to ``cap`` tokens (EOS-terminated)."""
    feats = M.process_image(image)
    w = params.tensors()
    cfg = M.GenerationConfig(max_new_tokens=cap)
    out = []
    for p in prompts:
        if generate_fn is not None:
            toks = list(generate_fn(p))
        else:
            toks = M.generate(params, feats, p, cfg, weights=w).tokens
        if EOS in toks:
            toks = toks[:toks.index(EOS) + 1]
        if len(toks) > cap or not toks or toks[-1] != EOS:
            toks = toks[:cap - 1] + [EOS]
        if any(M.is_special(t) for t in toks[:-1]):
            raise ValueError(f"clean response contains special tokens: {M.decode(toks)!r}")
        out.append(PromptResponsePair(list(p), toks))
    return out


def split_dataset(pairs: Sequence[PromptResponsePair], seed: int, image_id: str = "",
                  n_opt: int = 40, n_test: int = 20) -> GuidingDataset:
    if len(pairs) != n_opt + n_test:
        raise ValueError(f"expected {n_opt + n_test} pairs, got {len(pairs)}")
    perm = np.random.default_rng(seed).permutation(len(pairs))
    return GuidingDataset(image_id, list(pairs), sorted(int(i) for i in perm[:n_opt]),
                          sorted(int(i) for i in perm[n_opt:]))


def build_dataset(params: M.ToyVlmParams, image: ImageSpec, seed: int,
                  n: int = 60, cap: int = 48) -> GuidingDataset:
    texts = generate_prompts(n=n, seed=seed)
    pairs = capture_responses(params, image, [prompt_ids(t) for t in texts], cap=cap)
    return split_dataset(pairs, seed, image_id=image.image_id)


def dataset_lines(ds: GuidingDataset) -> list[str]:
    test = set(ds.test_idx)
    return [json.dumps({"image_id": ds.image_id, "prompt_ids": p.prompt_tokens,
                        "response_ids": p.response_tokens,
                        "split": "test" if i in test else "opt"})
            for i, p in enumerate(ds.pairs)]


def write_datasets(datasets: Sequence[GuidingDataset], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ds in datasets:
            for line in dataset_lines(ds):
                fh.write(line + "\n")


def read_datasets(path) -> list[GuidingDataset]:
    by_image: dict[str, GuidingDataset] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            ds = by_image.setdefault(row["image_id"], GuidingDataset(row["image_id"], []))
            idx = len(ds.pairs)
            ds.pairs.append(PromptResponsePair(row["prompt_ids"], row["response_ids"]))
            (ds.test_idx if row["split"] == "test" else ds.opt_idx).append(idx)
    return list(by_image.values())


def dataset_hash(ds: GuidingDataset) -> str:
    return hashlib.sha256("\n".join(dataset_lines(ds)).encode()).hexdigest()
