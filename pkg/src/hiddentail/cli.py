"""Command line: prepare, craft, eval, ablate.

Every command reads one JSON config and writes into ``<out>/run-<hash>``,
where ``<hash>`` digests the resolved config. Outputs are write-once: an
existing file is left alone if its bytes already match and is an error
otherwise.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import attack as A
from . import dataprep as D
from . import harness as H
from . import model as M
from . import report as R
from .config import RunConfig, ValidationError, load_config, full_vs_desk, resolve_checkpoint

logger = logging.getLogger("hiddentail")

STUDIES = ("losses", "tokens", "decode", "transfer")


class OutputConflict(RuntimeError):
    pass


def write_once(path: Path, data: bytes | str) -> None:
    body = data.encode() if isinstance(data, str) else data
    if path.exists():
        if path.read_bytes() != body:
            raise OutputConflict(f"{path} exists with different content")
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(body)
    tmp.replace(path)


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# -- run context ---------------------------------------------------------------------------


@dataclass
class Run:
    cfg: RunConfig
    root: Path

    @classmethod
    def open(cls, cfg: RunConfig, out: str | None = None) -> "Run":
        run = cls(cfg, cfg.run_dir(out))
        run.root.mkdir(parents=True, exist_ok=True)
        write_once(run.root / "config.resolved.json", cfg.canonical_json() + "\n")
        return run

    @property
    def dataset_path(self) -> Path:
        return self.root / "dataset.jsonl"

    @property
    def model_path(self) -> Path:
        return self.root / "model_a.htvlm"

    def craft_dir(self) -> Path:
        return self.root / "craft"

    def images(self) -> list[tuple[M.ImageSpec, D.Descriptor]]:
        return D.synthesize_images(self.cfg.data.n_images, self.cfg.seeds.data)

    def model_a(self) -> M.ToyVlmParams:
        if not self.model_path.exists():
            raise ValidationError(f"{self.model_path} missing; run prepare first")
        return M.load_checkpoint(self.model_path)

    def datasets(self) -> dict[str, D.GuidingDataset]:
        if not self.dataset_path.exists():
            raise ValidationError(f"{self.dataset_path} missing; run prepare first")
        return {ds.image_id: ds for ds in D.read_datasets(self.dataset_path)}


def obtain_model(cfg: RunConfig, ref: str | None, seed: int) -> M.ToyVlmParams:
    """Load the referenced checkpoint, or pretrain one from ``seed``."""
    if ref is not None:
        params = M.load_checkpoint(resolve_checkpoint(ref))
        if params.seed != seed:
            raise ValidationError(f"checkpoint {ref} was initialised from seed {params.seed}, "
                                  f"config asks for {seed}")
        if vars(params.dims) != vars(cfg.model):
            raise ValidationError(f"checkpoint {ref} dims differ from [model]")
        return params
    logger.info("pretraining seed %d for %d steps", seed, cfg.pretrain.steps)
    corpus = D.synthesize_corpus(cfg.pretrain.corpus_size, cfg.corpus_seed())
    return M.pretrain_toy(M.init_params(seed, cfg.model), corpus, cfg=cfg.pretrain_config())


def _print_banner(cfg: RunConfig, command: str, root: Path) -> None:
    print(f"# {command}: run directory {root}", file=sys.stderr)
    print("# key, full-scale value, this run", file=sys.stderr)
    for key, full, desk in full_vs_desk(cfg):
        print(f"#   {key}: {full:g} / {desk:g}", file=sys.stderr)


# -- prepare ---------------------------------------------------------------------------------


def _prepare_one(args) -> D.GuidingDataset:
    cfg, params, index, image, desc = args
    seed = cfg.image_data_seed(index)
    texts = D.generate_prompts(desc, n=cfg.data.n_prompts, seed=seed)
    pairs = D.capture_responses(params, image, [D.prompt_ids(t) for t in texts],
                                cap=cfg.data.response_cap)
    return D.split_dataset(pairs, seed, image.image_id, cfg.data.n_opt, cfg.data.n_test)


def cmd_prepare(cfg: RunConfig, out: str | None = None, jobs: int = 1) -> int:
    run = Run.open(cfg, out)
    _print_banner(cfg, "prepare", run.root)
    params = obtain_model(cfg, cfg.pretrain.checkpoint, cfg.seeds.model)
    tmp = run.root / "model_a.htvlm.tmp"
    M.save_checkpoint(params, tmp)
    body = tmp.read_bytes()
    tmp.unlink()
    write_once(run.model_path, body)
    items = [(cfg, params, i, img, desc) for i, (img, desc) in enumerate(run.images())]
    datasets = _map(_prepare_one, items, jobs)
    lines = [line for ds in datasets for line in D.dataset_lines(ds)]
    write_once(run.dataset_path, "".join(line + "\n" for line in lines))
    n_pairs = sum(len(ds.pairs) for ds in datasets)
    mean_k = float(np.mean([p.K for ds in datasets for p in ds.pairs]))
    print(f"images={len(datasets)} pairs={n_pairs} "
          f"opt={sum(len(ds.opt_idx) for ds in datasets)} "
          f"test={sum(len(ds.test_idx) for ds in datasets)} mean_K={mean_k:.4f}")
    return 0


# -- craft -----------------------------------------------------------------------------------


def _state_dump(state: A.CraftState, trace: Sequence[A.TraceRow]) -> str:
    rows = [[r.step] + [float(getattr(r, f)).hex() for f in _ROW_FLOATS] for r in trace]
    return json.dumps({"state": json.loads(state.to_json()), "trace": rows}, sort_keys=True)


_ROW_FLOATS = A.TraceRow.CSV_FIELDS[1:] + ("delta_linf",)


def _state_load(text: str) -> tuple[A.CraftState, list[A.TraceRow]]:
    d = json.loads(text)
    state = A.CraftState.from_json(json.dumps(d["state"]))
    trace = []
    for row in d["trace"]:
        vals = dict(zip(_ROW_FLOATS, (float.fromhex(v) for v in row[1:])))
        trace.append(A.TraceRow(step=row[0], **vals))
    return state, trace


def _trace_csv(trace: Sequence[A.TraceRow]) -> str:
    return ",".join(A.TraceRow.CSV_FIELDS) + "\n" + "".join(r.csv_row() + "\n" for r in trace)


def craft_image(run: Run, params: M.ToyVlmParams, index: int, image: M.ImageSpec,
                dataset: D.GuidingDataset, stop_after: int | None = None) -> tuple[str, str]:
    """Craft one image, resuming from its state file when present.

    Returns ``(image_id, status)`` with status ``done``, ``paused`` or an
    error message.
    """
    cfg = run.cfg
    acfg = replace(cfg.attack, seed=cfg.image_attack_seed(index))
    cdir = run.craft_dir()
    cdir.mkdir(parents=True, exist_ok=True)
    state_path = cdir / f"{image.image_id}.state.json"
    state, trace = None, []
    if state_path.exists():
        state, trace = _state_load(state_path.read_text())
        logger.info("%s: resuming at step %d", image.image_id, state.step)
    every = cfg.checkpoint_every or acfg.iterations
    target = acfg.iterations if stop_after is None else min(stop_after, acfg.iterations)
    done = state.step if state else 0
    pert = None
    try:
        while True:
            nxt = min(done + max(every, 1), target)
            pert = A.craft(params, image, dataset, acfg, resume=state, stop_after=nxt)
            trace += pert.trace
            state, done = pert.state, nxt
            if cfg.checkpoint_every or stop_after is not None:
                state_path.write_text(_state_dump(state, trace))
            if done >= target:
                break
    except A.CraftingError as err:
        trace += err.trace
        (cdir / f"{image.image_id}.trace.failed.csv").write_text(_trace_csv(trace))
        return image.image_id, f"aborted: {err}"
    if done < acfg.iterations:
        return image.image_id, "paused"
    pert = replace(pert, trace=trace, iterations=acfg.iterations)
    x = M.process_image(image)
    # success rate on the optimisation prompts, stored with the artifact
    train_view = replace(dataset, test_idx=list(dataset.opt_idx))
    on_train = H.evaluate(params, x + pert.delta, train_view, cfg.generation_config())
    extra = {"image_index": index, "asr_train": H.aggregate(on_train).asr}
    tmp = cdir / f"{image.image_id}.htadv.tmp"
    A.save_perturbation(pert, x, tmp, extra=extra)
    body = tmp.read_bytes()
    tmp.unlink()
    write_once(cdir / f"{image.image_id}.htadv", body)
    write_once(cdir / f"{image.image_id}.trace.csv", _trace_csv(trace))
    if trace:
        R.plot_trace(trace, cdir / f"{image.image_id}.trace.png")
    return image.image_id, "done"


def _craft_job(args):
    return craft_image(*args)


def cmd_craft(cfg: RunConfig, out: str | None = None, jobs: int = 1,
              stop_after: int | None = None) -> int:
    run = Run.open(cfg, out)
    _print_banner(cfg, "craft", run.root)
    params = run.model_a()
    datasets = run.datasets()
    items = []
    for i, (img, _) in enumerate(run.images()):
        if img.image_id not in datasets:
            raise ValidationError(f"dataset has no rows for {img.image_id}")
        items.append((run, params, i, img, datasets[img.image_id], stop_after))
    failed = 0
    for image_id, status in _map(_craft_job, items, jobs):
        print(f"{image_id}: {status}")
        failed += status not in ("done", "paused")
    return 1 if failed else 0


# -- eval --------------------------------------------------------------------------------


def cmd_eval(cfg: RunConfig, artifacts: Sequence[str] = (), out: str | None = None,
             jobs: int = 1) -> int:
    run = Run.open(cfg, out)
    paths = [Path(p) for p in artifacts] or sorted(run.craft_dir().glob("*.htadv"))
    if not paths:
        raise ValidationError(f"no artifacts given and none under {run.craft_dir()}")
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise ValidationError(f"artifact(s) not found: {', '.join(missing)}")
    _print_banner(cfg, "eval", run.root)
    params = run.model_a()
    datasets = run.datasets()
    images = {img.image_id: img for img, _ in run.images()}
    jobs_in = []
    for p in paths:
        pert, meta, _ = A.load_perturbation(p)
        if pert.image_id not in images or pert.image_id not in datasets:
            raise ValidationError(f"{p}: image {pert.image_id!r} is not part of this run")
        jobs_in.append((params, images[pert.image_id], pert.delta, datasets[pert.image_id],
                        cfg.generation_config(), pert.image_id, True))
    reports = _map(_eval_job, jobs_in, jobs)
    edir = run.root / "eval"
    overall = {}
    for rep in reports:
        write_once(edir / f"{rep.label}.report.csv", rep.to_csv())
        write_once(edir / f"{rep.label}.summary.json", H.dump_summary(rep) + "\n")
        overall[rep.label] = rep.summary()
        a, c = rep.adv_summary, rep.clean_summary
        pix = H.aggregate(rep.pixel).asr if rep.pixel is not None else float("nan")
        print(f"{rep.label}: clean_asr={c.asr:.3f} adv_asr={a.asr:.3f} pixel_asr={pix:.3f} "
              f"clean_len={c.output_length:.2f} adv_len={a.output_length:.2f} "
              f"adv_visible={a.visible_length:.2f} quality={a.quality:.3f}")
        wall = sum(r.wall_seconds for r in rep.clean + rep.adversarial)
        logger.info("%s: wall clock %.1fs (advisory)", rep.label, wall)
    limit = cfg.generation.max_new_tokens
    hists = H.length_distributions(reports, limit)
    write_once(edir / "lengths.csv", H.histograms_csv(hists))
    R.plot_lengths(hists, edir / "lengths.png", limit)
    write_once(edir / "summary.json", json.dumps(overall, sort_keys=True, indent=2) + "\n")
    return 0


def _eval_job(args) -> H.AttackReport:
    params, image, delta, ds, gen, label, pixel = args
    return H.evaluate_perturbation(params, image, delta, ds, gen, label, pixel_path=pixel)


# -- ablate ---------------------------------------------------------------------------------


def _study_delta(run: Run, params, index, image, ds) -> np.ndarray:
    path = run.craft_dir() / f"{image.image_id}.htadv"
    if path.exists():
        return A.load_perturbation(path)[0].delta
    acfg = replace(run.cfg.attack, seed=run.cfg.image_attack_seed(index))
    return A.craft(params, image, ds, acfg).delta


def cmd_ablate(cfg: RunConfig, study: str, out: str | None = None, jobs: int = 1) -> int:
    if study not in STUDIES:
        raise ValidationError(f"unknown study {study!r}; pick one of {STUDIES}")
    if study == "transfer" and cfg.seeds.model_b is None:
        raise ValidationError("transfer study needs seeds.model_b")
    run = Run.open(cfg, out)
    _print_banner(cfg, f"ablate {study}", run.root)
    params = run.model_a()
    datasets = run.datasets()
    index = cfg.ablations.image_index
    image = run.images()[index][0]
    ds = datasets[image.image_id]
    acfg = replace(cfg.attack, seed=cfg.image_attack_seed(index))
    gen = cfg.generation_config()
    if study == "losses":
        reports = H.run_ablation_losses(params, image, ds, acfg, gen)
    elif study == "tokens":
        toks = [M.special_id(n.upper()) for n in cfg.ablations.tokens]
        reports = H.run_ablation_token(params, image, ds, acfg, toks, gen)
    elif study == "decode":
        delta = _study_delta(run, params, index, image, ds)
        lims = cfg.ablations.decode_limits
        strategies = [cfg.generation_config(strategy="greedy", max_new_tokens=lims[0]),
                      cfg.generation_config(strategy="nucleus", top_p=1.0, temperature=1.0,
                                            max_new_tokens=lims[0])]
        strategies += [cfg.generation_config(strategy="greedy", max_new_tokens=n)
                       for n in lims[1:]]
        reports = H.run_ablation_decode(params, image, delta, ds, strategies)
    else:
        delta = _study_delta(run, params, index, image, ds)
        target = obtain_model(cfg, cfg.pretrain.checkpoint_b, cfg.seeds.model_b)
        pairs = D.capture_responses(target, image, [p.prompt_tokens for p in ds.pairs],
                                    cap=cfg.data.response_cap)
        ds_b = D.GuidingDataset(ds.image_id, pairs, list(ds.opt_idx), list(ds.test_idx))
        reports = {f"seed{cfg.seeds.model}": H.run_transfer(delta, image, params, ds, gen,
                                                           f"seed{cfg.seeds.model}"),
                   f"seed{cfg.seeds.model_b}": H.run_transfer(delta, image, target, ds_b, gen,
                                                             f"seed{cfg.seeds.model_b}")}
    adir = run.root / "ablate"
    table = H.comparison_table(reports)
    write_once(adir / f"{study}.csv", table)
    R.plot_comparison(reports, adir / f"{study}.png", study)
    sys.stdout.write(table)
    return 0


# -- entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hiddentail", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run configuration")
    common.add_argument("--jobs", type=int, default=1, help="images processed in parallel")
    common.add_argument("--out", default=None, help="output root (default: config output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("prepare", parents=[common], help="build model and guiding datasets")
    p = sub.add_parser("craft", parents=[common], help="craft one perturbation per image")
    p.add_argument("--stop-after", type=int, default=None,
                   help="pause every image at this step (resume by rerunning)")
    p = sub.add_parser("eval", parents=[common], help="clean vs adversarial evaluation")
    p.add_argument("artifacts", nargs="*", help="perturbation files (default: all crafted)")
    p = sub.add_parser("ablate", parents=[common], help="run one comparison study")
    p.add_argument("study", choices=STUDIES)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config)
        if args.command == "prepare":
            code = cmd_prepare(cfg, args.out, args.jobs)
        elif args.command == "craft":
            code = cmd_craft(cfg, args.out, args.jobs, args.stop_after)
        elif args.command == "eval":
            code = cmd_eval(cfg, args.artifacts, args.out, args.jobs)
        else:
            code = cmd_ablate(cfg, args.study, args.out, args.jobs)
    except (ValidationError, OutputConflict) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    logger.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
