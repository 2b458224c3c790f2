"""Command-line driver.

Every command reads one flat config file (``--config``) plus ``--set key=value``
overrides and works inside ``<run root>/<run.id>``, where the run root is
``run.dir``, else ``$DOLL_RUN_DIR``, else ``./runs``.  Each step records the
config digest it ran with; rerunning it with the same config does nothing
unless ``--force`` is given.

Exit codes: 0 ok, 2 configuration error, 3 missing or corrupt artifact,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import load_config, parse_pairs
from .datagen import generate_corpus, read_corpus, write_corpus
from .doll import AGGREGATIONS, BoostWeights, DoLLMask, Ensemble, generate_dolls, read_doll, write_doll
from .errors import ConfigError, DollError, MissingArtifactError, SchemaMismatchError
from .evaluation import MetricsReport, compare_runs, doll_localization, evaluate_model, positive_fraction
from .experiments import arm_model, donor_classifier, fit_boost_weights, task_arrays, train_ensemble
from .formats import ArtifactHeader, read_json, write_json
from .models import build_segmodel, load_model, save_model
from .plotting import convergence_plot, doll_examples, loss_plot
from .training import Checkpoint, finetune, pretrain

log = logging.getLogger("dollkit")

INITS = ("doll", "scratch", "classifier-backbone")
DEFAULT_ARMS = (("doll", "boosted", True), ("doll", "averaged", True),
                ("scratch", None, False), ("classifier-backbone", None, False))


# config sections each step's outputs depend on
_UPSTREAM = ("corpus", "classifier", "pipeline")
STEP_SECTIONS = {
    "gen-data": ("corpus", "downstream"),
    "train-classifiers": _UPSTREAM,
    "boost-weights": _UPSTREAM,
    "gen-doll": _UPSTREAM + ("seg",),
    "pretrain": _UPSTREAM + ("seg", "pretrain"),
    "finetune": _UPSTREAM + ("seg", "pretrain", "downstream", "finetune"),
    "eval": _UPSTREAM + ("seg", "pretrain", "downstream", "finetune"),
}


def _kind(step):
    return next(k for k in sorted(STEP_SECTIONS, key=len, reverse=True) if step.startswith(k))


def arm_name(init, aggregation, frozen, shots):
    head = f"doll-{aggregation}" if init == "doll" else init
    return f"{head}-{'frozen' if frozen else 'full'}-{shots}shot"


class Run:
    """Paths, stamps and cached artifacts of one run directory."""

    def __init__(self, cfg, force=False):
        self.cfg = cfg
        self.force = force
        self.root = cfg.run_dir()
        self.digest = cfg.digest()
        self._cache = {}

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def need(self, path: Path, what="artifact") -> Path:
        if not path.exists():
            raise MissingArtifactError(path, what)
        return path

    def header(self, kind):
        return ArtifactHeader(kind, self.digest).to_dict()

    def step_digest(self, step) -> str:
        return self.cfg.section_digest(STEP_SECTIONS[_kind(step)])

    def up_to_date(self, step, outputs) -> bool:
        stamp = self.path("stamps", f"{step}.json")
        if self.force or not stamp.exists() or not all(Path(p).exists() for p in outputs):
            return False
        if read_json(stamp).get("step_digest") != self.step_digest(step):
            return False
        log.info("%s: up to date (config %s), use --force to redo", step, self.digest[:12])
        return True

    def require(self, step, hint=None):
        """Fail unless ``step`` ran with a config compatible with the current one."""
        stamp = self.path("stamps", f"{step}.json")
        hint = hint or step
        if not stamp.exists():
            raise MissingArtifactError(stamp, f"output of {step} (run {hint})")
        if read_json(stamp).get("step_digest") != self.step_digest(step):
            raise MissingArtifactError(stamp, f"up-to-date output of {step}; config changed, rerun {hint}")

    def stamp(self, step, outputs):
        self.path("stamps").mkdir(parents=True, exist_ok=True)
        write_json(self.path("stamps", f"{step}.json"),
                   {"step": step, "config_digest": self.digest, "step_digest": self.step_digest(step),
                    "outputs": sorted(str(p) for p in outputs)})

    # --- cached loaders ---------------------------------------------------

    def corpus(self, name="corpus"):
        if name not in self._cache:
            self.need(self.path(name, "corpus.json"), "corpus (run gen-data)")
            self.require("gen-data")
            self._cache[name] = read_corpus(self.path(name), with_gt=True)
        return self._cache[name]

    def ensemble(self) -> Ensemble:
        if "ensemble" not in self._cache:
            self.require("train-classifiers")
            ids = self.cfg.pipeline.model_order()
            models = []
            for mid in ids:
                p = self.need(self.path("classifiers", _fname(mid) + ".ckpt"), "classifier (run train-classifiers)")
                models.append(load_model(p)[0])
            self._cache["ensemble"] = Ensemble(models, ids)
        return self._cache["ensemble"]

    def weights(self) -> BoostWeights:
        p = self.need(self.path("weights.json"), "boost weights (run boost-weights)")
        self.require("boost-weights")
        return BoostWeights.from_dict(read_json(p)["weights"])

    def pretrain_ids(self):
        ids = [s.id for s in self.corpus().split("train")]
        n = self.cfg.seg.pretrain_images
        return ids[:n] if n else ids

    def dolls(self, aggregation, split, ids):
        d = self.path("dolls", aggregation, split)
        self.need(d, f"{aggregation} DoLL labels (run gen-doll --aggregation {aggregation})")
        self.require(f"gen-doll-{aggregation}", f"gen-doll --aggregation {aggregation}")
        return np.stack([read_doll(self.need(d / f"{i}.doll")).planes for i in ids])


def _fname(model_id):
    return model_id.replace("#", "-")


def _images(corpus, split, ids=None):
    x, y, gt = corpus.arrays(split)
    if ids is not None:
        x, y, gt = x[:len(ids)], y[:len(ids)], gt[:len(ids)]
    return x, y, gt


# --- commands -----------------------------------------------------------

def cmd_gen_data(run: Run, args):
    outs = [run.path("corpus", "corpus.json"), run.path("downstream", "corpus.json")]
    if run.up_to_date("gen-data", outs):
        return 0
    cfg = run.cfg
    run.root.mkdir(parents=True, exist_ok=True)
    (run.root / "config.txt").write_text(cfg.dump(), encoding="utf-8")
    corpus = generate_corpus(cfg.corpus, jobs=cfg.run.jobs)
    write_corpus(corpus, run.path("corpus"))
    down = generate_corpus(cfg.downstream.corpus_config(cfg.corpus), jobs=cfg.run.jobs)
    write_corpus(down, run.path("downstream"))
    print(f"corpus     {len(corpus.samples):6d} images  digest {corpus.digest()}")
    print(f"downstream {len(down.samples):6d} images  digest {down.digest()}")
    run.stamp("gen-data", outs)
    return 0


def cmd_train_classifiers(run: Run, args):
    ids = run.cfg.pipeline.model_order()
    outs = [run.path("classifiers", _fname(m) + ".ckpt") for m in ids] + [run.path("classifiers", "auc.json")]
    if run.up_to_date("train-classifiers", outs):
        return 0
    corpus = run.corpus()
    ensemble, aucs = train_ensemble(corpus, run.cfg, log=log.info)
    run.path("classifiers").mkdir(parents=True, exist_ok=True)
    for m, (mid, model) in enumerate(zip(ensemble.ids, ensemble.models)):
        save_model(model, run.path("classifiers", _fname(mid) + ".ckpt"), run.digest,
                   seed=run.cfg.classifier.seed * 1000 + m, extra={"model_id": mid, "val_auc": aucs[mid]})
    names = list(corpus.config.names)
    write_json(run.path("classifiers", "auc.json"),
               {"artifact": run.header("report"), "observations": names, "val_auc": aucs})
    width = max(len(m) for m in ids)
    print("model".ljust(width) + "".join(f"{n:>10}" for n in names) + f"{'mean':>10}")
    for mid in ids:
        print(mid.ljust(width) + "".join(f"{v:10.3f}" for v in aucs[mid]) + f"{np.nanmean(aucs[mid]):10.3f}")
    run.stamp("train-classifiers", outs)
    return 0


def cmd_boost_weights(run: Run, args):
    outs = [run.path("weights.json")]
    if run.up_to_date("boost-weights", outs):
        return 0
    weights = fit_boost_weights(run.ensemble(), run.corpus(), run.cfg)
    write_json(outs[0], {"artifact": run.header("weights"), "weights": weights.to_dict()})
    for w in weights.warnings:
        log.warning(w)
    for mid, row in zip(weights.model_order, weights.values):
        print(mid.ljust(10) + "".join(f"{v:9.4f}" for v in row))
    run.stamp("boost-weights", outs)
    return 0


def cmd_gen_doll(run: Run, args):
    agg = args.aggregation
    step = f"gen-doll-{agg}"
    outs = [run.path("dolls", agg, "quality.json")]
    if run.up_to_date(step, outs):
        return 0
    cfg, corpus = run.cfg, run.corpus()
    ensemble, weights = run.ensemble(), run.weights()
    names = list(corpus.config.names)
    quality = None
    for split in ("train", "val", "test"):
        items = corpus.split(split)
        if split == "train":
            items = items[:len(run.pretrain_ids())]
        x, y, gt = _images(corpus, split, [s.id for s in items])
        planes = generate_dolls(x, ensemble, weights, cfg.pipeline, (agg,))[agg]
        out = run.path("dolls", agg, split)
        out.mkdir(parents=True, exist_ok=True)
        for s, p in zip(items, planes):
            write_doll(DoLLMask(p, names, s.id, run.digest, list(ensemble.ids), agg), out / f"{s.id}.doll")
        log.info("gen-doll: %d %s labels written", len(items), split)
        if split == "test":
            quality = doll_localization(planes, gt, y, seed=cfg.corpus.seed, class_names=names)
            quality["positive_fraction"] = float(positive_fraction(planes).mean())
    write_json(outs[0], {"artifact": run.header("report"), "aggregation": agg, "split": "test",
                         "localization": quality})
    print(f"{agg}: test DoLL IoU {quality['doll_iou']:.4f}  random placement {quality['random_iou']:.4f}"
          f"  ({quality['n']} planes)")
    run.stamp(step, outs)
    return 0


def cmd_pretrain(run: Run, args):
    agg = args.aggregation
    step = f"pretrain-{agg}"
    outs = [run.path("pretrain", f"{agg}.ckpt"), run.path("pretrain", f"{agg}.history.json")]
    if run.up_to_date(step, outs):
        return 0
    cfg, corpus = run.cfg, run.corpus()
    ids = run.pretrain_ids()
    x_tr, _, _ = _images(corpus, "train", ids)
    x_va, _, _ = _images(corpus, "val")
    y_tr = run.dolls(agg, "train", ids)
    y_va = run.dolls(agg, "val", [s.id for s in corpus.split("val")])
    init = build_segmodel(cfg.seg.arch, cfg.corpus.n_observations, cfg.corpus.channels, seed=cfg.pretrain.seed)
    ckpt, hist = pretrain(init, x_tr, y_tr, x_va, y_va, cfg.pretrain, run.digest, log=log.info)
    ckpt.extra = {"aggregation": agg}
    run.path("pretrain").mkdir(parents=True, exist_ok=True)
    ckpt.save(outs[0], seed=cfg.pretrain.seed)
    write_json(outs[1], {"artifact": run.header("report"), "history": hist})
    print(f"{agg}: best epoch {ckpt.step}, val BCE {ckpt.val_metric:.4f}")
    run.stamp(step, outs)
    return 0


def cmd_finetune(run: Run, args):
    cfg = run.cfg
    init, agg = args.init, args.aggregation
    frozen = args.freeze_backbone == "on" if args.freeze_backbone else init == "doll"
    shots = args.shots or cfg.downstream.shots
    if shots > cfg.downstream.shots:
        raise ConfigError("--shots", f"downstream corpus has only {cfg.downstream.shots} training images")
    tasks = cfg.downstream.task_map()
    if args.task:
        unknown = [t for t in args.task if t not in tasks]
        if unknown:
            raise ConfigError("--task", f"unknown task(s) {unknown}; configured: {sorted(tasks)}")
        tasks = {t: tasks[t] for t in args.task}
    arm = arm_name(init, agg, frozen, shots)
    pretrained = donor = None
    for task, obs in tasks.items():
        out = run.path("finetune", task, arm)
        outs = [out / "model.ckpt", out / "history.json"]
        if run.up_to_date(f"finetune-{task}-{arm}", outs):
            continue
        if init == "doll" and pretrained is None:
            p = run.need(run.path("pretrain", f"{agg}.ckpt"), f"pre-trained model (run pretrain --aggregation {agg})")
            run.require(f"pretrain-{agg}", f"pretrain --aggregation {agg}")
            pretrained = Checkpoint.load(p).model
        if init == "classifier-backbone" and donor is None:
            donor = donor_classifier(run.ensemble(), cfg.seg.arch)
        down = run.corpus("downstream")
        x, y = task_arrays(down, "train", obs, cfg.corpus.channels)
        va = task_arrays(down, "val", obs, cfg.corpus.channels)
        fcfg = copy.deepcopy(cfg.finetune)
        fcfg.freeze_backbone = frozen
        model = arm_model(init, len(obs), cfg, cfg.finetune.seed, pretrained, donor)
        ckpt, hist = finetune(model, x[:shots], y[:shots], *va, fcfg, run.digest, log=log.info)
        ckpt.extra = {"task": task, "observations": list(obs), "init": init, "aggregation": agg or "",
                      "frozen": frozen, "shots": shots, "arm": arm}
        out.mkdir(parents=True, exist_ok=True)
        ckpt.save(outs[0], seed=cfg.finetune.seed)
        write_json(outs[1], {"artifact": run.header("report"), "history": hist})
        print(f"{task}/{arm}: best val mIoU {ckpt.val_metric:.4f} at iteration {ckpt.step}")
        run.stamp(f"finetune-{task}-{arm}", outs)
    return 0


def cmd_eval(run: Run, args):
    paths = [Path(p) for p in args.checkpoint] or sorted(run.path("finetune").glob("*/*/model.ckpt"))
    if not paths:
        raise MissingArtifactError(run.path("finetune"), "fine-tuned checkpoints (run finetune)")
    for p in paths:
        out = p.with_name("eval.json")
        step = f"eval-{p.parent.parent.name}-{p.parent.name}"
        if run.up_to_date(step, [out]):
            continue
        ckpt = Checkpoint.load(run.need(p, "checkpoint"))
        down = run.corpus("downstream")
        obs = ckpt.extra["observations"]
        x, gt = task_arrays(down, "test", obs, run.cfg.corpus.channels)
        names = [down.config.names[o] for o in obs]
        rep = evaluate_model(ckpt.model, x, gt, class_names=names,
                             meta={"task": ckpt.extra["task"], "arm": ckpt.extra["arm"],
                                   "corpus_digest": down.digest(), "config_digest": run.digest})
        write_json(out, {"artifact": run.header("report"), "report": rep.to_dict()})
        print(f"{ckpt.extra['task']}/{ckpt.extra['arm']}: test mIoU {rep.miou:.4f}  mAcc "
              f"{rep.aggregates['macc']:.4f}  mDice {rep.aggregates['mdice']:.4f}")
        run.stamp(step, [out])
    return 0


def cmd_report(run: Run, args):
    base = run.root.parent
    run_ids = args.runs or [run.cfg.run.id]
    out = Path(args.out) if args.out else run.path("report")
    digests = {}
    for rid in run_ids:
        meta = base / rid / "corpus" / "corpus.json"
        digests[rid] = read_json(run.need(meta, f"corpus of run {rid}"))["digest"]
    if len(set(digests.values())) > 1:
        raise SchemaMismatchError("runs were generated from different corpora: "
                                  + ", ".join(f"{k}={v[:12]}" for k, v in digests.items()))
    out.mkdir(parents=True, exist_ok=True)
    label = (lambda rid, arm: arm) if len(run_ids) == 1 else (lambda rid, arm: f"{rid}/{arm}")

    by_task = {}
    for rid in run_ids:
        for ev in sorted((base / rid / "finetune").glob("*/*/eval.json")):
            task, arm = ev.parent.parent.name, ev.parent.name
            hist = read_json(run.need(ev.with_name("history.json")))["history"]
            by_task.setdefault(task, ({}, {}))
            by_task[task][0][label(rid, arm)] = MetricsReport.from_dict(read_json(ev)["report"])
            by_task[task][1][label(rid, arm)] = hist
    if not by_task:
        raise MissingArtifactError(base / run_ids[0] / "finetune", "evaluation reports (run eval)")
    for task in sorted(by_task):
        reports, hists = by_task[task]
        comp = compare_runs(reports, hists)
        (out / f"{task}.txt").write_text(comp.table(), encoding="utf-8")
        (out / f"{task}.csv").write_text(comp.csv(), encoding="utf-8")
        convergence_plot(hists, out / f"{task}_convergence", title=task)
        print(f"== {task} (test, %)\n{comp.table()}")

    quality_rows, losses = [], {}
    for rid in run_ids:
        for agg in AGGREGATIONS:
            q = base / rid / "dolls" / agg / "quality.json"
            if q.exists():
                loc = read_json(q)["localization"]
                quality_rows.append((label(rid, agg), loc["doll_iou"], loc["random_iou"], loc["n"]))
            h = base / rid / "pretrain" / f"{agg}.history.json"
            if h.exists():
                losses[label(rid, agg)] = read_json(h)["history"]
    if quality_rows:
        lines = ["aggregation,doll_iou,random_iou,n"] + [f"{a},{d!r},{r!r},{n}" for a, d, r, n in quality_rows]
        (out / "doll_quality.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        print("== DoLL localization (test)")
        for a, d, r, n in quality_rows:
            print(f"{a:24s} IoU {d:.4f}  random {r:.4f}  ratio {d / r if r else float('inf'):.2f}  n={n}")
    if losses:
        loss_plot(losses, out / "pretrain_loss")
    _doll_figure(base / run_ids[0], out)
    log.info("report written to %s", out)
    return 0


def _doll_figure(root: Path, out: Path, n_images: int = 4):
    meta = root / "corpus" / "corpus.json"
    aggs = [a for a in AGGREGATIONS if (root / "dolls" / a / "test").exists()]
    if not meta.exists() or not aggs:
        return
    corpus = read_corpus(root / "corpus", with_gt=True)
    items = [s for s in corpus.split("test") if s.labels.any()][:n_images]
    images = np.stack([s.image[None] for s in items])
    gt = np.stack([s.gt_masks for s in items])
    dolls = {a: np.stack([read_doll(root / "dolls" / a / "test" / f"{s.id}.doll").planes for s in items])
             for a in aggs}
    doll_examples(images, gt, dolls, list(corpus.config.names), out / "doll_examples", [s.id for s in items])


def cmd_pipeline(run: Run, args):
    ns = argparse.Namespace
    cmd_gen_data(run, args)
    cmd_train_classifiers(run, args)
    cmd_boost_weights(run, args)
    for agg in AGGREGATIONS:
        cmd_gen_doll(run, ns(aggregation=agg))
        cmd_pretrain(run, ns(aggregation=agg))
    for init, agg, frozen in DEFAULT_ARMS:
        cmd_finetune(run, ns(init=init, aggregation=agg or "boosted" if init == "doll" else agg,
                             freeze_backbone="on" if frozen else "off", shots=None, task=None))
    cmd_eval(run, ns(checkpoint=[]))
    return cmd_report(run, ns(runs=None, out=None))


def cmd_show_config(run: Run, args):
    sys.stdout.write(run.cfg.dump())
    print(f"# digest {run.digest}\n# run directory {run.root}")
    return 0


# --- argument parsing -----------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="flat key = value config file")
    common.add_argument("--set", "-s", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--force", action="store_true", help="redo steps that are up to date")
    common.add_argument("--jobs", "-j", type=int, help="worker cap (overrides run.jobs)")
    common.add_argument("--quiet", "-q", action="store_true")

    p = argparse.ArgumentParser(prog="dollkit", description="DoLL pseudo-label pre-training pipeline")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, parents=[common], help=help)
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data, "render the synthetic corpus and the downstream task corpus")
    add("train-classifiers", cmd_train_classifiers, "train the weak multi-label classifiers")
    add("boost-weights", cmd_boost_weights, "fit per-model, per-observation boosting weights")
    sp = add("gen-doll", cmd_gen_doll, "write DoLL label files and their quality report")
    sp.add_argument("--aggregation", choices=AGGREGATIONS, default="boosted")
    sp = add("pretrain", cmd_pretrain, "pre-train a segmentation model on DoLL labels")
    sp.add_argument("--aggregation", choices=AGGREGATIONS, default="boosted")
    sp = add("finetune", cmd_finetune, "fine-tune on the few-shot downstream tasks")
    sp.add_argument("--init", choices=INITS, default="doll")
    sp.add_argument("--aggregation", choices=AGGREGATIONS, default="boosted",
                    help="which pre-trained model --init doll starts from")
    sp.add_argument("--freeze-backbone", choices=("on", "off"),
                    help="default: on for --init doll, off otherwise")
    sp.add_argument("--shots", type=int, help="labelled training images (default downstream.shots)")
    sp.add_argument("--task", action="append", help="restrict to one task (repeatable)")
    sp = add("eval", cmd_eval, "test-split metrics for fine-tuned checkpoints")
    sp.add_argument("checkpoint", nargs="*", help="default: every fine-tuned checkpoint of the run")
    sp = add("report", cmd_report, "comparison tables and figures across runs")
    sp.add_argument("runs", nargs="*", help="run ids under the run root (default: run.id)")
    sp.add_argument("--out", help="output directory (default <run>/report)")
    add("pipeline", cmd_pipeline, "every step above with the default arms")
    add("show-config", cmd_show_config, "print the resolved config and its digest")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        overrides = parse_pairs(args.set)
        if args.jobs is not None:
            overrides["run.jobs"] = str(args.jobs)
        cfg = load_config(args.config, overrides)
        torch.set_num_threads(cfg.run.jobs)
        return args.fn(Run(cfg, args.force), args)
    except DollError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
