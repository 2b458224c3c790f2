"""Desk-scale experiment drivers shared by the CLI and the acceptance suite.

One call of :func:`desk_experiment` runs the whole pipeline for one seed:
weak learners, boosting weights, DoLL labels (boosted and averaged), end-to-end
pre-training, and few-shot fine-tuning of four arms per downstream task.
"""
from __future__ import annotations

import copy
import time

import numpy as np

from .config import RunConfig
from .datagen import generate_corpus
from .doll import Ensemble, compute_boost_weights, generate_dolls, threshold_predictions
from .evaluation import doll_localization, evaluate_model, iterations_to_fraction
from .models import (BACKBONE_DONOR, build_segmodel, replace_head, train_classifier,
                     transplant_backbone)
from .training import finetune, pretrain

ARMS = ("doll-boosted-frozen", "doll-averaged-frozen", "scratch-full", "classifier-full")


def reseeded(cfg: RunConfig, seed: int) -> RunConfig:
    """Copy of ``cfg`` with every stochastic component keyed to ``seed``."""
    cfg = copy.deepcopy(cfg)
    cfg.corpus.seed = seed
    cfg.downstream.seed = 1000 + seed
    cfg.classifier.seed = seed
    cfg.pretrain.seed = seed
    cfg.finetune.seed = seed
    return cfg


def train_ensemble(corpus, cfg: RunConfig, log=None):
    models, aucs = [], {}
    for m, model_id in enumerate(cfg.pipeline.model_order()):
        arch = model_id.split("#")[0]
        tcfg = copy.deepcopy(cfg.classifier)
        tcfg.seed = cfg.classifier.seed * 1000 + m
        clf, auc = train_classifier(corpus, arch, tcfg, log=log)
        models.append(clf)
        aucs[model_id] = auc
    return Ensemble(models, cfg.pipeline.model_order()), aucs


def fit_boost_weights(ensemble: Ensemble, corpus, cfg: RunConfig):
    """Boosting weights from the held-out validation split."""
    x, y, _ = corpus.arrays("val")
    preds = threshold_predictions(ensemble.predict(x), cfg.pipeline.prediction_threshold)
    return compute_boost_weights(preds, y, cfg.pipeline.K, ensemble.ids)


def donor_classifier(ensemble: Ensemble, seg_arch: str):
    donor = BACKBONE_DONOR.get(seg_arch)
    for mid, model in zip(ensemble.ids, ensemble.models):
        if mid.split("#")[0] == donor:
            return model
    raise ValueError(f"ensemble has no {donor!r} classifier to donate a {seg_arch} backbone")


def arm_model(init: str, n_out: int, cfg: RunConfig, seed: int, pretrained=None, donor=None):
    """Starting point of one fine-tuning arm: ``doll``, ``scratch`` or ``classifier-backbone``."""
    ch = cfg.corpus.channels
    if init == "doll":
        if pretrained is None:
            raise ValueError("init 'doll' needs a pre-trained segmentation model")
        return replace_head(pretrained, n_out, seed=seed)
    if init == "scratch":
        return build_segmodel(cfg.seg.arch, n_out, ch, seed=seed)
    if init == "classifier-backbone":
        if donor is None:
            raise ValueError("init 'classifier-backbone' needs a donor classifier")
        return transplant_backbone(donor, build_segmodel(cfg.seg.arch, n_out, ch, seed=seed))
    raise ValueError(f"unknown init {init!r}")


# arm -> (init, aggregation, frozen backbone)
ARM_SPECS = {
    "doll-boosted-frozen": ("doll", "boosted", True),
    "doll-averaged-frozen": ("doll", "averaged", True),
    "scratch-full": ("scratch", None, False),
    "classifier-full": ("classifier-backbone", None, False),
}


def task_arrays(corpus, split, obs_ids, channels):
    x, _, gt = corpus.arrays(split, channels)
    return x, gt[:, list(obs_ids)]


def desk_experiment(cfg: RunConfig, seed: int, log=None, transfer: bool = True, keep_arrays: bool = False) -> dict:
    """Corpus, ensemble, DoLL labels, pre-training and the transfer arms for one seed.

    ``keep_arrays`` adds the pre-training inputs and labels under ``"arrays"``.
    """
    cfg = reseeded(cfg, seed)
    say = log or (lambda msg: None)
    t0 = time.time()
    corpus = generate_corpus(cfg.corpus, jobs=cfg.run.jobs)
    ensemble, aucs = train_ensemble(corpus, cfg)
    weights = fit_boost_weights(ensemble, corpus, cfg)
    say(f"seed {seed}: ensemble trained ({time.time() - t0:.0f}s) mean AUC "
        + ", ".join(f"{k}={np.nanmean(v):.3f}" for k, v in aucs.items()))
    aggs = ("boosted", "averaged")

    x_te, y_te, gt_te = corpus.arrays("test")
    test_dolls = generate_dolls(x_te, ensemble, weights, cfg.pipeline, aggs)
    result = {"seed": seed, "aucs": aucs, "weights": weights.to_dict(),
              "localization": {a: doll_localization(test_dolls[a], gt_te, y_te, seed=seed) for a in aggs}}
    say(f"seed {seed}: localization " + ", ".join(
        f"{a} doll={r['doll_iou']:.3f} random={r['random_iou']:.3f}" for a, r in result["localization"].items()))
    if not transfer:
        return result

    x_tr, _, _ = corpus.arrays("train")
    if cfg.seg.pretrain_images:
        x_tr = x_tr[:cfg.seg.pretrain_images]
    x_va, _, _ = corpus.arrays("val")
    train_dolls = generate_dolls(x_tr, ensemble, weights, cfg.pipeline, aggs)
    val_dolls = generate_dolls(x_va, ensemble, weights, cfg.pipeline, aggs)
    C, ch = cfg.corpus.n_observations, cfg.corpus.channels
    pretrained = {}
    for a in aggs:
        init = build_segmodel(cfg.seg.arch, C, ch, seed=seed)
        ckpt, hist = pretrain(init, x_tr, train_dolls[a], x_va, val_dolls[a], cfg.pretrain)
        pretrained[a] = ckpt.model
        result.setdefault("pretrain", {})[a] = hist
    if keep_arrays:
        result["arrays"] = {"x_train": x_tr, "x_val": x_va, "train_dolls": train_dolls, "val_dolls": val_dolls}
    say(f"seed {seed}: pre-training done ({time.time() - t0:.0f}s)")

    down = generate_corpus(cfg.downstream.corpus_config(cfg.corpus), jobs=cfg.run.jobs)
    donor = donor_classifier(ensemble, cfg.seg.arch)
    result["transfer"] = {}
    for task, obs in cfg.downstream.task_map().items():
        tr = task_arrays(down, "train", obs, ch)
        va = task_arrays(down, "val", obs, ch)
        te = task_arrays(down, "test", obs, ch)
        rows = {}
        for arm in ARMS:
            init, agg, frozen = ARM_SPECS[arm]
            fcfg = copy.deepcopy(cfg.finetune)
            fcfg.freeze_backbone = frozen
            model = arm_model(init, len(obs), cfg, seed, pretrained.get(agg), donor)
            ckpt, hist = finetune(model, *tr, *va, fcfg)
            rep = evaluate_model(ckpt.model, *te)
            rows[arm] = {"test_miou": rep.miou, "report": rep.to_dict(), "history": hist,
                         "best_iteration": ckpt.step, "iters_to_90": iterations_to_fraction(hist, 0.9)}
        result["transfer"][task] = rows
        say(f"seed {seed}: task {task} " + ", ".join(f"{k}={v['test_miou']:.3f}" for k, v in rows.items()))
    result["seconds"] = time.time() - t0
    return result
