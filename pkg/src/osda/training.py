"""Phased training schedule: pretrain, extract, optional GAN, fine-tune.

One logical thread owns the model.  Batches are drawn iid with replacement
each iteration from named RNG streams, which makes runs bit-reproducible
and lets a boundary checkpoint capture the full sampling state for exact
resume.
"""

import copy
import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses, mining
from .data import SOURCE, TARGET
from .models import build_model, save_checkpoint
from .strategies import (AugmentConfig, AugmentProvider, GanConfig,
                         GenerationProvider, OriginalProvider, gan_train,
                         save_gan_checkpoint)

log = logging.getLogger(__name__)

STRATEGIES = ("baseline", "original", "augmentation", "generation")
STREAM_NAMES = ("init", "data_source", "data_target", "provider", "gan")

LOSS_COLUMNS = ("closed_ce", "ova_hncs", "ent_min", "neg_constraint",
                "gen_ent", "gen_agree")


@dataclass
class TrainPlan:
    """Hyperparameter block for one run; defaults follow the full-scale
    recipe, iteration counts included."""

    strategy: str = "baseline"
    pretrain_iters: int = 5000
    finetune_iters: int = 5000
    gan_iters: int | None = None   # None resolves by strategy (1000 / 0)
    batch_size: int = 36
    lr_new: float = 0.01
    lr_pretrained: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_gamma: float = 10.0
    lr_decay_power: float = 0.75
    lambda_neg: float = 0.1
    w_entropy_min: float = 0.1
    threshold: float = 0.9
    seed: int = 0
    extractor: str = "auto"
    feature_dim: int = 32
    hidden_dim: int = 64
    hardest_only: bool = True
    freeze_closed_in_finetune: bool = False
    reextract_every: int = 0       # 0 = extract once at the boundary
    gen_mix_pristine: float = 0.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    gan: GanConfig = field(default_factory=GanConfig)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError("unknown strategy %r (choose from %s)"
                             % (self.strategy, ", ".join(STRATEGIES)))
        if min(self.pretrain_iters, self.finetune_iters) < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.lr_new <= 0 or self.lr_pretrained <= 0:
            raise ValueError("learning rates must be > 0")
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if isinstance(self.gan, dict):
            self.gan = GanConfig(**self.gan)

    @property
    def resolved_gan_iters(self):
        if self.gan_iters is not None:
            return self.gan_iters if self.strategy == "generation" else 0
        return 1000 if self.strategy == "generation" else 0

    def weights(self):
        return losses.LossWeights(lambda_neg=self.lambda_neg,
                                  w_entropy_min=self.w_entropy_min,
                                  w_gen_ent=self.gan.w_gen_ent,
                                  w_gen_agree=self.gan.w_gen_agree)


class RngBundle:
    """Independent named RNG streams derived from one master seed."""

    def __init__(self, seed):
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        children = ss.spawn(len(STREAM_NAMES))
        self._seeds = {name: int(child.generate_state(1, np.uint32)[0])
                       for name, child in zip(STREAM_NAMES, children)}
        self._generators = {}

    def child_seed(self, name):
        return self._seeds[name]

    def generator(self, name):
        if name not in self._generators:
            g = torch.Generator()
            g.manual_seed(self._seeds[name])
            self._generators[name] = g
        return self._generators[name]

    def state_dict(self):
        return {name: g.get_state()
                for name, g in self._generators.items()}

    def load_state_dict(self, states):
        for name, state in states.items():
            self.generator(name).set_state(state)


def seed_everything(seed):
    return RngBundle(seed)


def make_optimizer(model, plan, total_iters):
    """SGD with momentum and weight decay; pretrained backbones get the
    lower rate; inverse-decay schedule over the total iteration budget."""
    backbone_lr = (plan.lr_pretrained
                   if getattr(model.extractor, "pretrained", False)
                   else plan.lr_new)
    groups = [
        {"params": list(model.extractor.parameters()), "lr": backbone_lr},
        {"params": (list(model.closed_head.parameters())
                    + list(model.open_head.parameters())),
         "lr": plan.lr_new},
    ]
    covered = sum(len(g["params"]) for g in groups)
    if covered != len(list(model.parameters())):
        raise ValueError("model has parameters outside the known "
                         "extractor/head groups")
    opt = torch.optim.SGD(groups, momentum=plan.momentum,
                          weight_decay=plan.weight_decay)
    total = max(total_iters, 1)

    def factor(step):
        return (1.0 + plan.lr_decay_gamma * step / total) \
            ** (-plan.lr_decay_power)

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda=factor)
    return opt, sched


@dataclass
class RunRecord:
    """Everything one run produced, in phase order."""

    plan: TrainPlan
    curves: list = field(default_factory=list)   # per-iteration loss rows
    extraction: dict | None = None
    gan_history: list | None = None
    fallback_to_baseline: bool = False
    wall_clock: dict = field(default_factory=dict)
    checkpoint_path: str | None = None
    model: object = None
    negatives: object = None
    gan: object = None
    resumed: bool = False

    def phase_rows(self, phase):
        return [r for r in self.curves if r["phase"] == phase]


def _loss_row(it, phase, **components):
    row = {"iter": it, "phase": phase}
    for name in LOSS_COLUMNS:
        row[name] = float(components.get(name, 0.0))
    row["total"] = float(sum(row[name] for name in LOSS_COLUMNS))
    return row


def write_loss_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "phase"] + list(LOSS_COLUMNS) + ["total"])
        for r in rows:
            w.writerow([r["iter"], r["phase"]]
                       + ["%.8g" % r[c] for c in LOSS_COLUMNS]
                       + ["%.8g" % r["total"]])


def _make_provider(plan, negs, gan_state, bundle):
    if plan.strategy == "original":
        return OriginalProvider(negs, seed=bundle.child_seed("provider"))
    if plan.strategy == "augmentation":
        cfg = dataclasses.replace(plan.augment,
                                  seed=bundle.child_seed("provider"))
        return AugmentProvider(negs, cfg)
    if plan.strategy == "generation":
        return GenerationProvider(gan_state,
                                  seed=bundle.child_seed("provider"),
                                  pristine=negs,
                                  mix_pristine=plan.gen_mix_pristine)
    return None


def _check_datasets(source, target):
    if source.domain_tag != SOURCE or target.domain_tag != TARGET:
        raise ValueError("run() expects (source, target) domain datasets")
    if source.labels is None:
        raise ValueError("source must be labeled (run relabel_for_training)")
    if target.labels is not None:
        raise ValueError("target labels must be hidden "
                         "(run relabel_for_training)")


def run(plan, source, target, out_dir=None, stop_after=None,
        resume_from=None):
    """Execute the phased schedule and return a RunRecord.

    `stop_after="extract"` (or "gan") halts at the phase boundary after
    writing a resumable checkpoint to out_dir; `resume_from` continues a
    halted run.  Baseline runs extraction too (diagnostics only) so
    matched-control comparisons line up phase for phase.
    """
    _check_datasets(source, target)
    num_known = len(source.class_names)
    total_model_iters = plan.pretrain_iters + plan.finetune_iters
    weights = plan.weights()
    record = RunRecord(plan=plan)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    bundle = seed_everything(plan.seed)
    torch.manual_seed(bundle.child_seed("init"))
    model = build_model(plan.extractor, source.sample_shape, num_known,
                        feature_dim=plan.feature_dim,
                        hidden_dim=plan.hidden_dim)
    opt, sched = make_optimizer(model, plan, total_model_iters)

    src_labels = source.label_tensor()
    g_src = bundle.generator("data_source")
    g_tgt = bundle.generator("data_target")

    negs = None
    gan_state = None
    start_phase = "pretrain"
    global_iter = 0

    if resume_from is not None:
        payload = torch.load(resume_from, map_location="cpu",
                             weights_only=False)
        if payload.get("plan_fingerprint") != _plan_fingerprint(plan):
            raise ValueError("resume checkpoint was written by a different "
                             "plan/seed")
        model.load_state_dict(payload["model"])
        opt.load_state_dict(payload["optimizer"])
        sched.load_state_dict(payload["scheduler"])
        bundle.load_state_dict(payload["rng_streams"])
        torch.set_rng_state(payload["torch_rng"])
        negs = payload["negatives"]
        if negs is not None:
            negs.data = (target.data[negs.indices].clone() if negs.indices
                         else torch.empty((0,) + target.sample_shape))
        if payload.get("gan") is not None:
            from .strategies import build_gan_nets

            g, d, arch = build_gan_nets(payload["gan"]["sample_shape"],
                                        payload["gan"]["latent_dim"])
            g.load_state_dict(payload["gan"]["generator"])
            d.load_state_dict(payload["gan"]["discriminator"])
            from .strategies import GanState

            gan_state = GanState(g, d, payload["gan"]["latent_dim"],
                                 tuple(payload["gan"]["sample_shape"]), arch)
        start_phase = payload["next_phase"]
        global_iter = payload["iteration"]
        record.resumed = True
        record.extraction = payload.get("extraction")

    def draw(dataset_len, generator):
        return torch.randint(dataset_len, (plan.batch_size,),
                             generator=generator)

    def train_iterations(phase, count, provider):
        nonlocal global_iter
        t0 = time.perf_counter()
        for _ in range(count):
            src_idx = draw(len(source), g_src)
            tgt_idx = draw(len(target), g_tgt)
            x_s, y_s = source.data[src_idx], src_labels[src_idx]
            x_t = target.data[tgt_idx]

            feats_s = model.features(x_s)
            l_ce = losses.closed_ce(model.closed_probs(feats_s), y_s)
            l_hncs = losses.ova_hard_negative(
                model.open_known_probs(feats_s), y_s,
                hardest_only=plan.hardest_only)
            feats_t = model.features(x_t)
            l_ent = losses.open_entropy_min(model.open_known_probs(feats_t))

            total = (losses.total_source_loss(l_ce, l_hncs)
                     + losses.total_target_loss(l_ent, weights))
            comps = {"closed_ce": float(l_ce.detach()),
                     "ova_hncs": float(l_hncs.detach()),
                     "ent_min": weights.w_entropy_min * float(l_ent.detach())}
            if provider is not None and plan.lambda_neg != 0.0:
                x_neg = provider.next_batch(plan.batch_size)
                l_neg = losses.negative_constraint(
                    model.open_known_probs(model.features(x_neg)))
                total = total + losses.total_negative_loss(l_neg, weights)
                comps["neg_constraint"] = (weights.lambda_neg
                                           * float(l_neg.detach()))
            elif provider is not None:
                # lambda 0: still consume the provider stream so the run is
                # an exact iteration-matched control of the weighted run.
                provider.next_batch(plan.batch_size)

            losses.check_finite("total", total)
            opt.zero_grad()
            total.backward()
            opt.step()
            sched.step()

            record.curves.append(_loss_row(global_iter, phase, **comps))
            global_iter += 1
            if global_iter % 100 == 0:
                log.info("phase=%s iter=%d %s", phase, global_iter,
                         " ".join("%s=%.4f" % (k, record.curves[-1][k])
                                  for k in ("closed_ce", "ova_hncs",
                                            "ent_min", "neg_constraint")))
        record.wall_clock[phase] = (record.wall_clock.get(phase, 0.0)
                                    + time.perf_counter() - t0)

    def boundary_checkpoint(next_phase):
        if out_dir is None:
            return None
        path = out_dir / "boundary.pt"
        payload = {
            "plan_fingerprint": _plan_fingerprint(plan),
            "model": model.state_dict(),
            "optimizer": opt.state_dict(),
            "scheduler": sched.state_dict(),
            "rng_streams": bundle.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "negatives": _strip_negs(negs),
            "gan": None if gan_state is None else {
                "latent_dim": gan_state.latent_dim,
                "sample_shape": tuple(gan_state.sample_shape),
                "generator": gan_state.generator.state_dict(),
                "discriminator": gan_state.discriminator.state_dict(),
            },
            "extraction": record.extraction,
            "next_phase": next_phase,
            "iteration": global_iter,
        }
        torch.save(payload, path)
        return str(path)

    # Phase 1: pretrain
    if start_phase == "pretrain":
        train_iterations("pretrain", plan.pretrain_iters, provider=None)
        start_phase = "extract"

    # Phase 2: extraction (all strategies; diagnostics for baseline)
    if start_phase == "extract":
        t0 = time.perf_counter()
        snapshot = copy.deepcopy(model).eval()
        negs = mining.extract_negatives(snapshot, target,
                                        threshold=plan.threshold,
                                        source_iteration=global_iter)
        record.extraction = {"count": len(negs),
                             "threshold": plan.threshold,
                             "source_iteration": global_iter}
        record.wall_clock["extract"] = time.perf_counter() - t0
        log.info("extracted %d negatives at threshold %.2f", len(negs),
                 plan.threshold)
        if out_dir is not None:
            mining.save_manifest(negs, out_dir / "negatives.csv")
            try:
                stats = mining.rejection_score_stats(snapshot, target)
                mining.save_stats_csv(stats, out_dir / "rejection_stats.csv")
            except ValueError:
                pass  # target without hidden labels: diagnostic unavailable
        record.checkpoint_path = boundary_checkpoint("gan")
        if stop_after == "extract":
            record.negatives = negs
            record.model = model
            return record
        start_phase = "gan"

    # Phase 3: GAN (generation strategy only)
    if start_phase == "gan":
        if (plan.strategy == "generation" and plan.resolved_gan_iters > 0
                and gan_state is None and len(negs) > 0):
            t0 = time.perf_counter()
            gan_cfg = dataclasses.replace(
                plan.gan, iterations=plan.resolved_gan_iters,
                seed=bundle.child_seed("gan"))
            snapshot = copy.deepcopy(model).eval()
            gan_state = gan_train(negs, snapshot, gan_cfg)
            record.gan_history = gan_state.history
            record.wall_clock["gan"] = time.perf_counter() - t0
            for row in gan_state.history:
                record.curves.append(_loss_row(
                    row["iter"], "gan", gen_ent=row["gen_ent"],
                    gen_agree=row["gen_agree"]))
            if out_dir is not None:
                save_gan_checkpoint(out_dir / "gan.pt", gan_state)
        record.checkpoint_path = boundary_checkpoint("finetune") \
            or record.checkpoint_path
        if stop_after == "gan":
            record.negatives = negs
            record.model = model
            record.gan = gan_state
            return record
        start_phase = "finetune"

    # Phase 4: fine-tune, with the negative constraint for non-baseline
    provider = None
    if plan.strategy != "baseline":
        if len(negs) == 0:
            log.warning("empty negative set: falling back to baseline "
                        "continuation for strategy %r", plan.strategy)
            record.fallback_to_baseline = True
        else:
            provider = _make_provider(plan, negs, gan_state, bundle)
    if plan.freeze_closed_in_finetune:
        for p in model.closed_head.parameters():
            p.requires_grad_(False)
    if plan.reextract_every > 0 and plan.strategy in ("original",
                                                      "augmentation"):
        done = 0
        while done < plan.finetune_iters:
            chunk = min(plan.reextract_every, plan.finetune_iters - done)
            train_iterations("finetune", chunk, provider)
            done += chunk
            if done < plan.finetune_iters:
                snapshot = copy.deepcopy(model).eval()
                negs = mining.extract_negatives(
                    snapshot, target, threshold=plan.threshold,
                    source_iteration=global_iter)
                if len(negs) > 0:
                    provider = _make_provider(plan, negs, gan_state, bundle)
    else:
        train_iterations("finetune", plan.finetune_iters, provider)

    record.negatives = negs
    record.model = model
    record.gan = gan_state
    if out_dir is not None:
        write_loss_csv(record.curves, out_dir / "losses.csv")
        final = out_dir / "checkpoint.pt"
        save_checkpoint(final, model, seed=plan.seed, iteration=global_iter)
        record.checkpoint_path = str(final)
    return record


def _strip_negs(negs):
    if negs is None:
        return None
    clone = copy.copy(negs)
    clone.data = None  # re-derived from the target dataset on resume
    return clone


def _plan_fingerprint(plan):
    d = dataclasses.asdict(plan)
    return json.dumps(d, sort_keys=True, default=str)
