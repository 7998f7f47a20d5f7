"""Training pipeline: baseline fit, influence measurement, per-layer strategy
annealing with joint loss, fine-tuning, and compaction.

Stage order: ``baseline`` -> ``measure`` (model-wide influence, computed once,
fixing the global threshold and per-layer targets) -> one ``prune:<layer>``
stage per prunable layer from input to output -> ``finetune`` -> compact,
evaluate, report.  A checkpoint is written after every stage, and a run can
resume from any of them; batch order, augmentation, and initialization are
pure functions of (seed, epoch/index), so a resumed run replays exactly.

During a layer's prune stage its gates carry the soft keep probabilities, so
classification gradients flow into the scorer while the sharpness anneal
pushes the probabilities to 0/1.  Afterwards the gates hold the frozen hard
pattern ("false pruning") until compaction physically removes the channels.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pruning
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, write_effective_config
from .data import Dataset, batches, cifar10_dataset, mnist_dataset, synthetic_dataset
from .errors import ConfigError, ConvergenceError, ShapeError
from .influence import (
    ChannelScorer,
    InfluenceMap,
    StrategyState,
    binarize,
    capture_influence,
    channel_influence,
    ema_merge,
    micro_conv_score,
    scaled_sigmoid,
    scorer_gradients,
)
from .layers import sgd_step, softmax_cross_entropy
from .metrics import RunReport, count_flops
from .models import Model, build_model
from .pruning import (
    CompressionPlan,
    SharpnessSchedule,
    build_plan,
    has_converged,
    lambda_value,
    strategy_loss,
)

log = logging.getLogger("maskprune")


@dataclass
class Phase:
    """One planned pipeline phase; a phase always covers at least one epoch."""

    kind: str                 # baseline | measure | prune | finetune
    layer: str | None
    epochs: int

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"phase {self.kind} must span at least one epoch")

    @property
    def stage_id(self) -> str:
        return f"{self.kind}:{self.layer}" if self.layer else self.kind


@dataclass
class StepMetrics:
    loss_total: float
    loss_classification: float
    loss_strategy: float
    strategy_weight: float
    sharpness: float
    kept: int


def anchor_center(scores: np.ndarray, target: np.ndarray, sharpness: float,
                  delta_bin: float = 0.01) -> float:
    """Place the sigmoid center so the score split lines up with the target.

    This is the global influence threshold carried into score space: with
    ``k`` channels targeted for removal, the center sits midway between the
    k-th and (k+1)-th smallest scores, so the anneal drives exactly the
    targeted number of channels toward zero.  When nothing in the layer is
    targeted the center is dropped far enough below the smallest score that
    every entry is already saturated at the current sharpness.
    """
    scores = np.asarray(scores, dtype=np.float64)
    k = int((np.asarray(target) == 0).sum())
    order = np.sort(scores, kind="stable")
    saturation = 2.0 * np.log((1.0 - delta_bin) / delta_bin) / sharpness
    if k <= 0:
        return float(order[0] - saturation)
    if k >= scores.size:
        return float(order[-1] + saturation)
    return float(0.5 * (order[k - 1] + order[k]))


def strategy_step(scorer: ChannelScorer, state: StrategyState, schedule: SharpnessSchedule,
                  map_in: np.ndarray, extra_grad_soft: np.ndarray | None = None,
                  lr: float = 0.05, momentum: float = 0.9, weight_scale: float = 5.0,
                  cutoff: float = 1e-6) -> tuple[float, float]:
    """One refinement step of a layer's keep strategy.

    Recomputes scores and soft/hard keep vectors, weights the strategy loss,
    folds in any gradient arriving from the classification path
    (``extra_grad_soft``), updates the scorer, and advances the anneal.
    Returns ``(strategy_weight, strategy_loss)``.
    """
    sharp = schedule.value()
    scores = micro_conv_score(scorer, map_in)
    soft = scaled_sigmoid(sharp, scores, state.center)
    state.soft = soft
    state.hard = binarize(soft, cutoff)
    weight = lambda_value(int(state.target.sum()), state.kept, state.target.size,
                          scale=weight_scale)
    grad_soft = 2.0 * weight * (soft - state.target)
    if extra_grad_soft is not None:
        grad_soft = grad_soft + extra_grad_soft
    gk, gb = scorer_gradients(scorer, map_in, soft, grad_soft, sharp)
    scorer.kernel.grad, scorer.bias.grad = gk, gb
    sgd_step(scorer, lr, momentum, weight_decay=0.0, delta_freeze=0.0)
    schedule.advance()
    return weight, strategy_loss(soft, state.target)


class StrategyMonitor:
    """Snapshot bookkeeping: convergence detection and the stall booster."""

    def __init__(self, window: int = 3, delta_bin: float = 0.01, patience: int = 3,
                 cutoff: float = 1e-6):
        self.window = window
        self.delta_bin = delta_bin
        self.patience = patience
        self.cutoff = cutoff
        self._stalls = 0
        self._prev_hard: np.ndarray | None = None

    def observe(self, state: StrategyState, schedule: SharpnessSchedule) -> bool:
        """Record a snapshot; True once the strategy has converged on target.

        Convergence needs the window rule to hold *and* the binary pattern to
        equal the target: entries parked between the binarization cutoff and
        ``delta_bin`` satisfy the window rule while still binarizing as kept,
        and freezing there would silently under-prune.  A stall — hard
        pattern unchanged across ``patience`` consecutive snapshots while any
        entry is still above the cutoff — multiplies the remaining anneal by
        the schedule's boost factor, which is what drives those parked
        entries the rest of the way down.
        """
        state.snapshot()
        if (has_converged(state.history, self.delta_bin, self.window, self.cutoff)
                and np.array_equal(state.hard, state.target)):
            return True
        softness = float(np.minimum(state.soft, 1.0 - state.soft).max())
        if (self._prev_hard is not None and np.array_equal(self._prev_hard, state.hard)
                and softness >= self.cutoff):
            self._stalls += 1
            if self._stalls >= self.patience:
                schedule.apply_boost()
                log.info("strategy %s stalled at sharpness %.4g; boosting to %.4g",
                         state.layer, schedule.value() / schedule.boost_factor,
                         schedule.value())
                self._stalls = 0
        else:
            self._stalls = 0
        self._prev_hard = state.hard.copy()
        return False


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synthetic":
        train, test = synthetic_dataset(cfg.synthetic_train, cfg.synthetic_test, cfg.seed)
    elif cfg.dataset == "mnist":
        train = mnist_dataset(cfg.train_images, cfg.train_labels)
        test = mnist_dataset(cfg.test_images, cfg.test_labels)
    elif cfg.dataset == "cifar10":
        train = cifar10_dataset([p.strip() for p in cfg.train_files.split(",") if p.strip()])
        test = cifar10_dataset([p.strip() for p in cfg.test_files.split(",") if p.strip()])
    else:
        raise ConfigError(f"unknown dataset '{cfg.dataset}'")
    if cfg.train_limit:
        train = train.take(cfg.train_limit)
    if cfg.test_limit:
        test = test.take(cfg.test_limit)
    return train, test


class Trainer:
    def __init__(self, cfg: ExperimentConfig, model: Model, train_ds: Dataset,
                 test_ds: Dataset):
        self.cfg = cfg
        self.model = model
        self.train_ds = train_ds
        self.test_ds = test_ds
        self.model.set_delta_freeze(cfg.delta_freeze)
        self.prunable = {ref.name: ref for ref in model.prunable()}
        self.strategies: dict[str, StrategyState] = {}
        self.scorers: dict[str, ChannelScorer] = {}
        self.maps: dict[str, InfluenceMap] = {}
        self.plan: CompressionPlan | None = None
        self.global_epoch = 0
        self.completed: list[str] = []
        self.metrics: dict = {}
        self.phase_seconds: dict[str, float] = {}
        self.out_dir = Path(cfg.out_dir)

    # -- data/loss plumbing ---------------------------------------------

    def _train_batches(self, epoch: int):
        return batches(self.train_ds, self.cfg.batch_size, epoch, self.cfg.seed,
                       train=True, crop_pad=self.cfg.crop_pad, flip=self.cfg.flip)

    def steps_per_epoch(self) -> int:
        return len(self.train_ds) // self.cfg.batch_size

    def _baseline_lr(self, epoch_in_phase: int) -> float:
        lr = self.cfg.lr
        for frac in self.cfg.lr_milestones:
            if epoch_in_phase >= int(frac * self.cfg.baseline_epochs):
                lr *= self.cfg.lr_decay
        return lr

    def train_step(self, x: np.ndarray, y: np.ndarray, active: str | None,
                   lr: float) -> StepMetrics:
        """One optimization step; with an active layer the loss gains the
        weighted strategy term and the scorer trains jointly."""
        cfg = self.cfg
        if active is not None:
            state = self.strategies[active]
            layer = self.prunable[active].layer
            schedule = self._schedule
            sharp = schedule.value()
            scores = micro_conv_score(self.scorers[active], self._map_in)
            state.soft = scaled_sigmoid(sharp, scores, state.center)
            state.hard = binarize(state.soft, cfg.binary_cutoff)
            layer.gate[:] = state.soft
        logits = self.model.forward(x, train=True)
        loss_cls, grad = softmax_cross_entropy(logits, y)
        self.model.backward(grad.data)
        if active is not None:
            weight, s_loss = strategy_step(
                self.scorers[active], state, schedule, self._map_in,
                extra_grad_soft=layer.gate_grad, lr=self._scorer_lr,
                momentum=cfg.scorer_momentum, weight_scale=cfg.strategy_weight_scale,
                cutoff=cfg.binary_cutoff)
            layer.gate[:] = state.soft
        else:
            weight, s_loss = 0.0, 0.0
        sgd_step(self.model, lr, cfg.momentum, cfg.weight_decay, cfg.delta_freeze)
        kept = self.strategies[active].kept if active else -1
        return StepMetrics(loss_cls + weight * s_loss, loss_cls, s_loss, weight,
                           self._schedule.value() if active else 0.0, kept)

    def evaluate(self, model: Model | None = None) -> float:
        """Top-1 accuracy (percent) on the test split, deterministic order."""
        model = model or self.model
        correct = total = 0
        for x, y in batches(self.test_ds, self.cfg.eval_batch, 0, self.cfg.seed, train=False):
            pred = model.forward(x, train=False).argmax(axis=1)
            correct += int((pred == y).sum())
            total += y.size
        return 100.0 * correct / total

    # -- stages -----------------------------------------------------------

    def _stage_baseline(self, phase: Phase) -> None:
        for e in range(phase.epochs):
            lr = self._baseline_lr(e)
            running = 0.0
            for i, (x, y) in enumerate(self._train_batches(self.global_epoch)):
                m = self.train_step(x, y, None, lr)
                running += m.loss_total
                if (i + 1) % self.cfg.log_every == 0:
                    log.info("baseline epoch %d step %d loss %.4f", e, i + 1,
                             running / (i + 1))
            self.global_epoch += 1
            log.info("baseline epoch %d done, mean loss %.4f", e,
                     running / max(1, self.steps_per_epoch()))

    def measure_influence(self) -> dict[str, np.ndarray]:
        """One update-free pass over the training data, accumulating mask
        gradients everywhere; refreshes the stored maps and returns the
        per-channel influence vectors."""
        for ref in self.prunable.values():
            ref.layer.mask_grad = np.zeros_like(ref.layer.mask_grad)
            ref.layer.mask_samples = 0
        for x, y in self._train_batches(self.global_epoch):
            logits = self.model.forward(x, train=True, update_stats=False)
            _, grad = softmax_cross_entropy(logits, y)
            self.model.backward(grad.data)
        self.global_epoch += 1
        influences = {}
        for name, ref in self.prunable.items():
            fresh = capture_influence(ref.layer, name)
            self.maps[name] = ema_merge(None, fresh, self.cfg.ema_decay)
            influences[name] = channel_influence(fresh, self.cfg.influence_mode).values
        return influences

    def _stage_measure(self, phase: Phase) -> None:
        """Model-wide influence measurement; fixes the plan for the whole run."""
        cfg = self.cfg
        self.metrics["baseline_acc"] = self.evaluate()
        cost = count_flops(self.model)
        self.metrics["flops_before"] = cost["total_flops"]
        self.metrics["params_before"] = cost["total_params"]
        log.info("baseline accuracy %.2f%%, %d FLOPs", self.metrics["baseline_acc"],
                 cost["total_flops"])
        influences = self.measure_influence()
        self.plan = build_plan(influences, cfg.rate)
        for name, ref in self.prunable.items():
            width = ref.layer.out_channels
            self.strategies[name] = StrategyState(
                layer=name, soft=np.full(width, 0.5), hard=np.ones(width, dtype=np.int64),
                target=self.plan.targets[name], history_cap=cfg.window)
        log.info("plan fixed: threshold %.6g, keeping %d of %d channels",
                 self.plan.threshold, self.plan.kept_channels, self.plan.total_channels)

    def _scorer_input(self, name: str) -> np.ndarray:
        values = self.maps[name].values
        return np.abs(values) if self.cfg.scorer_input == "absolute" else values

    def _refresh_target(self, name: str) -> None:
        """Budget-preserving target refresh between anneal windows.

        Influence magnitudes drift while the network retrains around the
        gates, so comparing a refreshed map against the run-level threshold
        would let a layer's removal budget dissolve or balloon.  Instead the
        layer keeps the removal count the plan assigned it and re-selects
        which channels to drop by current influence rank (ties broken by
        channel index).
        """
        k0 = int((self.plan.targets[name] == 0).sum())
        infl = channel_influence(self.maps[name], self.cfg.influence_mode).values
        target = np.ones(infl.size, dtype=np.int64)
        if k0 > 0:
            order = np.lexsort((np.arange(infl.size), infl))
            target[order[:k0]] = 0
        self.strategies[name].target = target

    def _stage_prune(self, phase: Phase) -> None:
        cfg = self.cfg
        name = phase.layer
        ref = self.prunable[name]
        state = self.strategies[name]
        state.status = "active"
        state.history = []
        ref.layer.mask_grad = np.zeros_like(ref.layer.mask_grad)
        ref.layer.mask_samples = 0

        start = cfg.anneal_start if ref.kind == "conv" else cfg.anneal_start_fc
        factor = cfg.anneal_end_factor if ref.kind == "conv" else cfg.anneal_end_factor_fc
        total = max(1, phase.epochs * self.steps_per_epoch())
        self._schedule = SharpnessSchedule(start, start * factor, total,
                                           boost_factor=cfg.stall_boost)
        map_in = self._scorer_input(name)
        scorer = ChannelScorer(map_in.shape[1:])
        scorer.rescale_for_spread(map_in, cfg.score_margin)
        self.scorers[name] = scorer
        self._map_in = map_in
        self._scorer_lr = cfg.scorer_lr

        scores = micro_conv_score(scorer, map_in)
        state.center = anchor_center(scores, state.target, self._schedule.value(),
                                     cfg.delta_bin)
        state.soft = scaled_sigmoid(self._schedule.value(), scores, state.center)
        state.hard = binarize(state.soft, cfg.binary_cutoff)
        if (np.minimum(state.soft, 1.0 - state.soft).max() <= cfg.delta_bin
                and np.array_equal(state.hard, state.target)):
            # already binary and on target at the current sharpness: nothing
            # to anneal (typical for an all-keep target)
            ref.layer.gate[:] = state.hard
            state.status = "skipped"
            log.info("prune %s: target already satisfied, skipping", name)
            return

        monitor = StrategyMonitor(cfg.window, cfg.delta_bin, cfg.stall_patience,
                                  cfg.binary_cutoff)
        converged = False
        step_count = 0
        # snapshot a few times per epoch even when epochs are short, else the
        # convergence window and the stall booster starve on small datasets
        eval_every = max(1, min(cfg.strategy_eval_every, self.steps_per_epoch() // 3))
        for epoch_i in range(cfg.max_prune_epochs):
            for x, y in self._train_batches(self.global_epoch):
                m = self.train_step(x, y, name, cfg.prune_lr)
                step_count += 1
                if step_count % eval_every == 0:
                    if monitor.observe(state, self._schedule):
                        converged = True
                        break
                    state.center = anchor_center(
                        micro_conv_score(scorer, self._map_in), state.target,
                        self._schedule.value(), cfg.delta_bin)
            self.global_epoch += 1
            if converged:
                break
            if epoch_i < cfg.prune_epochs - 1 and ref.layer.mask_samples > 0:
                # between scheduled anneal windows: fold a de-gated influence
                # re-measurement into the running map and re-derive the target
                # against the fixed global threshold.  Extension epochs past
                # the schedule keep the target fixed so the strategy can
                # settle instead of chasing measurement drift.
                fresh = capture_influence(ref.layer, name, degate=True,
                                          delta=cfg.delta_freeze)
                self.maps[name] = ema_merge(self.maps[name], fresh, cfg.ema_decay)
                self._map_in = map_in = self._scorer_input(name)
                self._refresh_target(name)
            if epoch_i >= cfg.prune_epochs:
                self._scorer_lr *= 0.5
            state.center = anchor_center(micro_conv_score(scorer, self._map_in),
                                         state.target, self._schedule.value(),
                                         cfg.delta_bin)
            log.info("prune %s epoch %d: kept %d/%d, sharpness %.4g, strategy loss %.4g",
                     name, epoch_i, state.kept, state.target.size,
                     self._schedule.value(), m.loss_strategy)
        if not converged:
            raise ConvergenceError(
                f"layer {name} did not reach a stable binary strategy within "
                f"{cfg.max_prune_epochs} epochs", soft_keep=state.soft.copy())
        state.hard = binarize(state.soft, cfg.binary_cutoff)
        ref.layer.gate[:] = state.hard
        state.status = "frozen"
        log.info("prune %s frozen: kept %d/%d channels", name, state.kept,
                 state.target.size)

    def _stage_finetune(self, phase: Phase) -> None:
        for e in range(phase.epochs):
            for i, (x, y) in enumerate(self._train_batches(self.global_epoch)):
                self.train_step(x, y, None, self.cfg.finetune_lr)
            self.global_epoch += 1
            log.info("finetune epoch %d done", e)

    # -- orchestration ------------------------------------------------------

    def phases(self) -> list[Phase]:
        cfg = self.cfg
        out = []
        if cfg.baseline_epochs > 0:
            out.append(Phase("baseline", None, cfg.baseline_epochs))
        out.append(Phase("measure", None, 1))
        for name in self.prunable:
            out.append(Phase("prune", name, cfg.prune_epochs))
        if cfg.finetune_epochs > 0:
            out.append(Phase("finetune", None, cfg.finetune_epochs))
        return out

    def run(self, until: str | None = None) -> None:
        """Execute every not-yet-completed stage (optionally stopping after
        ``until``), checkpointing at each stage boundary."""
        runners = {"baseline": self._stage_baseline, "measure": self._stage_measure,
                   "prune": self._stage_prune, "finetune": self._stage_finetune}
        for phase in self.phases():
            stage = phase.stage_id
            if stage in self.completed:
                continue
            t0 = time.perf_counter()
            runners[phase.kind](phase)
            self.phase_seconds[stage] = self.phase_seconds.get(stage, 0.0) + (
                time.perf_counter() - t0)
            self.completed.append(stage)
            self.save(self.out_dir / f"checkpoint-{stage.replace(':', '-')}.ckpt")
            if until is not None and stage == until:
                return

    def finish(self) -> RunReport:
        """Compact, evaluate, and assemble the report (after all stages ran)."""
        t0 = time.perf_counter()
        # populate geometry caches (flatten shapes) for compaction
        probe = np.zeros((2, *self.model.input_shape))
        self.model.forward(probe, train=False)
        compacted = pruning.compact(self.model, self.strategies)
        pruned_acc = self.evaluate(compacted)
        cost_after = count_flops(compacted)
        kept = sum(s.kept for s in self.strategies.values())
        total = sum(s.target.size for s in self.strategies.values())
        self.phase_seconds["compact"] = time.perf_counter() - t0
        report = RunReport(
            model=self.cfg.model, dataset=self.train_ds.name,
            rate_target=self.cfg.rate, rate_actual=1.0 - kept / total,
            baseline_acc=self.metrics["baseline_acc"], pruned_acc=pruned_acc,
            flops_before=self.metrics["flops_before"],
            flops_after=cost_after["total_flops"],
            params_before=self.metrics["params_before"],
            params_after=cost_after["total_params"],
            per_layer=[{"layer": n, "width": int(s.target.size), "kept": int(s.kept)}
                       for n, s in self.strategies.items()],
            phase_seconds=dict(self.phase_seconds),
            seed=self.cfg.seed, config=self.cfg.to_dict())
        self.metrics["pruned_acc"] = pruned_acc
        self.metrics["report"] = report.to_dict()
        self.compacted = compacted
        return report

    # -- persistence --------------------------------------------------------

    def save(self, path) -> Path:
        arrays = dict(self.model.state_arrays())
        for name, m in self.maps.items():
            arrays[f"map.{name}.values"] = m.values
        for name, s in self.strategies.items():
            arrays[f"strategy.{name}.soft"] = s.soft
            arrays[f"strategy.{name}.hard"] = s.hard
            arrays[f"strategy.{name}.target"] = s.target
        for name, sc in self.scorers.items():
            arrays[f"scorer.{name}.kernel"] = sc.kernel.data
            arrays[f"scorer.{name}.bias"] = sc.bias.data
        meta = {
            "config": self.cfg.to_dict(),
            "completed": self.completed,
            "global_epoch": self.global_epoch,
            "metrics": {k: v for k, v in self.metrics.items() if k != "report"},
            "phase_seconds": self.phase_seconds,
            "map_samples": {n: m.samples for n, m in self.maps.items()},
            "strategy_meta": {n: {"status": s.status, "center": s.center}
                              for n, s in self.strategies.items()},
            "plan": None if self.plan is None else
                    {"rate": self.plan.rate, "threshold": self.plan.threshold},
            "input_shape": list(self.model.input_shape),
            "classes": self.model.classes,
        }
        return save_checkpoint(path, meta, arrays)

    def load(self, path) -> None:
        meta, arrays = load_checkpoint(path)
        stored = ExperimentConfig.from_dict(meta["config"])
        if stored.model != self.cfg.model:
            raise ConfigError(
                f"checkpoint was produced by a '{stored.model}' run, config asks for "
                f"'{self.cfg.model}'")
        self.model.load_state_arrays(arrays)
        self.completed = list(meta["completed"])
        self.global_epoch = int(meta["global_epoch"])
        self.metrics = dict(meta["metrics"])
        self.phase_seconds = dict(meta["phase_seconds"])
        samples = meta.get("map_samples", {})
        self.maps = {}
        self.strategies = {}
        self.scorers = {}
        for name in self.prunable:
            key = f"map.{name}.values"
            if key in arrays:
                self.maps[name] = InfluenceMap(name, arrays[key], int(samples.get(name, 0)))
            skey = f"strategy.{name}.soft"
            if skey in arrays:
                s_meta = meta["strategy_meta"][name]
                self.strategies[name] = StrategyState(
                    layer=name, soft=arrays[skey], hard=arrays[f"strategy.{name}.hard"],
                    target=arrays[f"strategy.{name}.target"], center=float(s_meta["center"]),
                    status=s_meta["status"], history_cap=self.cfg.window)
            kkey = f"scorer.{name}.kernel"
            if kkey in arrays:
                sc = ChannelScorer(arrays[kkey].shape, kernel=arrays[kkey],
                                   bias=float(arrays[f"scorer.{name}.bias"][0]))
                self.scorers[name] = sc
        if meta.get("plan"):
            targets = {n: self.strategies[n].target for n in self.prunable
                       if n in self.strategies}
            self.plan = CompressionPlan(meta["plan"]["rate"], meta["plan"]["threshold"],
                                        targets)


def run_pipeline(cfg: ExperimentConfig, resume_from=None) -> tuple[RunReport, Trainer]:
    """Build everything from a config, run (or resume) the full pipeline, and
    emit the report files into the output directory."""
    from .metrics import emit_report

    cfg.validate()
    train_ds, test_ds = load_datasets(cfg)
    model = build_model(cfg.model, train_ds.channels, train_ds.image_size, cfg.classes,
                        cfg.seed)
    trainer = Trainer(cfg, model, train_ds, test_ds)
    write_effective_config(cfg, cfg.out_dir)
    if resume_from is not None:
        trainer.load(resume_from)
    trainer.run()
    report = trainer.finish()
    trainer.save(trainer.out_dir / "checkpoint-final.ckpt")
    emit_report(report, cfg.out_dir)
    return report, trainer
