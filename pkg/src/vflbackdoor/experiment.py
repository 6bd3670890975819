"""Experiment orchestration: build data and parties, attach attacks and defenses,
train, evaluate after every epoch and write CSV reports."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data, streams
from .attacks import (ActivationBlur, AttackConfig, GradientReplacementAttack,
                      LabelInferenceProbe, LabelSubstitutionAttack)
from .defenses import DefenseConfig, build_defenses
from .errors import ConfigError, DataError, InvariantError
from .nn import SgdState, softmax
from .protocol import (SUM_HEAD, TRAINABLE_HEAD, ActiveParty, Interceptor, PassiveParty,
                       build_parties, forward_logits, run_round)

log = logging.getLogger(__name__)

DATASETS = ("mnist", "nuswide", "synth")
ATTACKS = ("none", "grad-replace", "grad-substitute")
DEFAULT_EPOCHS = {"mnist": 50, "nuswide": 50, "synth": 20}

CSV_HEADER = ("epoch", "main_acc", "backdoor_acc", "loss", "skipped_poison")
SUMMARY_HEADER = ("repeats", "epochs", "main_acc_mean", "main_acc_std", "backdoor_acc_mean",
                  "backdoor_acc_std", "loss_mean", "loss_std", "skipped_poison_mean")


@dataclass
class RunConfig:
    dataset: str = "synth"
    data_dir: str | None = None
    epochs: int | None = None
    batch_size: int = 64
    lr: float = 0.01
    seed: int = 0
    repeats: int = 1
    hidden: int = 32
    # attack
    attack: str = "none"
    gamma: float = 10.0
    target_label: int = 0
    blur: bool = False
    blur_variance: float = 1e-6
    n_targets: int = 1
    malicious_party: int = 1
    # defense
    head: str = SUM_HEAD
    noise: str = "none"
    noise_var: float = 0.0
    clip_norm: float | None = None
    drop_rate: float | None = None
    # dataset specifics
    poison_train: int = 600
    poison_test: int = 100
    synth_n_train: int = 10000
    synth_n_test: int = 2000
    synth_dim: int = 10
    synth_tags: int = 0
    synth_tag_on: float = 0.5
    synth_tag_off: float = 0.01
    synth_classes: int = 5
    synth_separation: float = 1.0
    synth_poison_fraction: float = 0.01

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}")
        if self.attack not in ATTACKS:
            raise ConfigError(f"attack must be one of {ATTACKS}")
        if self.head not in (SUM_HEAD, TRAINABLE_HEAD):
            raise ConfigError(f"head must be {SUM_HEAD!r} or {TRAINABLE_HEAD!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.dataset]
        if self.epochs < 1 or self.batch_size < 1 or self.repeats < 1:
            raise ConfigError("epochs, batch size and repeats must be at least 1")
        if self.dataset in ("mnist", "nuswide"):
            if not self.data_dir:
                raise ConfigError(f"the {self.dataset} dataset needs a data directory")
            if not Path(self.data_dir).is_dir():
                raise DataError(f"data directory {self.data_dir} does not exist")
        self.defense_config()  # validates noise / clip / drop rate

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def defense_config(self, seed: int = 0) -> DefenseConfig:
        return DefenseConfig(self.noise, self.noise_var, self.clip_norm, self.drop_rate,
                             self.head == TRAINABLE_HEAD, seed)


@dataclass
class EpochMetrics:
    epoch: int
    main_accuracy: float
    backdoor_accuracy: float | None
    mean_loss: float
    skipped_poison_events: int = 0


@dataclass
class TrainedRun:
    config: RunConfig
    repeat: int
    parties: list[PassiveParty]
    active: ActiveParty
    train: data.PartitionedDataset
    test: data.PartitionedDataset
    metrics: list[EpochMetrics] = field(default_factory=list)
    interceptors: list[Interceptor] = field(default_factory=list)


def load_datasets(cfg: RunConfig, seed: int):
    if cfg.dataset == "mnist":
        return data.mnist_datasets(cfg.data_dir, seed, cfg.poison_train, cfg.poison_test)
    if cfg.dataset == "nuswide":
        return data.nuswide_datasets(cfg.data_dir)
    return data.synth_datasets(cfg.synth_n_train, cfg.synth_n_test, seed=seed,
                               d_per_party=cfg.synth_dim, num_classes=cfg.synth_classes,
                               separation=cfg.synth_separation, n_tags=cfg.synth_tags,
                               tag_on=cfg.synth_tag_on, tag_off=cfg.synth_tag_off,
                               poison_fraction=cfg.synth_poison_fraction)


def choose_targets(train: data.PartitionedDataset, label: int, count: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Clean training samples of the target class known to the attacker."""
    pool = np.setdiff1d(np.flatnonzero(train.labels == label), train.poison_ids)
    if len(pool) < count:
        raise ConfigError(f"not enough clean samples of class {label} for {count} targets")
    return np.sort(rng.choice(pool, count, replace=False))


def build_interceptors(cfg: RunConfig, train: data.PartitionedDataset,
                       seeds: dict[str, int]) -> list[Interceptor]:
    stack: list[Interceptor] = []
    if cfg.attack != "none":
        acfg = AttackConfig(cfg.malicious_party, cfg.target_label, cfg.gamma, train.target_ids,
                            train.poison_ids, cfg.blur_variance, seeds["attack"])
        if cfg.blur:
            stack.append(ActivationBlur(acfg))
        if cfg.attack == "grad-replace":
            stack.append(GradientReplacementAttack(acfg))
        else:
            stack.append(LabelSubstitutionAttack(acfg))
    stack += build_defenses(cfg.defense_config(seeds["defense"]), len(train))
    return stack


def evaluate(parties: Sequence[PassiveParty], active: ActiveParty,
             test: data.PartitionedDataset, target_label: int) -> tuple[float, float | None]:
    """Clean-sample accuracy and the share of triggered samples classified as the target.

    The backdoor metric is ``None`` when the test set holds no triggered samples.
    """
    preds = np.argmax(forward_logits(parties, active, test.blocks), axis=1)
    clean = test.clean_ids()
    main = float(np.mean(preds[clean] == test.labels[clean])) if len(clean) else float("nan")
    if len(test.poison_ids) == 0:
        return main, None
    return main, float(np.mean(preds[test.poison_ids] == target_label))


def poison_scores(run: TrainedRun) -> np.ndarray | None:
    """Mean softmax score per class over the triggered test samples."""
    ids = run.test.poison_ids
    if len(ids) == 0:
        return None
    logits = forward_logits(run.parties, run.active, run.test.rows(ids))
    return softmax(logits).mean(axis=0)


def setup_run(cfg: RunConfig, repeat: int = 0, datasets=None) -> TrainedRun:
    seed = cfg.seed + repeat
    seeds = streams.stream_seeds(seed)
    train, test = datasets if datasets is not None else load_datasets(cfg, seeds["data"])
    if cfg.attack == "grad-replace":
        targets = choose_targets(train, cfg.target_label, cfg.n_targets,
                                 np.random.default_rng(seeds["attack"]))
        train = dataclasses.replace(train, target_ids=targets)
    if cfg.malicious_party >= len(train.blocks) and cfg.attack != "none":
        raise ConfigError(f"malicious party {cfg.malicious_party} does not exist")
    opt = SgdState(cfg.lr)
    parties, active = build_parties(train.blocks, train.labels, train.num_classes, cfg.head,
                                    np.random.default_rng(seeds["init"]), cfg.hidden, opt)
    return TrainedRun(cfg, repeat, parties, active, train, test,
                      interceptors=build_interceptors(cfg, train, seeds))


def check_finite(parties: Sequence[PassiveParty], active: ActiveParty, epoch: int) -> None:
    layers = [l for p in parties for l in p.layers] + list(active.head_layers)
    if not all(np.isfinite(l.weights).all() and np.isfinite(l.bias).all() for l in layers):
        raise InvariantError(f"non-finite parameters after epoch {epoch}")


def _skipped(stack) -> int:
    return sum(getattr(i, "skipped", 0) for i in stack)


def train_run(run: TrainedRun, extra: Sequence[Interceptor] = (), epochs: int | None = None,
              max_rounds: int | None = None) -> TrainedRun:
    cfg = run.config
    shuffle = np.random.default_rng(streams.stream_seeds(cfg.seed + run.repeat)["shuffle"])
    stack = list(run.interceptors) + list(extra)
    n = len(run.train)
    round_index = 0
    for epoch in range(1, (epochs or cfg.epochs) + 1):
        order = shuffle.permutation(n)
        before = _skipped(stack)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            if max_rounds is not None and round_index >= max_rounds:
                break
            batch = order[start:start + cfg.batch_size]
            res = run_round(run.parties, run.active, batch, stack, round_index, epoch)
            loss_sum += res.loss * len(batch)
            round_index += 1
        check_finite(run.parties, run.active, epoch)
        main, backdoor = evaluate(run.parties, run.active, run.test, cfg.target_label)
        m = EpochMetrics(epoch, main, backdoor, loss_sum / n, _skipped(stack) - before)
        run.metrics.append(m)
        log.info("repeat %d epoch %d: main %.4f backdoor %s loss %.4f", run.repeat, epoch, main,
                 "-" if backdoor is None else f"{backdoor:.4f}", m.mean_loss)
        if max_rounds is not None and round_index >= max_rounds:
            break
    return run


def run_experiment(cfg: RunConfig) -> list[list[EpochMetrics]]:
    """Train ``cfg.repeats`` independent runs (seed, seed+1, ...) and return their metrics."""
    return [train_run(setup_run(cfg, r)).metrics for r in range(cfg.repeats)]


def label_inference_rate(cfg: RunConfig, max_rounds: int | None = None) -> tuple[float, int]:
    """Train cleanly with the sum head while party ``malicious_party`` reads labels
    off its down messages. Returns ``(recovery rate, labels examined)``."""
    if cfg.head != SUM_HEAD:
        raise ConfigError("label inference assumes the sum head")
    clean = dataclasses.replace(cfg, attack="none", noise="none", drop_rate=None, clip_norm=None,
                                epochs=1)
    run = setup_run(clean)
    probe = LabelInferenceProbe(party=cfg.malicious_party)
    train_run(run, extra=[probe], max_rounds=max_rounds)
    ids, inferred = probe.results()
    return float(np.mean(inferred == run.train.labels[ids])), len(ids)


# Reports --------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def _std(values: list[float]) -> float | None:
    return float(np.std(values, ddof=1)) if len(values) > 1 else None


def summarize(results: Sequence[Sequence[EpochMetrics]]) -> dict:
    finals = [r[-1] for r in results]
    backdoor = [m.backdoor_accuracy for m in finals if m.backdoor_accuracy is not None]
    main = [m.main_accuracy for m in finals]
    loss = [m.mean_loss for m in finals]
    return {
        "repeats": len(finals),
        "epochs": finals[0].epoch if finals else 0,
        "main_acc_mean": float(np.mean(main)),
        "main_acc_std": _std(main),
        "backdoor_acc_mean": float(np.mean(backdoor)) if backdoor else None,
        "backdoor_acc_std": _std(backdoor) if backdoor else None,
        "loss_mean": float(np.mean(loss)),
        "loss_std": _std(loss),
        "skipped_poison_mean": float(np.mean([sum(e.skipped_poison_events for e in r)
                                              for r in results])),
    }


def emit_report(results: Sequence[Sequence[EpochMetrics]], path, run_name: str = "run",
                long_format: bool = False, scores: Sequence[np.ndarray | None] | None = None
                ) -> list[Path]:
    """Write one CSV per repeat plus ``summary.csv``; optionally a long-format
    CSV and a per-class mean-score table for the triggered samples."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for r, metrics in enumerate(results):
        p = out / f"{run_name}_r{r:02d}.csv"
        with open(p, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for m in metrics:
                w.writerow([m.epoch, _fmt(m.main_accuracy), _fmt(m.backdoor_accuracy),
                            _fmt(m.mean_loss), m.skipped_poison_events])
        written.append(p)

    summary = summarize(results)
    p = out / f"{run_name}_summary.csv"
    with open(p, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerow([_fmt(summary[k]) for k in SUMMARY_HEADER])
    written.append(p)

    if long_format:
        p = out / f"{run_name}_long.csv"
        with open(p, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("run", "repeat", "epoch", "metric", "value"))
            for r, metrics in enumerate(results):
                for m in metrics:
                    for name, value in (("main_acc", m.main_accuracy),
                                        ("backdoor_acc", m.backdoor_accuracy),
                                        ("loss", m.mean_loss)):
                        w.writerow((run_name, r, m.epoch, name, _fmt(value)))
        written.append(p)

    if scores is not None and any(s is not None for s in scores):
        p = out / f"{run_name}_poison_scores.csv"
        with open(p, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            width = len(next(s for s in scores if s is not None))
            w.writerow(["repeat"] + [f"class_{c}" for c in range(width)])
            for r, s in enumerate(scores):
                if s is not None:
                    w.writerow([r] + [_fmt(float(v)) for v in s])
        written.append(p)
    return written
