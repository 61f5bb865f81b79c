"""Decentralized training protocol: local steps, aggregation, evaluation.

One round has four stages: every source client trains from the broadcast
global model (gradient matching against last round's head snapshots), the
updated local models travel to the server, the server takes the
sample-count-weighted parameter mean, and the new global model plus the
fresh local heads are broadcast for the next round.

The adaptation variant adds an unlabeled target client: each round it
pseudo-labels its pool by a confidence-thresholded vote of the current
source models, fine-tunes the broadcast global model on the accepted subset
with plain cross-entropy, and joins aggregation weighted by the number of
accepted samples.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng as streams
from .autodiff import Tape, backward
from .data import (
    AugmentationSpec,
    DomainDataset,
    augment,
    batch_iter,
    gen_rotated_domains,
    gen_textured_domains,
    train_test_split,
)
from .errors import ContractError, DivergenceError, UsageError
from .model import (
    HeadSnapshot,
    ModelParams,
    flatten,
    forward,
    init_params,
    predict_logits,
    predict_proba,
    stage_params,
    unflatten,
)
from .objective import cross_entropy, local_loss

log = logging.getLogger(__name__)

TRAIN_METRICS = ("ce_orig", "ce_aug", "intra", "inter", "total")


@dataclass
class HyperParams:
    """Optimizer and protocol knobs, one bundle per experiment."""

    lam: float = 0.5
    rounds: int = 30
    local_epochs: int = 1
    batch: int = 16
    lr0: float = 1e-3
    lr1: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    inter_normalize: bool = False
    tau: float = 0.9
    min_votes: int = 2
    gm_enabled: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise UsageError(f"hp.lambda must lie in [0, 1], got {self.lam}")
        if not self.lr0 >= self.lr1 > 0.0:
            raise UsageError(f"learning rates must satisfy lr0 >= lr1 > 0, got {self.lr0}, {self.lr1}")
        if not 0.0 < self.tau <= 1.0:
            raise UsageError(f"hp.tau must lie in (0, 1], got {self.tau}")
        if self.rounds < 1 or self.local_epochs < 1 or self.batch < 1 or self.min_votes < 1:
            raise UsageError("rounds, local_epochs, batch and min_votes must all be >= 1")


@dataclass
class ClientUpdate:
    """One client's reply: its trained model and how many samples backed it."""

    domain_id: int
    params: ModelParams
    n_samples: int
    train_stats: dict[str, float] | None = None


@dataclass
class RoundMessage:
    """Server broadcast: the global model and last round's local heads."""

    round: int
    global_params: ModelParams
    heads: list[HeadSnapshot]


@dataclass
class PseudoLabeledSet:
    """Accepted target samples with voted labels and vote confidences."""

    indices: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray

    @property
    def n_accepted(self) -> int:
        return int(self.indices.size)


@dataclass
class MetricsTable:
    """Long-format metrics rows plus the models the run ended with."""

    rows: list[tuple[int, str, int, str, float]] = field(default_factory=list)
    final_model: ModelParams | None = None
    final_target_model: ModelParams | None = None

    def add(self, round_t: int, phase: str, domain_id: int, metric: str, value: float) -> None:
        self.rows.append((round_t, phase, domain_id, metric, float(value)))

    def values(self, phase: str, metric: str, domain_id: int | None = None) -> list[tuple[int, float]]:
        return [
            (r, v)
            for r, p, d, m, v in self.rows
            if p == phase and m == metric and (domain_id is None or d == domain_id)
        ]

    def final_value(self, phase: str, metric: str, domain_id: int | None = None) -> float:
        hits = self.values(phase, metric, domain_id)
        if not hits:
            raise KeyError(f"no rows for phase={phase} metric={metric} domain={domain_id}")
        return hits[-1][1]

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("round,phase,domain_id,metric,value\n")
            for r, p, d, m, v in self.rows:
                fh.write(f"{r},{p},{d},{m},{v!r}\n")


def cosine_lr(round_t: int, hp: HyperParams) -> float:
    """Cosine interpolation from lr0 (round 1) down to lr1 (round E)."""
    if hp.rounds == 1:
        return hp.lr0
    frac = (round_t - 1) / (hp.rounds - 1)
    return hp.lr1 + 0.5 * (hp.lr0 - hp.lr1) * (1.0 + math.cos(math.pi * frac))


def _sgd_step(params, staged, grads, velocity, lr, hp):
    slots = list(zip(staged.all_ids(), _param_arrays(params)))
    for node_id, arr in slots:
        g = grads[node_id]
        v = velocity[node_id]
        v *= hp.momentum
        v += g
        arr -= lr * v + lr * hp.weight_decay * arr


def _param_arrays(params: ModelParams):
    for w, b in params.feature:
        yield w
        yield b
    yield params.head_w
    yield params.head_b


def local_train(
    initial: ModelParams,
    dataset: DomainDataset,
    heads: list[HeadSnapshot],
    hp: HyperParams,
    round_t: int,
    aug: AugmentationSpec,
) -> ClientUpdate:
    """Mini-batch SGD with momentum and decoupled L2 decay on the local loss.

    Momentum buffers start at zero every round because the client restarts
    from the broadcast global model. Round 1 has no previous heads, so the
    inter term is skipped there regardless of what was passed.
    """
    if hp.local_epochs < 1:
        raise UsageError(f"local_epochs must be >= 1, got {hp.local_epochs}")
    if round_t < 1:
        raise UsageError(f"round must be >= 1, got {round_t}")
    params = initial.copy()
    snapshots = [] if round_t == 1 else list(heads)
    lr = cosine_lr(round_t, hp)
    aug_rng = streams.substream(hp.seed, streams.AUG, dataset.domain_id, round_t)
    batch_seed = streams.subseed(hp.seed, streams.CLIENT)
    velocity: dict[int, np.ndarray] = {}
    sums = dict.fromkeys(TRAIN_METRICS, 0.0)
    steps = 0
    epoch_base = (round_t - 1) * hp.local_epochs
    for e in range(hp.local_epochs):
        for X, y in batch_iter(dataset, hp.batch, batch_seed, epoch_base + e):
            X_aug = augment(X, aug, aug_rng)
            tape = Tape()
            staged = stage_params(tape, params)
            if not velocity:
                velocity = {nid: np.zeros_like(tape.value(nid)) for nid in staged.all_ids()}
            loss, bd = local_loss(
                tape,
                staged,
                snapshots,
                X,
                X_aug,
                y,
                hp.lam,
                inter_normalize=hp.inter_normalize,
                gm_enabled=hp.gm_enabled,
            )
            if not math.isfinite(bd.total):
                raise DivergenceError(
                    f"non-finite loss {bd.total} at round {round_t}, step {steps}"
                )
            grads = backward(tape, loss)
            _sgd_step(params, staged, grads, velocity, lr, hp)
            sums["ce_orig"] += bd.ce_orig
            sums["ce_aug"] += bd.ce_aug
            sums["intra"] += bd.intra
            sums["inter"] += bd.inter
            sums["total"] += bd.total
            steps += 1
    stats = {k: v / steps for k, v in sums.items()}
    return ClientUpdate(dataset.domain_id, params, dataset.N, stats)


def aggregate(updates: list[ClientUpdate]) -> ModelParams:
    """Sample-count-weighted mean of the client parameters."""
    if not updates:
        raise UsageError("aggregate needs at least one client update")
    arch = updates[0].params.arch
    classes = updates[0].params.classes
    for u in updates:
        if u.params.arch != arch or u.params.classes != classes:
            raise ContractError(
                f"client {u.domain_id} arch {u.params.arch}/{u.params.classes} "
                f"does not match {arch}/{classes}"
            )
        if u.n_samples <= 0:
            raise ContractError(f"client {u.domain_id} reports n_samples={u.n_samples}")
    total = float(sum(u.n_samples for u in updates))
    flat = np.zeros_like(flatten(updates[0].params))
    for u in updates:
        flat += (u.n_samples / total) * flatten(u.params)
    return unflatten(arch, classes, flat)


def evaluate(params: ModelParams, dataset: DomainDataset) -> float:
    """Fraction of argmax predictions matching labels (ties: lowest class)."""
    pred = np.argmax(predict_logits(params, dataset.X), axis=1)
    return float(np.mean(pred == dataset.y))


def knowledge_vote(
    source_models: list[ModelParams],
    X_T: np.ndarray,
    tau: float,
    min_votes: int,
) -> PseudoLabeledSet:
    """Confidence-thresholded consensus labels from the source models.

    A model votes for its argmax class when its max softmax probability is
    at least tau. A sample is accepted when one class collects min_votes or
    more votes and strictly outvotes every other class; its confidence is
    the mean max-probability of the models that backed the winning class.
    """
    if not source_models:
        raise UsageError("knowledge_vote needs at least one source model")
    if not 0.0 < tau <= 1.0:
        raise UsageError(f"tau must lie in (0, 1], got {tau}")
    probs = [predict_proba(m, X_T) for m in source_models]
    maxp = np.stack([p.max(axis=1) for p in probs])        # (models, N)
    argm = np.stack([p.argmax(axis=1) for p in probs])     # (models, N)
    voting = maxp >= tau
    classes = source_models[0].classes
    indices, labels, confidences = [], [], []
    for i in range(X_T.shape[0]):
        votes = argm[voting[:, i], i]
        if votes.size == 0:
            continue
        counts = np.bincount(votes, minlength=classes)
        winner = int(np.argmax(counts))
        top = counts[winner]
        counts[winner] = 0
        if top < min_votes or top <= counts.max():
            continue
        backers = voting[:, i] & (argm[:, i] == winner)
        indices.append(i)
        labels.append(winner)
        confidences.append(float(maxp[backers, i].mean()))
    return PseudoLabeledSet(
        np.array(indices, dtype=np.int64),
        np.array(labels, dtype=np.int64),
        np.array(confidences),
    )


def _train_plain_ce(
    initial: ModelParams,
    dataset: DomainDataset,
    hp: HyperParams,
    round_t: int,
) -> ClientUpdate:
    """Target-client fine-tuning: cross-entropy only, same optimizer."""
    params = initial.copy()
    lr = cosine_lr(round_t, hp)
    batch_seed = streams.subseed(hp.seed, streams.CLIENT)
    velocity: dict[int, np.ndarray] = {}
    ce_sum = 0.0
    steps = 0
    epoch_base = (round_t - 1) * hp.local_epochs
    for e in range(hp.local_epochs):
        for X, y in batch_iter(dataset, hp.batch, batch_seed, epoch_base + e):
            tape = Tape()
            staged = stage_params(tape, params)
            if not velocity:
                velocity = {nid: np.zeros_like(tape.value(nid)) for nid in staged.all_ids()}
            _, z = forward(tape, staged, X)
            loss = cross_entropy(tape, z, y)
            value = float(tape.value(loss))
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite target loss at round {round_t}, step {steps}")
            grads = backward(tape, loss)
            _sgd_step(params, staged, grads, velocity, lr, hp)
            ce_sum += value
            steps += 1
    stats = {"ce_orig": ce_sum / steps, "ce_aug": ce_sum / steps, "intra": 0.0, "inter": 0.0, "total": ce_sum / steps}
    return ClientUpdate(dataset.domain_id, params, dataset.N, stats)


def build_domains(config) -> list[DomainDataset]:
    """Instantiate the configured generator with the run's data substream."""
    data_seed = streams.subseed(config.hp.seed, streams.DATA)
    spec = config.data
    if spec.kind == "rotated_moons":
        return gen_rotated_domains(
            len(spec.angles), spec.angles, spec.n_per_domain, spec.noise_sigma, data_seed, spec.classes
        )
    if spec.kind == "textured":
        return gen_textured_domains(spec.n_domains, spec.side, spec.n_per_domain, data_seed, spec.classes)
    raise UsageError(f"unknown data kind '{spec.kind}'")


def _split_all(domains, seed):
    split_seed = streams.subseed(seed, streams.SPLIT)
    return {d.domain_id: train_test_split(d, split_seed) for d in domains}


def _train_round(msg, train_sets, source_ids, hp, aug, parallel):
    def job(did):
        return local_train(msg.global_params, train_sets[did], msg.heads, hp, msg.round, aug)

    if parallel and len(source_ids) > 1:
        with ThreadPoolExecutor(max_workers=len(source_ids)) as pool:
            futures = {did: pool.submit(job, did) for did in source_ids}
            results = {did: f.result() for did, f in futures.items()}
    else:
        results = {did: job(did) for did in source_ids}
    return [results[did] for did in sorted(results)]


def _record_round(table, round_t, updates, splits, source_ids, global_params):
    for u in updates:
        for metric in TRAIN_METRICS:
            table.add(round_t, "train", u.domain_id, metric, u.train_stats[metric])
    for did in source_ids:
        table.add(round_t, "eval_source", did, "accuracy", evaluate(global_params, splits[did][1]))


def run_dg(config) -> MetricsTable:
    """Leave-one-domain-out federated training; returns per-round metrics.

    Per round: sources train from the broadcast global model with last
    round's local heads, the server aggregates, and the new global model is
    scored on every source test split and on the held-out domain's test
    split.
    """
    hp = config.hp
    hp.validate()
    domains = build_domains(config)
    if not 0 <= config.held_out < len(domains):
        raise UsageError(f"held_out index {config.held_out} outside the {len(domains)} domains")
    source_ids = [d.domain_id for d in domains if d.domain_id != config.held_out]
    if not source_ids:
        raise UsageError("no source domains left after holding one out")
    splits = _split_all(domains, hp.seed)
    train_sets = {did: splits[did][0] for did in source_ids}
    global_params = init_params(config.arch, config.data.classes, streams.subseed(hp.seed, streams.INIT))
    heads: list[HeadSnapshot] = []
    table = MetricsTable()
    parallel = getattr(config, "parallel_clients", False)
    for t in range(1, hp.rounds + 1):
        msg = RoundMessage(round=t, global_params=global_params, heads=heads)
        updates = _train_round(msg, train_sets, source_ids, hp, config.augmentation, parallel)
        global_params = aggregate(updates)
        heads = [
            HeadSnapshot(u.domain_id, u.params.head_w.copy(), u.params.head_b.copy(), t)
            for u in updates
        ]
        _record_round(table, t, updates, splits, source_ids, global_params)
        table.add(t, "eval_unseen", config.held_out, "accuracy", evaluate(global_params, splits[config.held_out][1]))
    table.final_model = global_params
    return table


def run_da(config) -> MetricsTable:
    """Adaptation variant: the held-out index names an unlabeled target.

    Sources train exactly as in run_dg. The target client re-votes pseudo-
    labels from the current source local models each round, fine-tunes the
    broadcast global model on the accepted subset, and enters aggregation
    weighted by the accepted count. Target ground truth is used only to
    score pseudo-label precision and accuracies.
    """
    hp = config.hp
    hp.validate()
    domains = build_domains(config)
    if not 0 <= config.held_out < len(domains):
        raise UsageError(f"target index {config.held_out} outside the {len(domains)} domains")
    target = config.held_out
    source_ids = [d.domain_id for d in domains if d.domain_id != target]
    if not source_ids:
        raise UsageError("no source domains left after reserving the target")
    splits = _split_all(domains, hp.seed)
    train_sets = {did: splits[did][0] for did in source_ids}
    target_pool, target_test = splits[target]
    global_params = init_params(config.arch, config.data.classes, streams.subseed(hp.seed, streams.INIT))
    heads: list[HeadSnapshot] = []
    table = MetricsTable()
    parallel = getattr(config, "parallel_clients", False)
    target_model: ModelParams | None = None
    for t in range(1, hp.rounds + 1):
        msg = RoundMessage(round=t, global_params=global_params, heads=heads)
        updates = _train_round(msg, train_sets, source_ids, hp, config.augmentation, parallel)
        voted = knowledge_vote(
            [u.params for u in updates], target_pool.X, hp.tau, hp.min_votes
        )
        coverage = voted.n_accepted / target_pool.N
        precision = float("nan")
        trained_this_round = False
        if voted.n_accepted > 0:
            precision = float(np.mean(target_pool.y[voted.indices] == voted.labels))
            pseudo_set = DomainDataset(
                target, target_pool.X[voted.indices].copy(), voted.labels.copy(), {"kind": "pseudo"}
            )
            target_update = _train_plain_ce(global_params, pseudo_set, hp, t)
            target_update.n_samples = voted.n_accepted
            target_model = target_update.params
            trained_this_round = True
            all_updates = updates + [target_update]
        else:
            log.info("round %d: no pseudo-labels above tau=%.2f, target client skipped", t, hp.tau)
            all_updates = updates
        global_params = aggregate(all_updates)
        heads = [
            HeadSnapshot(u.domain_id, u.params.head_w.copy(), u.params.head_b.copy(), t)
            for u in updates
        ]
        _record_round(table, t, updates, splits, source_ids, global_params)
        table.add(t, "pseudo", target, "pl_coverage", coverage)
        table.add(t, "pseudo", target, "pl_precision", precision)
        table.add(t, "eval_unseen", target, "accuracy", evaluate(global_params, target_test))
        deployed = target_model if trained_this_round else global_params
        table.add(t, "eval_target", target, "accuracy", evaluate(deployed, target_test))
    table.final_model = global_params
    table.final_target_model = target_model
    return table
