"""Training loops for the pre-ranking model and its reference baselines.

`train_student` fits the two-tower scorer on entire-space samples with
the weighted list-wise objectives, optionally adding soft-label
distillation over each sample's annotated subset.  `train_pointwise`
fits the same tower architecture with a per-item binary cross entropy,
which is how the multiplicative multi-model reference system (click
model times post-click purchase model, optionally times an exposure
model) is produced.  `run_experiment` wires the simulator, sample
builder, teacher, trainer, and evaluator together; the world and the
teacher can be passed in so ablation arms share everything except the
stage under study.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import teacher as teacher_mod
from .config import ExperimentConfig, LossConfig, ModelConfig, TeacherConfig, TrainConfig
from .errors import ConfigError, LabelingError, NumericalFault
from .losses import SampleTasks, distill_loss, rank_loss, softplus
from .metrics import MetricReport, combined_scorer, evaluate_scorer, model_scorer
from .model import VocabSpec, backward, featurize, forward, init_params, zeros_like_params
from .optim import Adam
from .samples import (
    AttachedPurchase,
    AttachStats,
    BuildStats,
    QuerySample,
    attach_related_queries,
    build_query_samples,
    distill_mask,
    split_logs,
)
from .seeding import substream
from .simulator import Catalog, CascadeStats, RequestLog, gen_catalog, run_cascade_logging

POINTWISE_TASKS = ("ctr", "cvr", "er")

_COMBINATION_TASKS = {
    "one_model": (),
    "ctr_x_cvr": ("ctr", "cvr"),
    "ctr_x_cvr_x_er": ("ctr", "cvr", "er"),
}


def _epoch_order(n: int, seed: int, tag: str, epoch: int, deterministic: bool) -> np.ndarray:
    if deterministic:
        return substream(seed, "shuffle", tag, epoch).permutation(n)
    return np.random.default_rng().permutation(n)


# ----------------------------------------------------------------------
# list-wise student


@dataclass
class _PreparedSample:
    feats: object
    tasks: SampleTasks
    dmask: np.ndarray | None
    pctr: np.ndarray | None
    pcvr: np.ndarray | None


def _prepare_samples(
    catalog: Catalog, samples: list[QuerySample], loss_cfg: LossConfig
) -> list[_PreparedSample]:
    prepared = []
    for s in samples:
        exposure, click, purchase = s.label_arrays()
        tasks = SampleTasks(exposure=exposure, click=click, purchase=purchase)
        feats = featurize(catalog, s.user_id, s.query_id, s.item_ids())
        if loss_cfg.distill_set == "none":
            prepared.append(_PreparedSample(feats, tasks, None, None, None))
            continue
        mask = distill_mask(s.origins(), loss_cfg.distill_set)
        pctr, pcvr = s.teacher_arrays()
        if mask.any() and (np.isnan(pctr[mask]).any() or np.isnan(pcvr[mask]).any()):
            raise LabelingError(
                f"request {s.request_id}: distillation set {loss_cfg.distill_set!r}"
                " contains items without teacher scores"
            )
        prepared.append(_PreparedSample(feats, tasks, mask, pctr, pcvr))
    return prepared


def train_student(
    catalog: Catalog,
    samples: list[QuerySample],
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    seed: int,
) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Fit the two-tower scorer on labeled samples; returns (params, history).

    Gradients are averaged over the samples of each mini batch, so one
    request contributes one unit regardless of its item count.  History
    has one row per epoch with the mean rank and distillation losses.
    """
    model_cfg.validate()
    loss_cfg.validate()
    train_cfg.validate()
    if not samples:
        raise ValueError("no training samples")
    vocab = VocabSpec.from_sim_config(catalog.config)
    params = init_params(model_cfg, vocab, seed)
    prepared = _prepare_samples(catalog, samples, loss_cfg)
    opt = Adam(params, train_cfg.learning_rate)
    history: list[dict] = []
    n = len(prepared)
    for epoch in range(train_cfg.epochs):
        order = _epoch_order(n, seed, "student", epoch, train_cfg.determinism)
        rank_sum = 0.0
        distill_sum = 0.0
        for start in range(0, n, train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            grads = zeros_like_params(params)
            for j in batch:
                p = prepared[j]
                scores, cache = forward(params, model_cfg, p.feats)
                loss_r, dz, _ = rank_loss(scores, p.tasks, loss_cfg.weights, loss_cfg.variant)
                rank_sum += loss_r
                if p.dmask is not None:
                    loss_d, dz_d = distill_loss(
                        scores, p.dmask, p.pctr, p.pcvr, loss_cfg.weights, loss_cfg.distill_weight
                    )
                    distill_sum += loss_d
                    dz = dz + dz_d
                if not np.all(np.isfinite(dz)):
                    raise NumericalFault("non-finite loss gradient")
                backward(params, model_cfg, cache, dz / len(batch), grads)
            opt.step(grads)
        history.append(
            {
                "epoch": epoch,
                "loss": (rank_sum + distill_sum) / n,
                "rank_loss": rank_sum / n,
                "distill_loss": distill_sum / n,
            }
        )
    return params, history


def exposed_only(samples: list[QuerySample]) -> list[QuerySample]:
    """Keep only exposed items, as a logging-feedback-only trainer sees them.

    The exposure task degenerates (every remaining item is positive) and
    is dropped per sample by the rank loss; clicks and purchases on
    unexposed injected items disappear with their items.
    """
    out = []
    for s in samples:
        items = tuple(it for it in s.items if it.origin == "ex")
        out.append(dataclasses.replace(s, items=items, rc_truncated=False, prc_truncated=False))
    return out


# ----------------------------------------------------------------------
# point-wise reference towers


@dataclass
class PointwiseRow:
    """One request's items and binary labels for a single-stage model."""

    user_id: int
    query_id: int
    item_ids: np.ndarray
    labels: np.ndarray


def pointwise_rows(
    task: str, logs: list[RequestLog], samples: list[QuerySample] | None = None
) -> list[PointwiseRow]:
    """Training rows for one stage model.

    ctr: exposed items, clicked or not.  cvr: clicked items, purchased
    or not.  er: every entire-space sample item, exposed or not (the
    only stage whose negatives go beyond the logged feedback).
    """
    rows: list[PointwiseRow] = []
    if task == "ctr":
        for log in logs:
            ids = np.asarray(log.exposures, dtype=np.int64)
            if ids.size == 0:
                continue
            y = np.isin(ids, np.asarray(log.clicks, dtype=np.int64)).astype(np.float64)
            rows.append(PointwiseRow(log.user_id, log.query_id, ids, y))
    elif task == "cvr":
        for log in logs:
            ids = np.asarray(log.clicks, dtype=np.int64)
            if ids.size == 0:
                continue
            y = np.isin(ids, np.asarray(log.purchases, dtype=np.int64)).astype(np.float64)
            rows.append(PointwiseRow(log.user_id, log.query_id, ids, y))
    elif task == "er":
        if samples is None:
            raise ValueError("exposure-rate rows need entire-space samples")
        for s in samples:
            exposure, _, _ = s.label_arrays()
            rows.append(
                PointwiseRow(s.user_id, s.query_id, s.item_ids(), exposure.astype(np.float64))
            )
    else:
        raise ValueError(f"unknown pointwise task {task!r}")
    return rows


def train_pointwise(
    catalog: Catalog,
    rows: list[PointwiseRow],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seed: int,
    tag: str,
) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Fit one tower with binary cross entropy on sigmoid(score).

    Gradients are averaged over items in the batch; history rows carry
    the mean per-item loss.  ``tag`` decouples the parameter draws and
    shuffles of models trained from the same seed.
    """
    model_cfg.validate()
    train_cfg.validate()
    if not rows:
        raise ValueError("no training rows")
    vocab = VocabSpec.from_sim_config(catalog.config)
    init_seed = int(substream(seed, "pointwise", tag).integers(2**31))
    params = init_params(model_cfg, vocab, init_seed)
    feats = [featurize(catalog, r.user_id, r.query_id, r.item_ids) for r in rows]
    opt = Adam(params, train_cfg.learning_rate)
    history: list[dict] = []
    n = len(rows)
    for epoch in range(train_cfg.epochs):
        order = _epoch_order(n, seed, f"pointwise-{tag}", epoch, train_cfg.determinism)
        loss_sum = 0.0
        n_items = 0
        for start in range(0, n, train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            grads = zeros_like_params(params)
            batch_items = int(sum(rows[j].labels.size for j in batch))
            for j in batch:
                scores, cache = forward(params, model_cfg, feats[j])
                y = rows[j].labels
                prob = 1.0 / (1.0 + np.exp(-scores))
                loss_sum += float(np.sum(softplus(scores) - y * scores))
                n_items += y.size
                backward(params, model_cfg, cache, (prob - y) / batch_items, grads)
            opt.step(grads)
        history.append({"epoch": epoch, "loss": loss_sum / n_items})
    return params, history


def combination_tasks(combination: str) -> tuple[str, ...]:
    if combination not in _COMBINATION_TASKS:
        raise ConfigError(f"unknown combination {combination!r}")
    return _COMBINATION_TASKS[combination]


# ----------------------------------------------------------------------
# experiment driver


@dataclass
class World:
    """One simulated marketplace with its logs and derived views."""

    catalog: Catalog
    logs: list[RequestLog]
    cascade_stats: CascadeStats
    train_logs: list[RequestLog]
    eval_logs: list[RequestLog]
    attached: list[AttachedPurchase]
    attach_stats: AttachStats


def build_world(sim_cfg, seed: int, eval_frac: float = 0.2) -> World:
    catalog = gen_catalog(sim_cfg, seed)
    logs, cascade_stats = run_cascade_logging(catalog, seed)
    train_logs, eval_logs = split_logs(logs, eval_frac)
    attached, attach_stats = attach_related_queries(catalog, logs)
    return World(catalog, logs, cascade_stats, train_logs, eval_logs, attached, attach_stats)


def fit_teacher(world: World, cfg: TeacherConfig, seed: int, mode: str):
    """Build the (predictor, params, history) triple for a teacher mode.

    The learned teacher trains on its own logging window (fresh traffic
    from the same world, sized by ``cfg.n_own_requests``) or, when that
    is zero, on the shared training window.  Either way it never sees
    eval-window feedback.
    """
    if mode == "oracle":
        return teacher_mod.teacher_predictor("oracle", world.catalog), None, None
    if mode == "learned":
        if cfg.n_own_requests > 0:
            own_seed = int(substream(seed, "teacher-window").integers(2**31))
            logs, _ = run_cascade_logging(
                world.catalog, own_seed, cfg.n_own_requests, cfg.explore_rate
            )
        else:
            logs = world.train_logs
        rate_logs = None
        if cfg.n_rate_requests > 0:
            rate_seed = int(substream(seed, "teacher-rates").integers(2**31))
            rate_logs, _ = run_cascade_logging(
                world.catalog, rate_seed, cfg.n_rate_requests, cfg.explore_rate
            )
        params, history = teacher_mod.train_teacher(world.catalog, logs, cfg, seed, rate_logs)
        predictor = teacher_mod.teacher_predictor("learned", world.catalog, params, cfg)
        return predictor, params, history
    raise ConfigError(f"unknown teacher mode {mode!r}")


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    world: World
    samples: list[QuerySample]
    sample_stats: BuildStats
    teacher_params: dict | None = None
    student_params: dict | None = None
    student_history: list[dict] = field(default_factory=list)
    baseline_params: dict[str, dict] = field(default_factory=dict)
    baseline_history: dict[str, list[dict]] = field(default_factory=dict)
    report: MetricReport | None = None

    def scorer(self):
        """Rebuild the serving scorer this run was evaluated with."""
        cfg = self.config
        if cfg.combination == "one_model":
            return model_scorer(self.student_params, cfg.model, self.world.catalog)
        towers = [
            model_scorer(self.baseline_params[t], cfg.model, self.world.catalog)
            for t in combination_tasks(cfg.combination)
        ]
        return combined_scorer(towers, "product")


def run_experiment(
    cfg: ExperimentConfig,
    world: World | None = None,
    teacher=None,
) -> ExperimentResult:
    """Run one configuration end to end and evaluate on the held-out window.

    ``world`` and ``teacher`` (a (predictor, params) pair) are rebuilt
    from the config when omitted; ablation arms pass them in so every
    arm shares the same marketplace, logs, and soft labels.
    """
    cfg.validate()
    if cfg.loss.distill_set != "none" and cfg.samples.teacher == "none":
        raise ConfigError("distillation needs samples.teacher set to oracle or learned")
    if world is None:
        world = build_world(cfg.sim, cfg.seed)

    samples, sample_stats = build_query_samples(
        world.catalog, world.train_logs, cfg.samples, cfg.seed, attached=world.attached
    )
    if cfg.samples.space == "exposed":
        samples = exposed_only(samples)

    teacher_params = None
    if cfg.samples.teacher != "none":
        if teacher is None:
            predictor, teacher_params, _ = fit_teacher(world, cfg.teacher, cfg.seed, cfg.samples.teacher)
        else:
            predictor, teacher_params = teacher
        samples = teacher_mod.annotate_samples(samples, predictor)

    result = ExperimentResult(
        config=cfg,
        world=world,
        samples=samples,
        sample_stats=sample_stats,
        teacher_params=teacher_params,
    )

    if cfg.combination == "one_model":
        result.student_params, result.student_history = train_student(
            world.catalog, samples, cfg.model, cfg.loss, cfg.train, cfg.seed
        )
    else:
        for task in combination_tasks(cfg.combination):
            rows = pointwise_rows(task, world.train_logs, samples)
            params, hist = train_pointwise(world.catalog, rows, cfg.model, cfg.train, cfg.seed, task)
            result.baseline_params[task] = params
            result.baseline_history[task] = hist

    result.report = evaluate_scorer(world.eval_logs, result.scorer(), cfg.eval, world.attached)
    return result
