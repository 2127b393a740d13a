"""Sequential task training with alternating replay and a five-point eval grid.

One experiment trains tasks in order with the combined objective
(identity CE + batch-hard triplet + prototype CE + weighted alignment).
From the second task on, epochs alternate between new-task PK batches and
replay batches drawn from the banks, and the banks are refreshed with the
lowest-uncertainty samples once each task finishes.

Every run is a pure function of (config, master seed): all randomness is
drawn from tagged SeedSequence streams, so adding later tasks to a config
cannot perturb the training of earlier ones.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .banks import ReplayBanks, ingest_task, replay_epoch_batches
from .conformal import CpConfig
from .data import (
    Sample,
    SynthSpec,
    TaskDataset,
    features_of,
    generate_synthetic_task,
    identity_index_map,
    load_task,
    pk_epoch_batches,
)
from .encoder import (
    EncoderConfig,
    EncoderState,
    ParameterGradients,
    StackGradients,
    apply_deltas,
    backward,
    forward,
    init_encoder,
    register_task_head,
)
from .losses import (
    JmmdSpec,
    LossBreakdown,
    LossInputError,
    default_layer_set,
    i2tce_loss_grad,
    id_loss_grad,
    jmmd_with_grad,
    sim_loss,
    triplet_loss_grad,
)
from .metrics import MetricsRecord, aggregate, evaluate

logger = logging.getLogger(__name__)

REPORT_FORMAT = "xmcl-report-v1"

# stream tags for deterministic, order-independent RNG derivation
_TAG_ENCODER, _TAG_HEAD, _TAG_DATA, _TAG_BATCHES = 1, 2, 3, 4


@dataclass(frozen=True)
class Schedule:
    """Per-task epoch budget, warmup/decay learning-rate shape, Adam moments."""

    epochs_first_task: int = 60
    epochs_later_tasks: int = 30
    warmup_epochs: int = 10
    base_lr: float = 5e-6
    warmup_start_lr: float = 5e-7
    decay_epochs: tuple[int, ...] = (30, 50)
    decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.warmup_epochs < 0 or self.epochs_first_task < 0 or self.epochs_later_tasks < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.warmup_epochs > max(self.epochs_first_task, self.epochs_later_tasks):
            raise ValueError("warmup cannot exceed the longest task budget")
        if not 0 < self.decay_factor < 1:
            raise ValueError(f"decay factor must be in (0, 1), got {self.decay_factor}")
        if self.base_lr <= 0 or self.warmup_start_lr <= 0:
            raise ValueError("learning rates must be positive")


def lr_at(epoch: int, schedule: Schedule) -> float:
    """Linear warmup to base_lr, then a step decay at each decay epoch."""
    if epoch < schedule.warmup_epochs:
        frac = epoch / schedule.warmup_epochs
        return schedule.warmup_start_lr + frac * (schedule.base_lr - schedule.warmup_start_lr)
    lr = schedule.base_lr
    for d in schedule.decay_epochs:
        if epoch >= d:
            lr *= schedule.decay_factor
    return lr


class Adam:
    """Per-parameter moment estimates keyed by (kind, index)."""

    def __init__(self, schedule: Schedule):
        self.b1, self.b2, self.eps = schedule.beta1, schedule.beta2, schedule.eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def delta(self, key, grad: np.ndarray, lr: float) -> np.ndarray:
        m = self.m.get(key)
        if m is None:
            m = np.zeros_like(grad)
            self.v[key] = np.zeros_like(grad)
            self.t[key] = 0
        v = self.v[key]
        self.t[key] += 1
        t = self.t[key]
        m = self.b1 * m + (1 - self.b1) * grad
        v = self.b2 * v + (1 - self.b2) * grad * grad
        self.m[key], self.v[key] = m, v
        m_hat = m / (1 - self.b1**t)
        v_hat = v / (1 - self.b2**t)
        return -lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class ExperimentConfig:
    """Everything a run needs besides the master seed."""

    tasks: list[SynthSpec | str]
    schedule: Schedule = Schedule()
    cp: CpConfig = CpConfig()
    jmmd: JmmdSpec = field(default_factory=JmmdSpec)
    hidden_dims: tuple[int, ...] = (128, 128)
    embedding_dim: int = 64
    temperature: float = 0.07
    pk_p: int = 16
    pk_k: int = 4
    mpm: bool = True
    triplet_margin: float = 0.3
    label_smoothing: float = 0.1
    use_cosine_eval: bool = False
    swap_eval_direction: bool = False
    freeze_shared_on_replay: bool = False

    def __post_init__(self) -> None:
        if not self.tasks:
            raise ValueError("config needs at least one task")
        if self.pk_p < 2 or self.pk_k < 1:
            raise ValueError("PK sampling needs at least 2 identities and 1 instance")


@dataclass
class ExperimentState:
    encoder: EncoderState
    adam: Adam
    banks: ReplayBanks
    id_maps: dict[int, dict[int, int]]
    history: list[MetricsRecord] = field(default_factory=list)
    loss_history: dict[int, list[float]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def _stream(master_seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((master_seed, *tags)))


def _derived_seed(master_seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence((master_seed, *tags)).generate_state(1)[0])


def batch_gradients(
    state: EncoderState,
    batch: list[Sample],
    task_id: int,
    id_map: dict[int, int],
    jmmd_spec: JmmdSpec,
    margin: float = 0.3,
    smoothing: float = 0.1,
) -> tuple[LossBreakdown, ParameterGradients]:
    """Combined loss value and parameter gradients for one batch.

    The alignment term acts between the batch's sketch rows and photo rows
    on the configured layer set; a batch missing one modality skips it (and
    with it the cross-modal part of the triplet term) with a warning, and
    alpha = 0 skips its evaluation outright.
    """
    feats = features_of(batch)
    stack = forward(state, feats, task_id)
    rows = np.array([id_map[s.identity] for s in batch], dtype=np.int64)
    identities = np.array([s.identity for s in batch], dtype=np.int64)
    protos = state.head(task_id)
    temperature = state.config.temperature

    l_id, d_probs = id_loss_grad(stack.probs, rows, smoothing)
    l_i2tce, d_emb_i2, d_protos_i2 = i2tce_loss_grad(stack.embedding, protos, rows, temperature)
    try:
        l_tri, d_emb_tri = triplet_loss_grad(stack.embedding, identities, margin)
    except LossInputError as e:
        logger.warning("skipping triplet term: %s", e)
        l_tri, d_emb_tri = 0.0, np.zeros_like(stack.embedding)

    n_hidden = len(state.config.hidden_dims)
    emb_idx = n_hidden
    d_layers: list[np.ndarray | None] = [None] * len(stack.layers)
    d_layers[-1] = d_probs
    d_layers[emb_idx] = d_emb_tri + d_emb_i2

    sketch_rows = np.array([i for i, s in enumerate(batch) if s.modality == "sketch"])
    photo_rows = np.array([i for i, s in enumerate(batch) if s.modality == "photo"])
    l_jmmd = 0.0
    if sketch_rows.size and photo_rows.size and jmmd_spec.alpha > 0:
        layer_set = jmmd_spec.layer_set or default_layer_set(n_hidden)
        s_layers = [stack.layers[i][sketch_rows] for i in layer_set]
        p_layers = [stack.layers[i][photo_rows] for i in layer_set]
        l_jmmd, d_s, d_p = jmmd_with_grad(s_layers, p_layers, jmmd_spec)
        for li, idx in enumerate(layer_set):
            buf = d_layers[idx]
            if buf is None:
                buf = np.zeros_like(stack.layers[idx])
            buf = buf.copy()
            buf[sketch_rows] += jmmd_spec.alpha * d_s[li]
            buf[photo_rows] += jmmd_spec.alpha * d_p[li]
            d_layers[idx] = buf
    elif not sketch_rows.size or not photo_rows.size:
        logger.warning(
            "batch for task %d lacks one modality; skipping cross-modal terms", task_id
        )

    grads = backward(state, stack, StackGradients(d_layers=d_layers))
    grads.d_prototypes = grads.d_prototypes + d_protos_i2
    breakdown = sim_loss(l_id, l_tri, l_i2tce, l_jmmd, alpha=jmmd_spec.alpha)
    return breakdown, grads


def _apply_step(
    exp: ExperimentState,
    grads,
    task_id: int,
    lr: float,
    update_shared: bool = True,
) -> None:
    adam = exp.adam
    w_deltas = None
    b_deltas = None
    if update_shared:
        w_deltas = [
            adam.delta(("w", l), g, lr) for l, g in enumerate(grads.d_weights)
        ]
        b_deltas = [
            adam.delta(("b", l), g, lr) for l, g in enumerate(grads.d_biases)
        ]
    p_delta = adam.delta(("p", task_id), grads.d_prototypes, lr)
    apply_deltas(exp.encoder, w_deltas, b_deltas, p_delta, task_id)


def train_task(
    exp: ExperimentState,
    task: TaskDataset,
    config: ExperimentConfig,
    epochs: int,
    rng: np.random.Generator,
    use_replay: bool,
    halfway_callback=None,
) -> list[float]:
    """Train one task for its epoch budget; returns per-epoch mean losses.

    With replay active, odd epochs (1-based) run on new-task PK batches and
    even epochs on bank batches under the originating task's head.  The
    halfway callback fires once half the budget is complete.
    """
    id_map = exp.id_maps[task.task_id]
    replay_tasks = exp.banks.task_ids() if use_replay else []
    replay_counter = 0
    epoch_losses: list[float] = []
    halfway = epochs // 2
    if halfway == 0 and halfway_callback is not None:
        halfway_callback()
    for epoch in range(epochs):
        lr = lr_at(epoch, config.schedule)
        is_replay = use_replay and (epoch + 1) % 2 == 0
        losses = []
        if is_replay:
            replay_task = replay_tasks[replay_counter % len(replay_tasks)]
            replay_counter += 1
            for batch in replay_epoch_batches(
                exp.banks, config.pk_p, config.pk_k, rng, task_id=replay_task
            ):
                breakdown, grads = batch_gradients(
                    exp.encoder,
                    batch,
                    replay_task,
                    exp.id_maps[replay_task],
                    config.jmmd,
                    config.triplet_margin,
                    config.label_smoothing,
                )
                _apply_step(
                    exp,
                    grads,
                    replay_task,
                    lr,
                    update_shared=not config.freeze_shared_on_replay,
                )
                losses.append(breakdown.l_sim)
        else:
            for batch in pk_epoch_batches(task.train, config.pk_p, config.pk_k, rng):
                breakdown, grads = batch_gradients(
                    exp.encoder,
                    batch,
                    task.task_id,
                    id_map,
                    config.jmmd,
                    config.triplet_margin,
                    config.label_smoothing,
                )
                _apply_step(exp, grads, task.task_id, lr)
                losses.append(breakdown.l_sim)
        epoch_losses.append(float(np.mean(losses)))
        if epoch + 1 == halfway and halfway_callback is not None:
            halfway_callback()
    return epoch_losses


def _resolve_tasks(config: ExperimentConfig, master_seed: int) -> list[TaskDataset]:
    tasks = []
    for entry in config.tasks:
        if isinstance(entry, SynthSpec):
            # tag by task_id, not position: reordering tasks must not change data
            seed = _derived_seed(master_seed, _TAG_DATA, entry.task_id, entry.seed)
            tasks.append(generate_synthetic_task(dataclasses.replace(entry, seed=seed)))
        else:
            tasks.append(load_task(entry))
    dims = {t.feature_dim for t in tasks}
    if len(dims) != 1:
        raise ValueError(f"tasks disagree on feature dim: {sorted(dims)}")
    ids_seen: set[int] = set()
    for t in tasks:
        ids = t.train_identities | t.test_identities
        if ids & ids_seen:
            raise ValueError("tasks share identities; identity spaces must be disjoint")
        ids_seen |= ids
    return tasks


def run_sequence(config: ExperimentConfig, master_seed: int) -> tuple[dict, ExperimentState]:
    """Train all tasks in order, evaluating every task at each grid point.

    Grid: step 1 before training, then per task one step halfway through
    and one at completion (a two-task run yields steps 1-5).  Returns the
    report dict plus the final experiment state (encoder, banks, history).
    """
    tasks = _resolve_tasks(config, master_seed)
    enc_config = EncoderConfig(
        input_dim=tasks[0].feature_dim,
        hidden_dims=config.hidden_dims,
        embedding_dim=config.embedding_dim,
        seed=_derived_seed(master_seed, _TAG_ENCODER),
        temperature=config.temperature,
    )
    exp = ExperimentState(
        encoder=init_encoder(enc_config),
        adam=Adam(config.schedule),
        banks=ReplayBanks(),
        id_maps={},
    )
    if len(tasks) == 1:
        exp.warnings.append("single-task config: no continual-learning step will run")

    steps: list[dict] = []

    def eval_all(step: int) -> None:
        records = [
            evaluate(
                exp.encoder,
                t,
                step=step,
                use_cosine=config.use_cosine_eval,
                swap_direction=config.swap_eval_direction,
            )
            for t in tasks
        ]
        exp.history.extend(records)
        steps.append(
            {
                "step": step,
                "records": [r.as_row() for r in records],
                "average": aggregate(records),
            }
        )

    eval_all(1)
    step = 1
    for pos, task in enumerate(tasks):
        head_seed = _derived_seed(master_seed, _TAG_HEAD, task.task_id)
        register_task_head(
            exp.encoder, task.task_id, len(task.train_identities), head_seed
        )
        exp.id_maps[task.task_id] = identity_index_map(task.train)
        epochs = (
            config.schedule.epochs_first_task
            if pos == 0
            else config.schedule.epochs_later_tasks
        )
        rng = _stream(master_seed, _TAG_BATCHES, task.task_id)
        use_replay = config.mpm and pos > 0 and not exp.banks.is_empty()
        if epochs > 0:
            halfway_step = step + 1
            losses = train_task(
                exp,
                task,
                config,
                epochs,
                rng,
                use_replay,
                halfway_callback=lambda s=halfway_step: eval_all(s),
            )
            exp.loss_history[task.task_id] = losses
            step += 2
            eval_all(step)
        if config.mpm:
            ingest_task(exp.banks, exp.encoder, task, config.cp)

    report = {
        "format": REPORT_FORMAT,
        "master_seed": master_seed,
        "task_ids": [t.task_id for t in tasks],
        "mpm": config.mpm,
        "alpha": config.jmmd.alpha,
        "steps": steps,
        "loss_history": {str(t): v for t, v in sorted(exp.loss_history.items())},
        "warnings": exp.warnings,
    }
    return report, exp


def report_to_csv(report: dict) -> str:
    """Per-step metrics with the documented column layout."""
    lines = ["step,task_id,mAP,r1,r5,r10"]
    for entry in report["steps"]:
        for row in entry["records"]:
            lines.append(
                f'{entry["step"]},{row["task_id"]},{row["mAP"]!r},'
                f'{row["r1"]!r},{row["r5"]!r},{row["r10"]!r}'
            )
    return "\n".join(lines) + "\n"
