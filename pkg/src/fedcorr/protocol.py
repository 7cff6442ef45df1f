"""Three-stage noisy-label federated training, plus a plain FedAvg baseline.

Stage 1 (pre-processing) visits every client once per iteration, one client
per communication round, each training from the weights left by the previous
client. After each iteration the server splits clients into clean/noisy by a
two-component GMM over cumulative LID scores; every noisy client splits its
own samples by a GMM over per-sample losses, estimates its noise level, and
relabels its most confidently wrong samples with the global model.

Stage 2 finetunes by FedAvg on the clients whose estimated noise is below
``kappa`` and then relabels the remaining clients' data wholesale (subject to
the confidence threshold). Stage 3 is ordinary FedAvg on everyone.
"""
from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import datagen, gmm, lid
from .config import ExperimentConfig
from .datagen import Dataset, NoiseAssignment, PartitionAssignment, round_half_up
from .errors import ConfigError, DivergenceError, ParameterError
from .metrics import confusion_matrix, ground_truth_noise, relabel_report, RelabelReport
from .model import Classifier, LocalTrainConfig, build_model, evaluate, local_train, per_sample_loss
from .seeding import sub_rng, sub_seed

log = logging.getLogger(__name__)


class Stage(str, enum.Enum):
    PREPROCESSING = "preprocessing"
    FINETUNING = "finetuning"
    USUAL_TRAINING = "usual_training"
    FEDAVG = "fedavg"
    DONE = "done"


@dataclass
class ClientState:
    client_id: int
    sample_indices: np.ndarray
    lid_history: list[float] = field(default_factory=list)
    cumulative_lid: float = 0.0
    estimated_noise: float = 0.0
    is_noisy_flag: bool = False
    detected_noisy: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    last_local_losses: np.ndarray | None = None

    def record_lid(self, score: float) -> None:
        self.lid_history.append(float(score))
        self.cumulative_lid = float(sum(self.lid_history))


@dataclass
class ServerState:
    global_weights: np.ndarray
    clients: list[ClientState]
    round_index: int = 0
    stage: Stage = Stage.PREPROCESSING
    comm_cost: int = 0


@dataclass
class StageConfig:
    t1: int = 5
    t2: int = 50
    t3: int = 50
    fraction: float = 0.1
    theta: float = 0.5
    pi: float = 0.5
    kappa: float = 0.1
    lid_k: int = lid.DEFAULT_K
    mixup_alpha: float = 1.0
    prox_beta: float = 5.0
    no_correction: bool = False
    no_fraction_scheduling: bool = False
    no_proximal: bool = False
    no_finetuning: bool = False
    no_usual_training: bool = False
    no_mixup: bool = False
    stage1_parallel: bool = False

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig) -> "StageConfig":
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in cfg.to_dict().items() if k in names})

    @property
    def effective_t2(self) -> int:
        return 0 if self.no_finetuning else self.t2

    @property
    def effective_t3(self) -> int:
        return 0 if self.no_usual_training else self.t3


@dataclass
class RoundRecord:
    round: int
    stage: str
    n_selected: int
    comm_cost: int
    accuracy: float | None


@dataclass
class ExperimentResult:
    mode: str
    seed: int
    config_hash: str
    final_weights: np.ndarray
    rounds: list[RoundRecord]
    client_snapshots: list[dict]
    relabel_log: list[dict]
    comm_cost: int
    true_noise_levels: np.ndarray
    estimated_noise: np.ndarray
    noisy_clients_detected: list[int]
    label_checkpoints: dict[str, np.ndarray]
    relabel_report: RelabelReport | None
    confusion: dict[str, np.ndarray]
    wall_clock: float = 0.0
    clean_set_size: int | None = None

    @property
    def accuracies(self) -> list[float]:
        return [r.accuracy for r in self.rounds if r.accuracy is not None]

    @property
    def final_accuracy(self) -> float | None:
        acc = self.accuracies
        return acc[-1] if acc else None

    @property
    def best_accuracy(self) -> float | None:
        acc = self.accuracies
        return max(acc) if acc else None


def selection_size(fraction: float, n_eligible: int) -> int:
    return max(1, round_half_up(fraction * n_eligible))


def communication_cost(n_clients, fraction, t1, t2, t3, n_clean=None) -> int:
    """Participations of a full run: ``N*T1 + m(|S_c|)*T2 + m(N)*T3``."""
    n_clean = n_clients if n_clean is None else n_clean
    return n_clients * t1 + selection_size(fraction, n_clean) * t2 + selection_size(fraction, n_clients) * t3


def aggregate(updates) -> np.ndarray:
    """Dataset-size-weighted mean of ``(weights, size)`` pairs, summed in the given order."""
    updates = list(updates)
    if not updates:
        raise ParameterError("nothing to aggregate")
    total = float(sum(size for _, size in updates))
    if total <= 0:
        raise ParameterError("total dataset size must be positive")
    shape = np.shape(updates[0][0])
    out = np.zeros(shape)
    for w, size in updates:
        if np.shape(w) != shape:
            raise ParameterError("weight layouts differ")
        out += (size / total) * np.asarray(w, dtype=float)
    return out


def relabel_selection(losses, noisy_subset, global_preds, pi: float, theta: float):
    """Pick which detected-noisy samples to relabel and with what.

    Takes the ``floor(pi * |subset|)`` largest-loss samples (ties: lower
    sample index first), keeps those whose top global probability is at least
    ``theta``, and returns ``(indices, new_labels)`` with the argmax labels.
    """
    subset = np.asarray(noisy_subset, dtype=np.int64)
    losses = np.asarray(losses, dtype=float)
    preds = np.asarray(global_preds, dtype=float)
    n_top = int(math.floor(pi * len(subset) + 1e-12))
    if n_top == 0:
        return subset[:0], subset[:0]
    order = np.lexsort((subset, -losses))[:n_top]
    top = order[preds[order].max(axis=1) >= theta]
    top = top[np.argsort(subset[top], kind="stable")]
    return subset[top], np.argmax(preds[top], axis=1).astype(np.int64)


@dataclass
class Federation:
    """Everything a run needs besides protocol state: data, model, seeds."""

    train: Dataset
    test: Dataset
    partition: PartitionAssignment
    noise: NoiseAssignment
    model: Classifier
    cfg: ExperimentConfig
    dry_run: bool = False

    @property
    def n_clients(self) -> int:
        return self.partition.n_clients

    def local_config(self, round_index: int, client: int, *, mixup_alpha=0.0, prox_beta=0.0,
                     prox_mu_hat=0.0, anchor=None) -> LocalTrainConfig:
        c = self.cfg
        return LocalTrainConfig(
            epochs=c.local_epochs, batch_size=c.batch_size, learning_rate=c.learning_rate,
            momentum=c.momentum, mixup_alpha=mixup_alpha, prox_beta=prox_beta,
            prox_mu_hat=prox_mu_hat, anchor_weights=anchor,
            seed=sub_seed(c.seed, "local", round_index, client),
        )

    def train_client(self, weights, client: int, ltc: LocalTrainConfig, stage: Stage, round_index: int):
        if self.dry_run:
            return np.array(weights, dtype=float)
        try:
            return local_train(self.model, weights, self.train, self.partition.client_indices[client], ltc)
        except DivergenceError as exc:
            raise DivergenceError(f"{stage.value} round {round_index}, client {client}: {exc}") from exc

    def test_accuracy(self, weights) -> float | None:
        if self.dry_run:
            return None
        return evaluate(self.model, weights, self.test)

    def predict(self, weights, indices) -> np.ndarray:
        return self.model.predict_proba(weights, self.train.features[indices])


def build_federation(cfg: ExperimentConfig, dry_run: bool = False) -> Federation:
    """Materialise data, partition and label noise from the config's named seed streams."""
    from .io import ingest_csv  # local import keeps io optional for library users

    seed = cfg.seed
    if cfg.dataset == "csv":
        full = ingest_csv(cfg.csv_path, cfg.n_classes)
        n_test = max(1, round_half_up(cfg.csv_test_fraction * len(full)))
        train, test = datagen.train_test_split(full, n_test, seed=sub_rng(seed, "split"))
    else:
        n_train = cfg.n_clients * cfg.samples_per_client
        full = datagen.generate_blobs(n_train + cfg.n_test, cfg.n_classes, cfg.dim, cfg.cluster_std,
                                      cfg.class_center_scale, seed=sub_rng(seed, "data"))
        train, test = datagen.train_test_split(full, cfg.n_test, seed=sub_rng(seed, "split"))
    if cfg.standardize:
        mean = train.features.mean(axis=0)
        scale = train.features.std(axis=0)
        scale[scale == 0] = 1.0
        train.features = (train.features - mean) / scale
        test.features = (test.features - mean) / scale
    if cfg.partition == "iid":
        part = datagen.partition_iid(train, cfg.n_clients, seed=sub_rng(seed, "partition"))
    else:
        part = datagen.partition_noniid(train, cfg.n_clients, cfg.p, cfg.alpha_dir, seed=sub_rng(seed, "partition"))
    noise = datagen.apply_noise_model(train, part, cfg.rho, cfg.tau, seed=sub_rng(seed, "noise"))
    model = build_model(cfg.model, train.dim, train.n_classes, cfg.hidden)
    return Federation(train, test, part, noise, model, cfg, dry_run)


class FedCorrRun:
    """Mutable run state plus the three stage procedures."""

    def __init__(self, fed: Federation, stage_cfg: StageConfig | None = None):
        self.fed = fed
        self.sc = stage_cfg or StageConfig.from_experiment(fed.cfg)
        w0 = fed.model.init(sub_rng(fed.cfg.seed, "init"))
        clients = [ClientState(k, ix) for k, ix in enumerate(fed.partition.client_indices)]
        self.state = ServerState(w0, clients)
        self.rounds: list[RoundRecord] = []
        self.snapshots: list[dict] = []
        self.relabel_log: list[dict] = []
        self.participation: list[list[int]] = []
        self.clean_set_size: int | None = None
        self.latest_scores: dict[int, float] = {}
        # labels as they stood when the most recent stage-1 split ran
        self.labels_at_last_split = fed.train.given_labels.copy()

    # bookkeeping

    def _end_round(self, selected) -> None:
        st = self.state
        st.round_index += 1
        st.comm_cost += len(selected)
        acc = self.fed.test_accuracy(st.global_weights)
        self.rounds.append(RoundRecord(st.round_index, st.stage.value, len(selected), st.comm_cost, acc))

    def _snapshot(self, iteration: int) -> None:
        true_noise = ground_truth_noise(self.fed.train, self.fed.partition)
        for c in self.state.clients:
            self.snapshots.append({
                "iteration": iteration,
                "client": c.client_id,
                "lid": c.lid_history[-1] if c.lid_history else 0.0,
                "cumulative_lid": c.cumulative_lid,
                "estimated_noise": c.estimated_noise,
                "is_noisy": c.is_noisy_flag,
                "true_noise": float(true_noise[c.client_id]),
            })

    def _apply_relabel(self, client: int, indices, new_labels, stage: Stage, iteration: int) -> None:
        labels = self.fed.train.given_labels
        changed = int((labels[indices] != new_labels).sum())
        labels[indices] = new_labels
        self.relabel_log.append({"stage": stage.value, "iteration": iteration, "client": client,
                                 "n_selected": int(len(indices)), "n_changed": changed})

    def _client_lid_and_losses(self, weights, client: int):
        if self.fed.dry_run:
            return 0.0, None
        ix = self.fed.partition.client_indices[client]
        preds = self.fed.predict(weights, ix)
        k = min(self.sc.lid_k, len(ix) - 1)
        score = lid.lid_score(preds, k) if k >= 1 else 0.0
        return score, per_sample_loss(self.fed.model, weights, self.fed.train, ix)

    def _stage1_train(self, weights, client: int):
        cs = self.state.clients[client]
        ltc = self.fed.local_config(
            self.state.round_index, client,
            mixup_alpha=0.0 if self.sc.no_mixup else self.sc.mixup_alpha,
            prox_beta=0.0 if self.sc.no_proximal else self.sc.prox_beta,
            prox_mu_hat=cs.estimated_noise, anchor=weights,
        )
        return self.fed.train_client(weights, client, ltc, Stage.PREPROCESSING, self.state.round_index)

    # stage 1

    def preprocessing_iteration(self, it: int, order_rng: np.random.Generator) -> None:
        st = self.state
        st.stage = Stage.PREPROCESSING
        self.labels_at_last_split = self.fed.train.given_labels.copy()
        n = self.fed.n_clients
        sizes = self.fed.partition.sizes()
        if self.sc.no_fraction_scheduling:
            scores = self._iteration_with_replacement(order_rng)
        elif self.sc.stage1_parallel:
            start = st.global_weights
            updates, scores = [], {}
            for k in range(n):
                w_k = self._stage1_train(start, k)
                scores[k], self.state.clients[k].last_local_losses = self._client_lid_and_losses(w_k, k)
                updates.append((w_k, sizes[k]))
            st.global_weights = aggregate(updates)
            self.participation.append(list(range(n)))
            self._end_round(range(n))
        else:
            order = order_rng.permutation(n)
            self.participation.append([int(k) for k in order])
            scores = {}
            for k in order:
                k = int(k)
                w_k = self._stage1_train(st.global_weights, k)
                scores[k], st.clients[k].last_local_losses = self._client_lid_and_losses(w_k, k)
                st.global_weights = w_k
                self._end_round([k])
        for k in range(n):
            st.clients[k].record_lid(scores.get(k, 0.0))
        self._identify_and_correct(it)
        self._snapshot(it)

    def _iteration_with_replacement(self, order_rng) -> dict[int, float]:
        # ablation: usual fraction-gamma rounds; a client's latest score stands for the iteration
        st = self.state
        n = self.fed.n_clients
        m = selection_size(self.sc.fraction, n)
        sizes = self.fed.partition.sizes()
        latest = self.latest_scores
        seen = []
        for _ in range(int(math.ceil(1.0 / self.sc.fraction))):
            sel = np.sort(order_rng.choice(n, size=m, replace=False))
            start = st.global_weights
            updates = []
            for k in sel:
                k = int(k)
                w_k = self._stage1_train(start, k)
                latest[k], st.clients[k].last_local_losses = self._client_lid_and_losses(w_k, k)
                updates.append((w_k, sizes[k]))
            st.global_weights = aggregate(updates)
            seen.extend(int(k) for k in sel)
            self._end_round(sel)
        self.participation.append(seen)
        return dict(latest)

    def _identify_and_correct(self, it: int) -> None:
        st = self.state
        fed = self.fed
        cum = np.array([c.cumulative_lid for c in st.clients])
        fit = gmm.fit_gmm2(cum)
        _, noisy = gmm.split_by_gmm(cum, fit)
        noisy = set(int(k) for k in noisy)
        for c in st.clients:
            c.is_noisy_flag = c.client_id in noisy
            if not c.is_noisy_flag or fed.dry_run:
                c.estimated_noise = 0.0
                c.detected_noisy = np.empty(0, dtype=np.int64)
                continue
            ix = c.sample_indices
            losses = c.last_local_losses
            if losses is None:
                losses = per_sample_loss(fed.model, st.global_weights, fed.train, ix)
            _, high = gmm.split_by_gmm(losses, gmm.fit_gmm2(losses))
            c.detected_noisy = ix[high]
            c.estimated_noise = len(high) / len(ix)
            if self.sc.no_correction or len(high) == 0:
                continue
            d_n = c.detected_noisy
            global_losses = per_sample_loss(fed.model, st.global_weights, fed.train, d_n)
            preds = fed.predict(st.global_weights, d_n)
            idx, labels = relabel_selection(global_losses, d_n, preds, self.sc.pi, self.sc.theta)
            self._apply_relabel(c.client_id, idx, labels, Stage.PREPROCESSING, it)

    # stages 2 and 3

    def _fedavg_rounds(self, eligible, n_rounds: int, stage: Stage, rng) -> None:
        st = self.state
        st.stage = stage
        eligible = np.asarray(sorted(eligible), dtype=np.int64)
        m = selection_size(self.sc.fraction, len(eligible))
        sizes = self.fed.partition.sizes()
        for _ in range(n_rounds):
            sel = np.sort(rng.choice(eligible, size=m, replace=False))
            start = st.global_weights
            updates = []
            for k in sel:
                k = int(k)
                ltc = self.fed.local_config(st.round_index, k)
                updates.append((self.fed.train_client(start, k, ltc, stage, st.round_index), sizes[k]))
            st.global_weights = aggregate(updates)
            self.participation.append([int(k) for k in sel])
            self._end_round(sel)

    def clean_set(self) -> list[int]:
        return [c.client_id for c in self.state.clients if c.estimated_noise < self.sc.kappa]

    def finetuning_stage(self) -> None:
        clean = self.clean_set()
        self.clean_set_size = len(clean)
        if not clean:
            raise ConfigError("no client has estimated noise below kappa; increase kappa", key="kappa")
        self._fedavg_rounds(clean, self.sc.effective_t2, Stage.FINETUNING, sub_rng(self.fed.cfg.seed, "finetune-select"))
        if self.sc.no_finetuning or self.sc.no_correction or self.fed.dry_run:
            return
        w = self.state.global_weights
        for c in self.state.clients:
            if c.client_id in clean:
                continue
            ix = c.sample_indices
            preds = self.fed.predict(w, ix)
            keep = preds.max(axis=1) >= self.sc.theta
            self._apply_relabel(c.client_id, ix[keep], np.argmax(preds[keep], axis=1), Stage.FINETUNING, 0)

    def usual_training_stage(self) -> None:
        n = self.fed.n_clients
        self._fedavg_rounds(range(n), self.sc.effective_t3, Stage.USUAL_TRAINING, sub_rng(self.fed.cfg.seed, "usual-select"))
        self.state.stage = Stage.DONE


def _result(fed: Federation, run: FedCorrRun | None, weights, rounds, mode: str, comm_cost: int,
            checkpoints: dict, started: float) -> ExperimentResult:
    cfg = fed.cfg
    true_noise = ground_truth_noise(fed.train, fed.partition, checkpoints["initial"])
    confusion = {name: confusion_matrix(fed.train, labels=snap) for name, snap in checkpoints.items()}
    report = None
    estimated = np.zeros(fed.n_clients)
    detected_clients = []
    if run is not None:
        estimated = np.array([c.estimated_noise for c in run.state.clients])
        detected_clients = [c.client_id for c in run.state.clients if c.is_noisy_flag]
        # detection truth = samples mislabeled when the last stage-1 split ran
        at_split = run.labels_at_last_split
        truth = [ix[at_split[ix] != fed.train.true_labels[ix]] for ix in fed.partition.client_indices]
        detected = [c.detected_noisy for c in run.state.clients]
        report = relabel_report(fed.train, fed.partition, checkpoints, truth, detected, "initial", "final")
    return ExperimentResult(
        mode=mode, seed=cfg.seed, config_hash=cfg.config_hash(), final_weights=weights,
        rounds=rounds, client_snapshots=run.snapshots if run else [],
        relabel_log=run.relabel_log if run else [], comm_cost=comm_cost,
        true_noise_levels=true_noise, estimated_noise=estimated,
        noisy_clients_detected=detected_clients,
        label_checkpoints=checkpoints, relabel_report=report, confusion=confusion,
        wall_clock=time.perf_counter() - started,
        clean_set_size=run.clean_set_size if run else None,
    )


def run_fedcorr(cfg: ExperimentConfig, dry_run: bool = False, fed: Federation | None = None) -> ExperimentResult:
    """Run all three stages. ``dry_run`` schedules rounds and counts cost without training."""
    started = time.perf_counter()
    fed = fed or build_federation(cfg, dry_run=dry_run)
    run = FedCorrRun(fed)
    labels = fed.train.given_labels
    checkpoints = {"initial": labels.copy()}
    order_rng = sub_rng(cfg.seed, "stage1-order")
    for it in range(1, run.sc.t1 + 1):
        run.preprocessing_iteration(it, order_rng)
        log.info("stage 1 iteration %d: noisy clients %s", it,
                 [c.client_id for c in run.state.clients if c.is_noisy_flag])
    checkpoints["after_stage1"] = labels.copy()
    run.finetuning_stage()
    checkpoints["after_stage2"] = labels.copy()
    run.usual_training_stage()
    checkpoints["final"] = labels.copy()
    return _result(fed, run, run.state.global_weights, run.rounds, "fedcorr", run.state.comm_cost, checkpoints, started)


def default_fedavg_rounds(cfg: ExperimentConfig) -> int:
    m = selection_size(cfg.fraction, cfg.n_clients)
    return int(math.ceil(cfg.n_clients * cfg.t1 / m)) + cfg.t2 + cfg.t3


def run_fedavg(cfg: ExperimentConfig, dry_run: bool = False, fed: Federation | None = None) -> ExperimentResult:
    """FedAvg with fraction-gamma sampling for ``fedavg_rounds`` rounds (default: cost-matched)."""
    started = time.perf_counter()
    fed = fed or build_federation(cfg, dry_run=dry_run)
    n_rounds = cfg.fedavg_rounds if cfg.fedavg_rounds is not None else default_fedavg_rounds(cfg)
    run = FedCorrRun(fed)
    run._fedavg_rounds(range(fed.n_clients), n_rounds, Stage.FEDAVG, sub_rng(cfg.seed, "fedavg-select"))
    checkpoints = {"initial": fed.train.given_labels.copy(), "final": fed.train.given_labels.copy()}
    return _result(fed, None, run.state.global_weights, run.rounds, "fedavg", run.state.comm_cost, checkpoints, started)
