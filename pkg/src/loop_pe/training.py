"""Dataset generation, losses, the Adam training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import CheckpointError, ContractError, NonFiniteError, ShapeError, TrainingDivergence
from .gauge import apply_tensor
from .net import Model, ModelConfig, _layer_shapes
from .oracle import OracleSolution, _id_key, solve_exact
from .problem import AgentRecord, Instance, is_feasible_instance

__all__ = [
    "DatasetSpec",
    "Sample",
    "TrainConfig",
    "AdamState",
    "base_agents",
    "random_instance",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "sample_loss",
    "loss",
    "train_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_MODES = ("objective", "imitation")


@dataclass(frozen=True)
class DatasetSpec:
    n_agents_total: int = 20
    n_samples: int = 400
    n_test: int = 100
    capacity_range: tuple[float, float] = (10.0, 25.0)
    demand_range: tuple[float, float] = (5.0, 20.0)
    p_omax: float = 100.0
    fluctuation: float = 0.10
    subset_min: int = 10
    subset_max: int = 20
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "capacity_range", tuple(float(v) for v in self.capacity_range))
        object.__setattr__(self, "demand_range", tuple(float(v) for v in self.demand_range))
        problems = []
        if self.n_agents_total < 1:
            problems.append("n_agents_total must be >= 1")
        if not 0 <= self.n_test < self.n_samples:
            problems.append(f"n_test ({self.n_test}) must be smaller than n_samples ({self.n_samples})")
        lo, hi = self.capacity_range
        if not 0 < lo <= hi:
            problems.append(f"capacity_range must be positive and ordered, got {self.capacity_range}")
        lo, hi = self.demand_range
        if not 0 <= lo <= hi or hi <= 0:
            problems.append(f"demand_range must be positive and ordered, got {self.demand_range}")
        if not self.p_omax > 0:
            problems.append("p_omax must be positive")
        if not 0 <= self.fluctuation < 1:
            problems.append("fluctuation must lie in [0, 1)")
        if self.subset_min < 1:
            problems.append("subset_min must be >= 1")
        if self.subset_max < self.subset_min:
            problems.append("subset_max must be >= subset_min")
        if self.subset_max > self.n_agents_total:
            problems.append(f"subset_max ({self.subset_max}) exceeds n_agents_total ({self.n_agents_total})")
        if self.subset_min > self.n_agents_total:
            problems.append(f"subset_min ({self.subset_min}) exceeds n_agents_total ({self.n_agents_total})")
        if problems:
            raise ContractError("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["capacity_range"] = list(self.capacity_range)
        d["demand_range"] = list(self.demand_range)
        return d


@dataclass(frozen=True)
class Sample:
    sample_id: int
    instance: Instance
    label: OracleSolution


@dataclass(frozen=True)
class TrainConfig:
    loss_mode: str = "objective"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 500
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ContractError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("beta1 and beta2 must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# data


def base_agents(spec: DatasetSpec, rng: np.random.Generator | None = None) -> list[AgentRecord]:
    """Draw the fixed agent pool: one capacity and one demand per agent."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    width = len(str(spec.n_agents_total - 1))
    caps = rng.uniform(*spec.capacity_range, size=spec.n_agents_total)
    dems = rng.uniform(*spec.demand_range, size=spec.n_agents_total)
    return [
        AgentRecord(f"der-{i:0{width}d}", float(c), float(d))
        for i, (c, d) in enumerate(zip(caps, dems))
    ]


def random_instance(
    n: int,
    rng: np.random.Generator,
    capacity_range: tuple[float, float] = (10.0, 25.0),
    demand_range: tuple[float, float] = (5.0, 20.0),
    p_omax: float = 100.0,
) -> Instance:
    """``n`` agents with uniform capacities and demands; infeasible draws are redrawn."""
    if n < 1:
        raise ContractError("an instance needs at least one agent")
    while True:
        caps = rng.uniform(*capacity_range, size=n)
        dems = rng.uniform(*demand_range, size=n)
        agents = tuple(AgentRecord(f"a{i}", float(c), float(d)) for i, (c, d) in enumerate(zip(caps, dems)))
        inst = Instance(agents, p_omax)
        if is_feasible_instance(inst):
            return inst


def _label_all(instances: Sequence[Instance], threads: int) -> list[OracleSolution]:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(solve_exact, instances))
    return [solve_exact(inst) for inst in instances]


def generate_dataset(
    spec: DatasetSpec,
    agents: Sequence[AgentRecord] | None = None,
    threads: int = 1,
) -> tuple[list[Sample], list[Sample]]:
    """Draw ``spec.n_samples`` labelled scenes and split off the last ``n_test``.

    Each scene activates a random subset of the agent pool (size uniform in
    ``[subset_min, subset_max]``) and perturbs every active agent's capacity
    and demand by an independent factor ``1 + U(-fluctuation, fluctuation)``.
    Draws follow the canonical (id-sorted) pool order, so handing in the same
    pool in another order reproduces the same scenes.
    """
    rng = np.random.default_rng(spec.seed)
    pool = base_agents(spec, rng) if agents is None else list(agents)
    if spec.subset_max > len(pool):
        raise ContractError(f"subset_max ({spec.subset_max}) exceeds the pool size ({len(pool)})")
    pool = sorted(pool, key=lambda a: _id_key(a.agent_id))
    f = spec.fluctuation

    instances = []
    rejected = 0
    while len(instances) < spec.n_samples:
        k = int(rng.integers(spec.subset_min, spec.subset_max + 1))
        idx = rng.choice(len(pool), size=k, replace=False)
        noise = rng.uniform(-f, f, size=(k, 2))
        chosen = [
            AgentRecord(pool[j].agent_id, pool[j].p_c * (1.0 + noise[r, 0]), pool[j].p_d * (1.0 + noise[r, 1]))
            for r, j in enumerate(idx)
        ]
        inst = Instance(tuple(chosen), spec.p_omax)
        if not is_feasible_instance(inst):
            rejected += 1
            continue
        instances.append(inst)
    if rejected:
        log.info("resampled %d infeasible draws", rejected)

    labels = _label_all(instances, threads)
    samples = [Sample(i, inst, lab) for i, (inst, lab) in enumerate(zip(instances, labels))]
    n_train = spec.n_samples - spec.n_test
    return samples[:n_train], samples[n_train:]


def _sample_record(s: Sample) -> dict:
    return {
        "sample_id": s.sample_id,
        "p_omax": s.instance.p_omax,
        "agents": [{"agent_id": a.agent_id, "p_c": a.p_c, "p_d": a.p_d} for a in s.instance.agents],
        "label": {
            "u_star": [float(v) for v in s.label.u_star],
            "dual_lambda": float(s.label.dual_lambda),
            "status": s.label.status,
        },
    }


def write_dataset(path: str | Path, samples: Iterable[Sample]) -> None:
    """One JSON object per line; floats are written at full round-trip precision."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(_sample_record(s), separators=(",", ":")))
            fh.write("\n")


def read_dataset(path: str | Path) -> list[Sample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                agents = tuple(AgentRecord(a["agent_id"], float(a["p_c"]), float(a["p_d"])) for a in rec["agents"])
                lab = rec["label"]
                label = OracleSolution(np.array(lab["u_star"], dtype=np.float64), float(lab["dual_lambda"]), lab["status"])
                samples.append(Sample(int(rec["sample_id"]), Instance(agents, float(rec["p_omax"])), label))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed sample record ({exc})") from exc
    return samples


# ---------------------------------------------------------------------------
# losses


def sample_loss(model: Model, sample: Sample, mode: str) -> Tensor:
    """Squared distance of the feasible dispatch to ``p_c`` (objective) or to ``u*`` (imitation)."""
    u = apply_tensor(model, sample.instance)
    if mode == "objective":
        target = sample.instance.p_c
    elif mode == "imitation":
        target = np.asarray(sample.label.u_star, dtype=np.float64)
    else:
        raise ContractError(f"unknown loss mode {mode!r}")
    return ad.sum_all(ad.square(u - Tensor(target.reshape(u.shape))))


def loss(model: Model, batch: Sequence[Sample], mode: str) -> Tensor:
    """Mean per-sample loss over a non-empty batch."""
    if not batch:
        raise ContractError("loss needs a non-empty batch")
    total = sample_loss(model, batch[0], mode)
    for s in batch[1:]:
        total = total + sample_loss(model, s, mode)
    return total * (1.0 / len(batch))


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    """First/second moment estimates per parameter name, plus the step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def train_step(model: Model, batch: Sequence[Sample], config: TrainConfig, state: AdamState) -> tuple[Model, float]:
    """One bias-corrected Adam update on the batch mean loss.

    Samples are differentiated one at a time (agent counts differ, so there
    is no padding-free way to stack them) and their gradients summed in batch
    order. ``state`` is updated in place.
    """
    if not batch:
        raise ContractError("train_step needs a non-empty batch")
    names = model.names()
    params = model.parameters()
    scale = 1.0 / len(batch)
    grad_sum = {name: np.zeros(p.shape) for name, p in zip(names, params)}
    total = 0.0
    for s in batch:
        try:
            with Tape() as tape:
                value = sample_loss(model, s, config.loss_mode)
            grads = ad.backward(tape, value, wrt=params)
        except NonFiniteError as exc:
            raise TrainingDivergence(f"non-finite loss on sample {s.sample_id}: {exc}", sample_id=s.sample_id) from exc
        v = value.item()
        if not math.isfinite(v):
            raise TrainingDivergence(f"non-finite loss on sample {s.sample_id}", sample_id=s.sample_id)
        total += v * scale
        for name, p in zip(names, params):
            grad_sum[name] += grads[p] * scale

    state.t += 1
    b1, b2 = config.beta1, config.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    new_values = {}
    for name, p in zip(names, params):
        g = grad_sum[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = config.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + config.epsilon)
        new_values[name] = p.data - step
    return model.with_values(new_values), total


def train(
    model: Model,
    samples: Sequence[Sample],
    config: TrainConfig,
    on_epoch: Callable[[int, float], None] | None = None,
) -> tuple[Model, list[float]]:
    """Run ``config.epochs`` shuffled passes; returns the model and per-epoch mean losses."""
    if not samples:
        raise ContractError("training set is empty")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        weighted = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[start:start + config.batch_size]]
            model, value = train_step(model, batch, config, state)
            weighted += value * len(batch)
        mean = weighted / len(samples)
        history.append(mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return model, history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path: str | Path, train_config: TrainConfig | None = None) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "parameters": {
            name: {"shape": list(p.shape), "values": [float(x) for x in p.data.ravel()]}
            for name, p in model.params.items()
        },
    }
    if train_config is not None:
        doc["train_config"] = train_config.to_dict()
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> Model:
    """Rebuild a model from :func:`save_checkpoint` output, bit for bit."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CheckpointError(f"{path}: checkpoint must be a JSON object")
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {version!r} (expected {CHECKPOINT_VERSION})")
    try:
        config = ModelConfig.from_dict(doc["model_config"])
        stored = doc["parameters"]
        params = {}
        for name, shape in _layer_shapes(config):
            entry = stored[name]
            values = np.array(entry["values"], dtype=np.float64)
            if tuple(entry["shape"]) != shape or values.size != shape[0] * shape[1]:
                raise CheckpointError(f"{path}: parameter {name} has shape {entry['shape']}, expected {list(shape)}")
            params[name] = Tensor(values.reshape(shape), requires_grad=True, name=name)
        extra = set(stored) - set(params)
        if extra:
            raise CheckpointError(f"{path}: unexpected parameters {sorted(extra)}")
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, ContractError, ShapeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc!r})") from exc
    return Model(config, params)
