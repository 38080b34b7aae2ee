"""Training objective, optimization loop, model selection and persistence."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import evalzsl
from . import numgrad as ng
from . import protolayer as pl
from .compgraph import (
    CompositionGraph,
    PropagationWeights,
    build_graph,
    comp_scores,
    init_node_features,
    normalize_adjacency,
    propagate,
)
from .errors import ContractError, NumericalAbort
from .independence import HsicConfig, independence_loss, one_hot
from .numgrad import Tape, Tensor, backward
from .synthdata import CompositionalLabel, Dataset, PrimitiveVocab, SplitData, load_dataset
from .tensorio import load_tensors, save_tensors

log = logging.getLogger(__name__)

# fixed pixel standardization applied before the backbone
INPUT_MEAN = 0.25
INPUT_STD = 0.3

LOSS_COMPONENTS = ("ce_attr", "ce_obj", "ce_comp", "hsic", "clst_attr", "clst_obj", "sep_obj")


@dataclass
class TrainConfig:
    dataset_path: str = "data"
    output_dir: str = ""
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 5e-5
    lambda_h: float = 10.0
    clst_weight: float = 0.01
    sep_weight: float = 0.01
    ce_attr_weight: float = 1.0
    ce_obj_weight: float = 1.0
    ce_comp_weight: float = 1.0
    proto_dim: int = 64
    graph_hidden: int = 128
    kernel_size: int = 5
    bias_grid_size: int = 201
    seed: int = 0
    finetune_backbone: bool = True
    independence: bool = True
    hsic_normalized: bool = True
    optimizer: str = "adam"
    momentum: float = 0.9
    projection: bool = False
    eval_batch_size: int = 256

    def __post_init__(self):
        weights = (
            self.lambda_h,
            self.clst_weight,
            self.sep_weight,
            self.ce_attr_weight,
            self.ce_obj_weight,
            self.ce_comp_weight,
            self.weight_decay,
        )
        if any(w < 0 for w in weights):
            raise ContractError("loss weights and weight decay must be nonnegative")
        if self.batch_size < 1:
            raise ContractError("batch size must be at least 1")
        if self.epochs < 0:
            raise ContractError("epochs must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")

    @property
    def effective_lambda_h(self) -> float:
        return self.lambda_h if self.independence else 0.0

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"config line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in types:
                raise ContractError(f"unknown config key {key!r}")
            kwargs[key] = _parse(value, types[key])
        return cls(**kwargs)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(value, typ: str):
    if not isinstance(value, str):
        return value
    if typ == "bool":
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"not a boolean: {value!r}")
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    return value


class ProtoPropModel:
    """Backbone, prototype layers and propagation weights for one label space."""

    def __init__(self, vocab: PrimitiveVocab, seen: Sequence[int], unseen: Sequence[int], config: TrainConfig):
        self.vocab = vocab
        self.seen = list(seen)
        self.unseen = list(unseen)
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        c = config.proto_dim
        self.backbone = pl.FeatureExtractor.init(rng, channels=(3, 32, 64, c), kernel=config.kernel_size)
        self.attr_protos = pl.PrototypeSet.init(vocab.n_attrs, c, pl.ATTRIBUTE, rng)
        self.obj_protos = pl.PrototypeSet.init(vocab.n_objs, c, pl.OBJECT, rng)
        out_dim = c
        self.graph_weights = PropagationWeights.init(c, config.graph_hidden, out_dim, rng)
        self.projection = None
        if config.projection:
            bound = math.sqrt(6.0 / (2 * c))
            self.projection = Tensor(rng.uniform(-bound, bound, size=(c, out_dim)), requires_grad=True, name="projection")
        comps = [CompositionalLabel(a, o) for a in range(vocab.n_attrs) for o in range(vocab.n_objs)]
        self.graph: CompositionGraph = build_graph(vocab, comps)
        self.a_norm = normalize_adjacency(self.graph)
        self.unseen_mask = np.zeros(vocab.n_pairs, dtype=bool)
        self.unseen_mask[self.unseen] = True
        self._seen_pos = np.full(vocab.n_pairs, -1, dtype=np.int64)
        self._seen_pos[self.seen] = np.arange(len(self.seen))
        for p in self.backbone.parameters():
            p.requires_grad = config.finetune_backbone

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = [(p.name, p) for p in self.backbone.parameters()]
        params += [(self.attr_protos.prototypes.name, self.attr_protos.prototypes)]
        params += [(self.obj_protos.prototypes.name, self.obj_protos.prototypes)]
        params += [(p.name, p) for p in self.graph_weights.parameters()]
        if self.projection is not None:
            params.append((self.projection.name, self.projection))
        return params

    def trainable(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters() if p.requires_grad]

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise ContractError(f"checkpoint lacks parameter {name!r}")
            if state[name].shape != p.shape:
                raise ContractError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    # forward pieces

    def features(self, images) -> Tensor:
        x = (np.asarray(images, dtype=np.float64) - INPUT_MEAN) / INPUT_STD
        return self.backbone(x)

    def comp_prototypes(self) -> Tensor:
        x = init_node_features(self.graph, self.attr_protos.prototypes, self.obj_protos.prototypes)
        return propagate(x, self.a_norm, self.graph_weights, len(self.graph.compositions))

    def pooled(self, fm: Tensor) -> Tensor:
        z = pl.average_pool(fm)
        return z @ self.projection if self.projection is not None else z

    def scores(self, images) -> np.ndarray:
        """Compositional scores over the full A x O grid, no recording."""
        fm = self.features(images)
        return comp_scores(self.comp_prototypes(), self.pooled(fm)).data

    def loss_components(self, images, attrs, objs, comps) -> dict[str, Tensor]:
        cfg = self.config
        fm = self.features(images)
        sm_a = pl.similarity_map(fm, self.attr_protos)
        sm_o = pl.similarity_map(fm, self.obj_protos)
        parts = {
            "ce_attr": pl.ce_loss(pl.compat_scores(sm_a), attrs),
            "ce_obj": pl.ce_loss(pl.compat_scores(sm_o), objs),
        }
        s_c = comp_scores(self.comp_prototypes(), self.pooled(fm))
        seen_pos = self._seen_pos[comps]
        if np.any(seen_pos < 0):
            raise ContractError("training batch contains unseen compositions")
        parts["ce_comp"] = pl.ce_loss(s_c[:, self.seen], seen_pos)
        hsic_cfg = HsicConfig(cfg.effective_lambda_h, cfg.hsic_normalized)
        if hsic_cfg.lambda_h > 0 and len(attrs) >= hsic_cfg.min_batch:
            z_a = pl.softmax_pool(sm_a, fm, attrs)
            z_o = pl.softmax_pool(sm_o, fm, objs)
            parts["hsic"] = independence_loss(
                z_a, z_o, one_hot(attrs, self.vocab.n_attrs), one_hot(objs, self.vocab.n_objs), hsic_cfg
            )
        else:
            parts["hsic"] = Tensor(0.0)
        parts["clst_attr"] = pl.cluster_cost(fm, self.attr_protos, attrs)
        parts["clst_obj"] = pl.cluster_cost(fm, self.obj_protos, objs)
        parts["sep_obj"] = pl.separation_cost(fm, self.obj_protos, objs)
        parts["_train_correct"] = Tensor(float(np.sum(np.argmax(s_c.data[:, self.seen], axis=1) == seen_pos)))
        return parts


def total_loss(parts: dict[str, Tensor], config: TrainConfig) -> Tensor:
    """Weighted sum of the loss components.

    The HSIC component already carries lambda_h.  Raises NumericalAbort
    naming the first non-finite component.
    """
    for name in LOSS_COMPONENTS:
        v = parts[name].item()
        if not math.isfinite(v):
            raise NumericalAbort(name, v)
    total = (
        parts["ce_attr"] * config.ce_attr_weight
        + parts["ce_obj"] * config.ce_obj_weight
        + parts["ce_comp"] * config.ce_comp_weight
        + parts["hsic"]
        + (parts["clst_attr"] + parts["clst_obj"]) * config.clst_weight
        + parts["sep_obj"] * config.sep_weight
    )
    if not math.isfinite(total.item()):
        raise NumericalAbort("total", total.item())
    return total


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        b1, b2 = self.betas
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g + self.wd * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    """Heavy-ball momentum SGD with L2 weight decay."""

    def __init__(self, params, lr, weight_decay=0.0, momentum=0.9):
        self.params = list(params)
        self.lr, self.wd, self.momentum = lr, weight_decay, momentum
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        for p, g, b in zip(self.params, grads, self.buf):
            b *= self.momentum
            b += g + self.wd * p.data
            p.data = p.data - self.lr * b


def make_optimizer(params, config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(params, config.learning_rate, config.weight_decay)
    return SGD(params, config.learning_rate, config.weight_decay, config.momentum)


@dataclass
class Checkpoint:
    params: dict  # name -> ndarray
    config: TrainConfig
    epoch: int
    val_harmonic: float
    vocab: PrimitiveVocab
    seen: list
    unseen: list

    def model(self) -> ProtoPropModel:
        m = ProtoPropModel(self.vocab, self.seen, self.unseen, self.config)
        m.load_state(self.params)
        return m

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = list(self.params)
        save_tensors(directory / "params.ppt", [self.params[n] for n in names])
        manifest = "".join(f"{n} {'x'.join(map(str, self.params[n].shape))}\n" for n in names)
        (directory / "manifest.txt").write_text(manifest)
        (directory / "config.txt").write_text(self.config.to_text())
        state = {
            "epoch": self.epoch,
            "val_harmonic": self.val_harmonic,
            "vocab": self.vocab.to_dict(),
            "seen": self.seen,
            "unseen": self.unseen,
        }
        (directory / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        directory = Path(directory)
        for fname in ("params.ppt", "manifest.txt", "config.txt", "state.json"):
            if not (directory / fname).exists():
                raise ContractError(f"checkpoint file missing: {directory / fname}")
        names = [line.split()[0] for line in (directory / "manifest.txt").read_text().splitlines() if line.strip()]
        arrays = load_tensors(directory / "params.ppt")
        if len(names) != len(arrays):
            raise ContractError("checkpoint manifest does not match parameter blob")
        state = json.loads((directory / "state.json").read_text())
        return cls(
            params=dict(zip(names, arrays)),
            config=TrainConfig.load(directory / "config.txt"),
            epoch=state["epoch"],
            val_harmonic=state["val_harmonic"],
            vocab=PrimitiveVocab.from_dict(state["vocab"]),
            seen=list(state["seen"]),
            unseen=list(state["unseen"]),
        )


@dataclass
class MetricsRecord:
    epochs: list = field(default_factory=list)  # one dict per epoch
    best_epoch: int = 0
    test: Optional[dict] = None

    def log_lines(self) -> list[str]:
        return [json.dumps(e, sort_keys=True) for e in self.epochs]


def _check_label_space(ckpt: Checkpoint, ds: Dataset) -> None:
    if ckpt.vocab != ds.vocab or list(ckpt.seen) != list(ds.seen) or list(ckpt.unseen) != list(ds.unseen):
        raise ContractError("checkpoint label space does not match the dataset")


def score_matrix(model: ProtoPropModel, part: SplitData, batch_size: int = 256) -> evalzsl.ScoreMatrix:
    rows = [model.scores(part.images[i : i + batch_size]) for i in range(0, len(part), batch_size)]
    scores = np.concatenate(rows) if rows else np.zeros((0, model.vocab.n_pairs))
    return evalzsl.ScoreMatrix(scores, part.comps, model.unseen_mask)


def evaluate_model(model: ProtoPropModel, part: SplitData) -> evalzsl.EvalReport:
    sm = score_matrix(model, part, model.config.eval_batch_size)
    return evalzsl.report(sm, steps=model.config.bias_grid_size)


def evaluate(checkpoint: Checkpoint, dataset: Dataset, split: str = "val") -> evalzsl.EvalReport:
    _check_label_space(checkpoint, dataset)
    return evaluate_model(checkpoint.model(), getattr(dataset, split))


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 7, epoch])).permutation(n)


def train(config: TrainConfig, dataset: Optional[Dataset] = None) -> tuple[Checkpoint, MetricsRecord]:
    """Train, keeping the parameters with the best validation harmonic mean.

    If ``config.output_dir`` is set, writes ``metrics.log`` (one JSON record
    per epoch), the best checkpoint, ``report.json`` and the test curve there.
    """
    ds = load_dataset(config.dataset_path) if dataset is None else dataset
    ds.validate()
    model = ProtoPropModel(ds.vocab, ds.seen, ds.unseen, config)
    params = model.trainable()
    opt = make_optimizer(params, config)
    out_dir = Path(config.output_dir) if config.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.log").write_text("")

    def snapshot(epoch, hm):
        return Checkpoint(model.state(), config, epoch, hm, ds.vocab, list(ds.seen), list(ds.unseen))

    best = snapshot(0, evaluate_model(model, ds.val).best_harmonic)
    record = MetricsRecord()
    train_part = ds.train
    for epoch in range(1, config.epochs + 1):
        order = _epoch_order(config.seed, epoch, len(train_part))
        sums = dict.fromkeys(LOSS_COMPONENTS + ("total",), 0.0)
        correct = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            with Tape() as tape:
                parts = model.loss_components(
                    train_part.images[idx], train_part.attrs[idx], train_part.objs[idx], train_part.comps[idx]
                )
                loss = total_loss(parts, config)
            grads = backward(tape, loss, params).grads
            opt.step(grads)
            for p in params:
                if not np.all(np.isfinite(p.data)):
                    raise NumericalAbort(f"parameter {p.name}")
            w = len(idx) / len(order)
            for name in LOSS_COMPONENTS:
                sums[name] += w * parts[name].item()
            sums["total"] += w * loss.item()
            correct += parts["_train_correct"].item()
        val = evaluate_model(model, ds.val)
        entry = {"epoch": epoch, "train_acc": correct / len(order), **{f"loss_{k}": v for k, v in sums.items()}}
        entry.update({f"val_{k}": v for k, v in val.metrics().items()})
        record.epochs.append(entry)
        log.info("epoch %d loss %.4f val harmonic %.4f", epoch, sums["total"], val.best_harmonic)
        if out_dir is not None:
            with open(out_dir / "metrics.log", "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if val.best_harmonic > best.val_harmonic:
            best = snapshot(epoch, val.best_harmonic)
    record.best_epoch = best.epoch
    test = evaluate(best, ds, "test")
    record.test = test.metrics()
    if out_dir is not None:
        best.save(out_dir / "checkpoint")
        evalzsl.write_report(test, out_dir / "report.json")
        evalzsl.write_curve(test.curve, out_dir / "test_curve.txt")
    return best, record


# ablations


ABLATION_ARMS = (
    ("indep+finetune", True, True),
    ("no-indep+finetune", False, True),
    ("indep+frozen", True, False),
    ("no-indep+frozen", False, False),
)


@dataclass
class AblationTable:
    per_seed: dict  # arm -> list of test metric dicts, one per seed
    seeds: list

    def summary(self) -> dict:
        out = {}
        for arm, runs in self.per_seed.items():
            row = {}
            for key in ("best_seen", "best_unseen", "best_harmonic"):
                vals = np.array([r[key] for r in runs])
                se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
                row[key] = (float(vals.mean()), se)
            out[arm] = row
        return out

    def format(self) -> str:
        lines = [f"{'arm':<20} {'seen':>16} {'unseen':>16} {'harmonic':>16}"]
        for arm, row in self.summary().items():
            cells = [f"{100 * m:6.1f} +- {100 * s:4.1f}" for m, s in (row[k] for k in ("best_seen", "best_unseen", "best_harmonic"))]
            lines.append(f"{arm:<20} " + " ".join(f"{c:>16}" for c in cells))
        return "\n".join(lines) + "\n"


def ablation_suite(
    config: TrainConfig, seeds: Sequence[int] = (0, 1, 2), dataset: Optional[Dataset] = None, arms=ABLATION_ARMS
) -> AblationTable:
    """{independence on, off} x {finetuned, frozen backbone}, each over ``seeds``."""
    ds = load_dataset(config.dataset_path) if dataset is None else dataset
    per_seed = {}
    for name, indep, finetune in arms:
        runs = []
        for seed in seeds:
            out = str(Path(config.output_dir) / name / f"seed{seed}") if config.output_dir else ""
            cfg = dataclasses.replace(config, seed=seed, independence=indep, finetune_backbone=finetune, output_dir=out)
            _, rec = train(cfg, ds)
            runs.append(rec.test)
        per_seed[name] = runs
    return AblationTable(per_seed, list(seeds))


def export_embeddings(checkpoint: Checkpoint, dataset: Dataset, split: str, path) -> Path:
    """Write softmax-pooled attribute embeddings and labels for every sample."""
    _check_label_space(checkpoint, dataset)
    model = checkpoint.model()
    part: SplitData = getattr(dataset, split)
    bs = model.config.eval_batch_size
    rows = []
    for i in range(0, len(part), bs):
        fm = model.features(part.images[i : i + bs])
        sm = pl.similarity_map(fm, model.attr_protos)
        rows.append(pl.softmax_pool(sm, fm, part.attrs[i : i + bs]).data)
    z = np.concatenate(rows) if rows else np.zeros((0, model.attr_protos.dim))
    labels = np.stack([part.attrs, part.objs], axis=1).astype(np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_tensors(path, [z, labels])
    manifest = f"z_attr {z.shape[0]}x{z.shape[1]}\nlabels {labels.shape[0]}x2 attribute,object\n"
    path.with_suffix(".manifest.txt").write_text(manifest)
    return path
