"""Training stages and evaluation protocols.

Stage order: Gaussian-similarity fine-tuning of F, then joint training of the
encoder, decoder, mapping and classifier with F frozen, then synthesis of
unseen-class features and training of the final softmax classifier.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .datasets import Dataset
from .evalmetrics import clustering_nmi, harmonic_mean, per_class_top1, variance_stats
from .ndcore import MLP, Adam, child_seeds, make_rng, minibatches
from .objectives import gaussian_similarity_loss, joint_objective, softmax_cross_entropy
from .zslmodel import ZslModel

log = logging.getLogger(__name__)

ABLATION_ROWS = ("NA", "CLS", "CLS-GAUSSIAN", "CLS-GAUSSIAN-NOISE")


@dataclass
class TrainConfig:
    lambda_cls: float = 1.0
    lambda_cls_prime: float = 0.1
    alpha: float = 0.2
    gamma: float = 0.0  # 0 means 1 / feature width
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    finetune_epochs: int = 100
    cvae_epochs: int = 100
    classifier_epochs: int = 100
    batch_size: int = 64
    n_synth_per_unseen: int = 300
    synth_seen: bool = False
    seed: int = 7
    d_p: int = 512
    hidden: int = 4096
    decoder_output: str = "relu"
    use_projection: bool = True
    use_gaussian_finetune: bool = True
    use_noise: bool = True

    def validate(self) -> "TrainConfig":
        for name in ("lambda_cls", "lambda_cls_prime", "alpha", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("finetune_epochs", "cvae_epochs", "classifier_epochs", "batch_size",
                     "n_synth_per_unseen", "d_p", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.decoder_output not in ("relu", "linear"):
            raise ValueError(f"decoder_output must be 'relu' or 'linear', got {self.decoder_output!r}")
        return self

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.use_noise else 0.0

    def gamma_for(self, d_f: int) -> float:
        return self.gamma if self.gamma > 0 else 1.0 / d_f

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw).validate()


# fine-grained presets use a 512-d projection and alpha 0.2; the coarse one 2048 and alpha 1
PRESETS = {
    "cub": {"d_p": 512, "alpha": 0.2},
    "sun": {"d_p": 512, "alpha": 0.2},
    "awa2": {"d_p": 2048, "alpha": 1.0},
    # desk-scale runs on the synthetic benchmark
    "synthetic": {"d_p": 512, "hidden": 512, "finetune_epochs": 100, "cvae_epochs": 40,
                  "classifier_epochs": 30, "n_synth_per_unseen": 200},
}


@dataclass
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    n_episodes: int = 200
    seed: int = 7


STAGES = ("finetune", "cvae", "synthesis", "classifier")


def stage_seeds(seed: int) -> dict[str, int]:
    """Independent per-stage seeds derived from the master seed."""
    return dict(zip(STAGES, child_seeds(seed, len(STAGES))))


def seen_index(model: ZslModel, labels: np.ndarray) -> np.ndarray:
    """Map class ids to positions in ``model.seen_classes``."""
    lookup = {int(c): i for i, c in enumerate(model.seen_classes)}
    try:
        return np.array([lookup[int(c)] for c in labels], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"class {exc.args[0]} is not a seen class") from None


# -- stage 1: Gaussian-similarity fine-tuning --------------------------------------

def train_gaussian_map(x: np.ndarray, y: np.ndarray, n_classes: int, config: TrainConfig, seed: int
                       ) -> tuple[MLP, np.ndarray, list[float]]:
    """Fit an identity-initialized affine map F and class matrix W' under the
    Gaussian-similarity loss. ``y`` holds indices in ``[0, n_classes)``.

    W' starts at the class means of ``x``.
    """
    if x.shape[0] == 0:
        raise ValueError("fine-tuning needs a non-empty training set")
    d_f = x.shape[1]
    gamma = config.gamma_for(d_f)
    fmap = MLP([d_f, d_f], ["linear"])
    fmap.weights[0] = np.eye(d_f)
    centers = np.zeros((d_f, n_classes))
    for k in range(n_classes):
        if np.any(y == k):
            centers[:, k] = x[y == k].mean(axis=0)
    opt = Adam(fmap.params() + [centers], config.learning_rate, config.beta1, config.beta2)
    rng = make_rng(seed)
    trace = []
    for _ in range(config.finetune_epochs):
        total, count = 0.0, 0
        for idx in minibatches(x.shape[0], config.batch_size, rng):
            h, cache = fmap.forward(x[idx])
            loss, g = gaussian_similarity_loss(h, centers, y[idx], gamma)
            f_grads, _ = fmap.backward(cache, g["features"])
            opt.step(f_grads + [g["weights"]])
            total += loss.total * len(idx)
            count += len(idx)
        trace.append(total / count)
    return fmap, centers, trace


def stage_finetune_gaussian(dataset: Dataset, model: ZslModel, config: TrainConfig) -> list[float]:
    """Train F and W' on seen training rows; a no-op leaving F at identity when disabled."""
    if not config.use_gaussian_finetune:
        return []
    rows = dataset.train_rows
    fmap, centers, trace = train_gaussian_map(dataset.features[rows], seen_index(model, dataset.labels[rows]),
                                              model.k_seen, config, stage_seeds(config.seed)["finetune"])
    model.finetune_map = fmap
    model.gauss_weights = centers
    model.finetune_enabled = True
    return trace


# -- stage 2: joint CVAE / mapping / classifier training ---------------------------

def train_params(model: ZslModel) -> dict[str, list[np.ndarray]]:
    nets = ["encoder", "decoder", "classifier"] + (["mapping"] if model.use_projection else [])
    return {name: model.net(name).params() for name in nets}


def stage_train_cvae(dataset: Dataset, model: ZslModel, config: TrainConfig) -> dict[str, list[float]]:
    """Minimize the joint objective over seen training rows; F stays frozen.

    Returns per-epoch means of the total loss and each component.
    """
    rows = dataset.train_rows
    x = dataset.features[rows]
    if x.shape[1] != model.d_f:
        raise ValueError(f"dataset has {x.shape[1]} feature columns, model expects {model.d_f}")
    if dataset.attributes.shape[1] != model.d_a:
        raise ValueError(f"dataset has {dataset.attributes.shape[1]} attribute columns, model expects {model.d_a}")
    y = seen_index(model, dataset.labels[rows])
    a = dataset.attributes[dataset.labels[rows]]
    params = train_params(model)
    names = list(params)
    opt = Adam([p for n in names for p in params[n]], config.learning_rate, config.beta1, config.beta2)
    rng = make_rng(stage_seeds(config.seed)["cvae"])
    trace: dict[str, list[float]] = {"total": [], "reconstruction": [], "kl": [], "cls": [], "cls_prime": []}
    for _ in range(config.cvae_epochs):
        sums = dict.fromkeys(trace, 0.0)
        for idx in minibatches(x.shape[0], config.batch_size, rng):
            loss, grads = joint_objective(model, x[idx], a[idx], y[idx], config.lambda_cls,
                                          config.lambda_cls_prime, config.effective_alpha, rng)
            opt.step([g for n in names for g in grads[n]])
            sums["total"] += loss.total * len(idx)
            for k, v in loss.components.items():
                sums[k] += v * len(idx)
        for k in trace:
            trace[k].append(sums[k] / x.shape[0])
    return trace


# -- stage 3: synthesis -------------------------------------------------------------

def stage_synthesize_unseen(model: ZslModel, attributes: np.ndarray, split, config: TrainConfig,
                            include_seen: bool | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``n_synth_per_unseen`` decoded rows per unseen class (and per seen class if requested)."""
    if split.unseen.size == 0:
        raise ValueError("the split has no unseen classes to synthesize")
    include_seen = config.synth_seen if include_seen is None else include_seen
    classes = np.concatenate([split.unseen, split.seen]) if include_seen else split.unseen
    rng = make_rng(stage_seeds(config.seed)["synthesis"])
    feats, labels = [], []
    for c in classes:
        feats.append(model.synthesize_features(attributes[c], config.n_synth_per_unseen, rng))
        labels.append(np.full(config.n_synth_per_unseen, c, dtype=np.int64))
    return np.vstack(feats), np.concatenate(labels)


# -- stage 4: final classifier ------------------------------------------------------

class SoftmaxClassifier:
    """Linear softmax head over an explicit list of class ids."""

    def __init__(self, classes, dim: int):
        self.classes = np.asarray(classes, dtype=np.int64)
        self.net = MLP([dim, self.classes.size], ["linear"])

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.net(x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.logits(x), axis=1)]

    def fit(self, x: np.ndarray, labels: np.ndarray, epochs: int, batch_size: int, lr: float,
            seed: int, beta1: float = 0.9, beta2: float = 0.999) -> list[float]:
        lookup = {int(c): i for i, c in enumerate(self.classes)}
        missing = set(lookup) - {int(c) for c in np.unique(labels)}
        if missing:
            raise ValueError(f"no training samples for classes {sorted(missing)}")
        y = np.array([lookup[int(c)] for c in labels], dtype=np.int64)
        opt = Adam(self.net.params(), lr, beta1, beta2)
        rng = make_rng(seed)
        trace = []
        for _ in range(epochs):
            total = 0.0
            for idx in minibatches(x.shape[0], batch_size, rng):
                out, cache = self.net.forward(x[idx])
                value, dlogits = softmax_cross_entropy(out, y[idx])
                grads, _ = self.net.backward(cache, dlogits)
                opt.step(grads)
                total += value * len(idx)
            trace.append(total / x.shape[0])
        return trace


def stage_train_final_classifier(features: np.ndarray, labels: np.ndarray, classes, config: TrainConfig
                                 ) -> SoftmaxClassifier:
    clf = SoftmaxClassifier(classes, features.shape[1])
    clf.fit(features, labels, config.classifier_epochs, config.batch_size, config.learning_rate,
            stage_seeds(config.seed)["classifier"], config.beta1, config.beta2)
    return clf


def zsl_training_set(model, dataset, config) -> tuple[np.ndarray, np.ndarray]:
    return stage_synthesize_unseen(model, dataset.attributes, dataset.split, config, include_seen=False)


def gzsl_training_set(model, dataset, config) -> tuple[np.ndarray, np.ndarray]:
    """Embedded real seen training rows plus synthesized unseen rows."""
    synth_x, synth_y = stage_synthesize_unseen(model, dataset.attributes, dataset.split, config)
    rows = dataset.train_rows
    return (np.vstack([model.embed(dataset.features[rows]), synth_x]),
            np.concatenate([dataset.labels[rows], synth_y]))


# -- evaluation ---------------------------------------------------------------------

def evaluate_zsl(classifier: SoftmaxClassifier, model: ZslModel, features: np.ndarray, labels: np.ndarray
                 ) -> tuple[dict[int, float], float]:
    """Per-class top-1 of ``classifier`` on test rows passed through F then M."""
    unknown = np.setdiff1d(labels, classifier.classes)
    if unknown.size:
        raise ValueError(f"test labels {unknown.tolist()} are not classifier classes")
    return per_class_top1(classifier.predict(model.embed(features)), labels)


@dataclass
class GzslResult:
    u: float
    s: float
    h: float


def evaluate_gzsl(classifier: SoftmaxClassifier, model: ZslModel, seen_x, seen_y, unseen_x, unseen_y) -> GzslResult:
    if len(seen_y) == 0 or len(unseen_y) == 0:
        raise ValueError("GZSL evaluation needs both seen and unseen test rows")
    _, s = evaluate_zsl(classifier, model, seen_x, seen_y)
    _, u = evaluate_zsl(classifier, model, unseen_x, unseen_y)
    return GzslResult(u, s, harmonic_mean(s, u))


# -- end-to-end ---------------------------------------------------------------------

@dataclass
class RunResult:
    model: ZslModel
    config: TrainConfig
    traces: dict[str, list[float]] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


def build_model(dataset: Dataset, config: TrainConfig) -> ZslModel:
    return ZslModel(dataset.features.shape[1], dataset.attributes.shape[1], config.d_p, dataset.split.seen,
                    hidden=config.hidden, use_projection=config.use_projection,
                    decoder_output=config.decoder_output, seed=config.seed)


def train(dataset: Dataset, config: TrainConfig) -> RunResult:
    config.validate()
    model = build_model(dataset, config)
    res = RunResult(model, config)
    t = time.perf_counter()
    res.traces["finetune"] = stage_finetune_gaussian(dataset, model, config)
    res.timings["finetune"] = time.perf_counter() - t
    t = time.perf_counter()
    for k, v in stage_train_cvae(dataset, model, config).items():
        res.traces[f"cvae_{k}"] = v
    res.timings["cvae"] = time.perf_counter() - t
    return res


def clusterability_rows(dataset: Dataset) -> np.ndarray:
    """Held-out rows of every class (seen test and unseen)."""
    return dataset.split.test_rows


def evaluate_all(model: ZslModel, dataset: Dataset, config: TrainConfig, gzsl: bool = True
                 ) -> dict[str, float]:
    metrics: dict[str, float] = {}
    unseen = dataset.test_unseen_rows
    x_zsl, y_zsl = zsl_training_set(model, dataset, config)
    clf = stage_train_final_classifier(x_zsl, y_zsl, dataset.split.unseen, config)
    _, metrics["zsl_acc"] = evaluate_zsl(clf, model, dataset.features[unseen], dataset.labels[unseen])
    synth_stats = variance_stats(x_zsl, y_zsl)
    metrics["synth_intra_var"] = synth_stats.intra_class_variance
    if gzsl:
        x_g, y_g = gzsl_training_set(model, dataset, config)
        classes = np.concatenate([dataset.split.seen, dataset.split.unseen])
        gclf = stage_train_final_classifier(x_g, y_g, classes, config)
        seen = dataset.test_seen_rows
        r = evaluate_gzsl(gclf, model, dataset.features[seen], dataset.labels[seen],
                          dataset.features[unseen], dataset.labels[unseen])
        metrics.update(gzsl_u=r.u, gzsl_s=r.s, gzsl_h=r.h)
    rows = clusterability_rows(dataset)
    metrics["nmi"] = clustering_nmi(model.embed(dataset.features[rows]), dataset.labels[rows], seed=config.seed)
    return metrics


def run(dataset: Dataset, config: TrainConfig, gzsl: bool = True) -> RunResult:
    res = train(dataset, config)
    t = time.perf_counter()
    res.metrics = evaluate_all(res.model, dataset, config, gzsl)
    res.timings["evaluate"] = time.perf_counter() - t
    return res


def ablation_configs(config: TrainConfig) -> dict[str, TrainConfig]:
    return {
        "NA": config.replace(use_projection=False, use_gaussian_finetune=False, use_noise=False,
                             lambda_cls=0.0, lambda_cls_prime=0.0),
        "CLS": config.replace(use_projection=True, use_gaussian_finetune=False, use_noise=False),
        "CLS-GAUSSIAN": config.replace(use_projection=True, use_gaussian_finetune=True, use_noise=False),
        "CLS-GAUSSIAN-NOISE": config.replace(use_projection=True, use_gaussian_finetune=True, use_noise=True),
    }


def run_ablation(dataset: Dataset, config: TrainConfig, rows=ABLATION_ROWS) -> dict[str, dict[str, float]]:
    """ZSL accuracy and clusterability NMI for each component configuration.

    Every row shares the master seed so the comparison is paired.
    """
    table = {}
    for name, cfg in ablation_configs(config).items():
        if name not in rows:
            continue
        res = run(dataset, cfg, gzsl=False)
        table[name] = {"zsl_acc": res.metrics["zsl_acc"], "nmi": res.metrics["nmi"], "seed": cfg.seed}
        log.info("ablation %s: acc=%.4f nmi=%.4f", name, res.metrics["zsl_acc"], res.metrics["nmi"])
    return table


# -- few-shot -------------------------------------------------------------------------

@dataclass
class FewShotResult:
    mean: float
    ci95: float
    accuracies: np.ndarray


def sample_episode(labels: np.ndarray, spec: EpisodeSpec, rng: np.random.Generator
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (classes, support rows, query rows); support and query are disjoint."""
    classes = np.unique(labels)
    if classes.size < spec.n_way:
        raise ValueError(f"{classes.size} novel classes cannot fill a {spec.n_way}-way episode")
    chosen = np.sort(rng.choice(classes, spec.n_way, replace=False))
    support, query = [], []
    for c in chosen:
        rows = np.flatnonzero(labels == c)
        if rows.size < spec.k_shot + spec.n_query:
            raise ValueError(f"class {c} has {rows.size} rows, episode needs {spec.k_shot + spec.n_query}")
        picked = rng.permutation(rows)[:spec.k_shot + spec.n_query]
        support.append(picked[:spec.k_shot])
        query.append(picked[spec.k_shot:])
    return chosen, np.concatenate(support), np.concatenate(query)


def episode_accuracy(support_x, support_y, query_x, query_y, classes, steps: int, lr: float, seed: int) -> float:
    clf = SoftmaxClassifier(classes, support_x.shape[1])
    clf.fit(support_x, support_y, steps, support_x.shape[0], lr, seed)
    return float(np.mean(clf.predict(query_x) == query_y))


def run_fewshot(base_x: np.ndarray, base_y: np.ndarray, novel_x: np.ndarray, novel_y: np.ndarray,
                spec: EpisodeSpec, config: TrainConfig, mode: str = "gaussian",
                fmap: MLP | None = None, steps: int = 100, lr: float = 0.01) -> FewShotResult:
    """Mean episode accuracy with a 95% normal-approximation interval.

    ``mode="gaussian"`` maps features through F (trained on the base classes
    unless ``fmap`` is given); ``mode="baseline"`` uses raw features. Episode
    sampling depends only on ``spec.seed`` so the two modes are paired.
    """
    if np.intersect1d(base_y, novel_y).size:
        raise ValueError("base and novel class sets overlap")
    if mode == "gaussian":
        if fmap is None:
            base_classes = np.unique(base_y)
            y = np.searchsorted(base_classes, base_y)
            fmap, _, _ = train_gaussian_map(base_x, y, base_classes.size, config, config.seed)
        feats = fmap(novel_x)
    elif mode == "baseline":
        feats = novel_x
    else:
        raise ValueError(f"unknown few-shot mode {mode!r}")
    rng = make_rng(spec.seed)
    accs = []
    for e in range(spec.n_episodes):
        classes, sup, qry = sample_episode(novel_y, spec, rng)
        accs.append(episode_accuracy(feats[sup], novel_y[sup], feats[qry], novel_y[qry], classes,
                                     steps, lr, spec.seed + e))
    accs = np.array(accs)
    ci = 1.96 * accs.std(ddof=1) / np.sqrt(accs.size) if accs.size > 1 else 0.0
    return FewShotResult(float(accs.mean()), float(ci), accs)
