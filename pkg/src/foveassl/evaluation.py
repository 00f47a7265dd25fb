"""Linear-probe evaluation on frozen features and its aggregation."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .pairs import as_float, crop_params, AugmentPolicy, resized_crop, resize


class EvalError(ValueError):
    pass


class Group(enum.Enum):
    HARD_CATEGORY = "HardCategory"
    EASY_CATEGORY = "EasyCategory"
    FINE_GRAINED = "FineGrained"
    INSTANCE = "Instance"
    SCENE = "Scene"


class SplitRule(enum.Enum):
    PROVIDED = "provided"
    CORE50 = "core50"
    COIL100 = "coil100"


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    group: Group
    split_rule: SplitRule = SplitRule.PROVIDED
    center_crop: bool = True


def _spec(name, group, rule=SplitRule.PROVIDED, center_crop=True):
    return DatasetSpec(name, group, rule, center_crop)


G = Group
PAPER_DATASETS = {s.name: s for s in [
    _spec("ImageNet-1k 100%", G.HARD_CATEGORY),
    _spec("ImageNet-1k 10%", G.HARD_CATEGORY),
    _spec("ImageNet-1k 1%", G.HARD_CATEGORY),
    _spec("ImageNet-100", G.HARD_CATEGORY),
    _spec("CIFAR100", G.HARD_CATEGORY),
    _spec("STL10", G.EASY_CATEGORY, center_crop=False),
    _spec("CIFAR10", G.EASY_CATEGORY, center_crop=False),
    _spec("DTD", G.FINE_GRAINED),
    _spec("FGVCAircraft", G.FINE_GRAINED),
    _spec("Flowers102", G.FINE_GRAINED),
    _spec("OxfordIIITPet", G.FINE_GRAINED),
    _spec("StanfordCars", G.FINE_GRAINED),
    _spec("ToyBox", G.INSTANCE),
    _spec("COIL100", G.INSTANCE, SplitRule.COIL100, center_crop=False),
    _spec("Core50", G.INSTANCE, SplitRule.CORE50),
    _spec("Places365", G.SCENE),
]}

SYNTH_DATASETS = {s.name: s for s in [
    _spec("synth-category", G.HARD_CATEGORY),
    _spec("synth-easy", G.EASY_CATEGORY, center_crop=False),
    _spec("synth-fine", G.FINE_GRAINED),
    _spec("synth-toybox", G.INSTANCE),
    _spec("synth-coil", G.INSTANCE, SplitRule.COIL100, center_crop=False),
    _spec("synth-core50", G.INSTANCE, SplitRule.CORE50),
    _spec("synth-scene", G.SCENE),
]}

DATASETS = {**PAPER_DATASETS, **SYNTH_DATASETS}

CORE50_TRAIN_BACKGROUNDS = 7
CORE50_TEST_BACKGROUNDS = 5


# -- splits ---------------------------------------------------------------------

def apply_split_rules(spec: DatasetSpec, data) -> tuple[np.ndarray, np.ndarray]:
    """Train and test indices for ``data`` under the dataset's split rule.

    Core50-style: the 7 smallest background ids train, the next 5 test.
    COIL100-style: the first image of each class trains, the rest test.
    Otherwise the split shipped with the data is used.
    """
    labels = np.asarray(data.labels)
    if spec.split_rule is SplitRule.CORE50:
        if data.backgrounds is None:
            raise EvalError(f"{spec.name}: Core50 split needs background ids")
        bgs = np.asarray(data.backgrounds)
        ids = np.unique(bgs)
        need = CORE50_TRAIN_BACKGROUNDS + CORE50_TEST_BACKGROUNDS
        if len(ids) < need:
            raise EvalError(f"{spec.name}: Core50 split needs {need} backgrounds, found {len(ids)}")
        train_bg = ids[:CORE50_TRAIN_BACKGROUNDS]
        test_bg = ids[CORE50_TRAIN_BACKGROUNDS:need]
        return np.nonzero(np.isin(bgs, train_bg))[0], np.nonzero(np.isin(bgs, test_bg))[0]
    if spec.split_rule is SplitRule.COIL100:
        _, first = np.unique(labels, return_index=True)
        train = np.sort(first)
        mask = np.ones(len(labels), dtype=bool)
        mask[train] = False
        return train, np.nonzero(mask)[0]
    if data.split is None:
        raise EvalError(f"{spec.name}: no provided split")
    split = np.asarray(data.split, dtype=bool)
    return np.nonzero(split)[0], np.nonzero(~split)[0]


# -- features -------------------------------------------------------------------

Featurizer = Callable[[np.ndarray], np.ndarray]


def frozen_featurizer(encoder, params) -> Featurizer:
    """Backbone features of a frozen encoder as a plain callable."""
    return lambda images: encoder.features(params, images)


def eval_view(img: np.ndarray, out_size: int, center_crop: bool) -> np.ndarray:
    img = as_float(img)
    if center_crop:
        side = int(round(0.875 * min(img.shape[:2])))
        top = (img.shape[0] - side) // 2
        left = (img.shape[1] - side) // 2
        return resized_crop(img, top, left, side, side, out_size)
    return resize(img, out_size)


def train_view(img: np.ndarray, out_size: int, rng) -> np.ndarray:
    img = as_float(img)
    policy = AugmentPolicy(scale=(0.08, 1.0), out_size=out_size)
    top, left, h, w = crop_params(img.shape[0], img.shape[1], policy, rng)
    out = resized_crop(img, top, left, h, w, out_size)
    return out[:, ::-1] if rng.random() < 0.5 else out


@dataclass
class Features:
    values: np.ndarray  # (N, F), or (A, N, F) for augmented training copies
    labels: np.ndarray
    skipped: int = 0


def extract_features(featurize: Featurizer, images: Sequence, labels, out_size: int,
                     center_crop: bool = True, train: bool = False, n_aug: int = 1,
                     seed: int = 0, chunk: int = 256) -> Features:
    """One feature row per readable image; ``None`` entries count as unreadable.

    Training images get ``n_aug`` independent crop/flip draws; evaluation
    images a centre crop (or a plain resize when the flag is off).
    """
    keep = [i for i, im in enumerate(images) if im is not None]
    labels = np.asarray(labels)[keep]
    skipped = len(images) - len(keep)
    rng = np.random.default_rng([seed, 400])

    def run(views):
        out = [featurize(views[i:i + chunk]) for i in range(0, len(views), chunk)]
        return np.concatenate(out) if out else np.zeros((0, 0))

    if train:
        copies = []
        for _ in range(n_aug):
            views = np.stack([train_view(images[i], out_size, rng) for i in keep]) if keep else \
                np.zeros((0, out_size, out_size, 3))
            copies.append(run(views))
        values = np.stack(copies)
    else:
        views = np.stack([eval_view(images[i], out_size, center_crop) for i in keep]) if keep else \
            np.zeros((0, out_size, out_size, 3))
        values = run(views)
    return Features(values, labels, skipped)


# -- probe ----------------------------------------------------------------------

@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    classes: np.ndarray

    def logits(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.std) @ self.weight + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.logits(x), axis=1)]

    def topk(self, x: np.ndarray, k: int) -> np.ndarray:
        k = min(k, len(self.classes))
        order = np.argsort(-self.logits(x), axis=1, kind="stable")[:, :k]
        return self.classes[order]


def train_probe(features: np.ndarray, labels, epochs: int = 100, lr: float = 0.1,
                batch_size: int = 256, momentum: float = 0.9, weight_decay: float = 0.0,
                seed: int = 0) -> LinearProbe:
    """Multinomial logistic regression by mini-batch gradient descent with cosine decay.

    ``features`` may hold augmented copies as ``(A, N, F)``; epoch ``e`` uses
    copy ``e % A``. Features are standardised with training statistics.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    labels = np.asarray(labels)
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise EvalError("probe needs at least two classes")
    a, n, f = x.shape
    flat = x.reshape(-1, f)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0) + 1e-6
    x = (x - mean) / std
    c = len(classes)
    w = np.zeros((f, c))
    b = np.zeros(c)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    rng = np.random.default_rng([seed, 500])
    onehot = np.eye(c)[y]
    steps_per_epoch = math.ceil(n / batch_size)
    total = epochs * steps_per_epoch
    step = 0
    for e in range(epochs):
        xe = x[e % a]
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            cur_lr = lr * 0.5 * (1 + math.cos(math.pi * step / total))
            z = xe[idx] @ w + b
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[idx]) / len(idx)
            gw = xe[idx].T @ g + weight_decay * w
            gb = g.sum(axis=0)
            vw = momentum * vw + gw
            vb = momentum * vb + gb
            w -= cur_lr * vw
            b -= cur_lr * vb
            step += 1
    return LinearProbe(w, b, mean, std, classes)


def accuracy(probe: LinearProbe, x: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return 100.0 * float(np.mean(probe.predict(x) == labels))


def top5_accuracy(probe: LinearProbe, x: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(probe.classes) < 5 or len(labels) == 0:
        return float("nan")
    hits = (probe.topk(x, 5) == labels[:, None]).any(axis=1)
    return 100.0 * float(np.mean(hits))


@dataclass
class ProbeReport:
    dataset: str
    group: Group
    top1: float
    top5: float = float("nan")
    n_train: int = 0
    n_test: int = 0
    epochs: int = 100
    feature_dim: int = 0

    def __post_init__(self):
        if not math.isnan(self.top1) and not 0.0 <= self.top1 <= 100.0:
            raise EvalError(f"accuracy {self.top1} outside [0, 100]")


@dataclass
class ProbeSettings:
    out_size: int = 32
    epochs: int = 100
    lr: float = 0.1
    batch_size: int = 256
    n_aug: int = 10
    seed: int = 0


def evaluate_dataset(featurize: Featurizer, spec: DatasetSpec, data,
                     settings: ProbeSettings) -> tuple[ProbeReport, LinearProbe]:
    train_idx, test_idx = apply_split_rules(spec, data)
    images = data.images
    tr = extract_features(featurize, [images[i] for i in train_idx], data.labels[train_idx],
                          settings.out_size, spec.center_crop, train=True,
                          n_aug=settings.n_aug, seed=settings.seed)
    te = extract_features(featurize, [images[i] for i in test_idx], data.labels[test_idx],
                          settings.out_size, spec.center_crop, train=False)
    probe = train_probe(tr.values, tr.labels, settings.epochs, settings.lr,
                        settings.batch_size, seed=settings.seed)
    report = ProbeReport(spec.name, spec.group, accuracy(probe, te.values, te.labels),
                         top5_accuracy(probe, te.values, te.labels), len(tr.labels),
                         len(te.labels), settings.epochs, te.values.shape[-1])
    return report, probe


# -- aggregation ----------------------------------------------------------------

@dataclass
class GroupSummary:
    group: Group
    accuracies: dict[str, float]
    average: float

    @property
    def rounded(self) -> float:
        return round(self.average, 3)


def summarize_groups(reports: Iterable[ProbeReport],
                     groups: Sequence[Group] | None = None) -> list[GroupSummary]:
    """Arithmetic mean of top-1 accuracy within each semantic group.

    ``groups`` names groups that must be present; an empty one is an error.
    """
    by_group: dict[Group, dict[str, float]] = {}
    for r in reports:
        if not isinstance(r.group, Group):
            raise EvalError(f"{r.dataset}: unknown group {r.group!r}")
        by_group.setdefault(r.group, {})[r.dataset] = r.top1
    for g in groups or ():
        if g not in by_group:
            raise EvalError(f"group {g.value} has no datasets")
    order = list(Group)
    return [GroupSummary(g, accs, float(np.mean(list(accs.values()))))
            for g, accs in sorted(by_group.items(), key=lambda kv: order.index(kv[0]))]


# -- background sensitivity -----------------------------------------------------

MISSING_BACKGROUND = "only_fg"
MISSING_OBJECT = ("no_fg", "only_bg_b", "only_bg_t")


@dataclass
class SensitivityReport:
    setting: str
    normal_acc: float
    missing_background_acc: float
    missing_object_acc: float
    missing_object_variants: dict[str, float] = field(default_factory=dict)

    @property
    def delta_background(self) -> float:
        return self.missing_background_acc - self.normal_acc

    @property
    def delta_object(self) -> float:
        return self.missing_object_acc - self.normal_acc

    def relative_to(self, reference: "SensitivityReport") -> tuple[float, float]:
        """Improvement of both deltas over a reference model, in points."""
        return (self.delta_background - reference.delta_background,
                self.delta_object - reference.delta_object)


def sensitivity_from_accuracies(setting: str, normal: float, missing_background: float,
                                missing_object: dict[str, float]) -> SensitivityReport:
    if not missing_object:
        raise EvalError("need at least one object-removal variant")
    return SensitivityReport(setting, normal, missing_background,
                             float(np.mean(list(missing_object.values()))), dict(missing_object))


def sensitivity_analysis(featurize: Featurizer, probe: LinearProbe, normal: np.ndarray, labels,
                         variants: dict[str, np.ndarray], out_size: int, setting: str = "",
                         variant_labels: dict[str, np.ndarray] | None = None,
                         center_crop: bool = True,
                         missing_background: str = MISSING_BACKGROUND,
                         missing_object: Sequence[str] = MISSING_OBJECT) -> SensitivityReport:
    labels = np.asarray(labels)
    for name, vl in (variant_labels or {}).items():
        if not np.array_equal(np.asarray(vl), labels):
            raise EvalError(f"variant {name} labels differ from the normal set")
    for name, imgs in variants.items():
        if len(imgs) != len(labels):
            raise EvalError(f"variant {name} has {len(imgs)} images for {len(labels)} labels")

    def acc(imgs):
        f = extract_features(featurize, list(imgs), labels, out_size, center_crop)
        return accuracy(probe, f.values, f.labels)

    objs = [k for k in missing_object if k in variants]
    return sensitivity_from_accuracies(setting, acc(normal), acc(variants[missing_background]),
                                       {k: acc(variants[k]) for k in objs})


# -- report files ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return "" if isinstance(x, float) and math.isnan(x) else f"{x:.3f}"


def write_reports_csv(reports: Iterable[ProbeReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "group", "top1", "top5", "n_train", "n_test"])
        for r in reports:
            w.writerow([r.dataset, r.group.value, _fmt(r.top1), _fmt(r.top5), r.n_train, r.n_test])


def write_groups_csv(summaries: Iterable[GroupSummary], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "average"])
        for s in summaries:
            w.writerow([s.group.value, _fmt(s.average)])


def write_sensitivity_csv(reports: Iterable[SensitivityReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setting", "normal", "missing_bg", "missing_obj", "delta_bg", "delta_obj"])
        for r in reports:
            w.writerow([r.setting, _fmt(r.normal_acc), _fmt(r.missing_background_acc),
                        _fmt(r.missing_object_acc), _fmt(r.delta_background), _fmt(r.delta_object)])


def read_reports_csv(path) -> list[ProbeReport]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(ProbeReport(row["dataset"], Group(row["group"]), float(row["top1"]),
                                   float(row["top5"]) if row["top5"] else float("nan"),
                                   int(row["n_train"]), int(row["n_test"])))
    return out
