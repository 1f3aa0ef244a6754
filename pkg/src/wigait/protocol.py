"""Domain adaptation by class-weight search, evaluation reports and the sampling protocol."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import HEALTHY, UNHEALTHY, MlpModel, TrainConfig, predict, train
from .features import FEATURE_NAMES, GaitFeatureVector

ADAPT_HEALTHY = 6
ADAPT_UNHEALTHY = 6


def default_weight_grid(n: int = 25, lo: float = 0.2, hi: float = 5.0) -> np.ndarray:
    return np.geomspace(lo, hi, n)


def label_index(label: str) -> int:
    if label == "healthy":
        return HEALTHY
    if label == "unhealthy":
        return UNHEALTHY
    raise ValueError(f"sample label must be healthy or unhealthy, got {label!r}")


@dataclass(frozen=True)
class Dataset:
    """Feature rows with per-sample subject, condition and label."""

    x: np.ndarray
    y: np.ndarray
    subjects: tuple[str, ...]
    conditions: tuple[str, ...]

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(-1, len(FEATURE_NAMES))
        y = np.asarray(self.y, dtype=int)
        if not (len(x) == len(y) == len(self.subjects) == len(self.conditions)):
            raise ValueError("dataset columns differ in length")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "conditions", tuple(self.conditions))

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def from_features(cls, rows: list[GaitFeatureVector]) -> "Dataset":
        return cls(
            np.array([r.values() for r in rows]).reshape(-1, len(FEATURE_NAMES)),
            np.array([label_index(r.label) for r in rows], dtype=int),
            tuple(r.subject_id for r in rows),
            tuple(r.condition for r in rows),
        )

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(np.asarray(mask)) if np.asarray(mask).dtype == bool else np.asarray(mask, int)
        return Dataset(
            self.x[idx], self.y[idx],
            tuple(self.subjects[i] for i in idx), tuple(self.conditions[i] for i in idx),
        )

    def of_subjects(self, subjects) -> "Dataset":
        keep = set(subjects)
        return self.subset(np.array([s in keep for s in self.subjects], dtype=bool))

    def subject_table(self) -> dict[str, tuple[int, str]]:
        """subject -> (label index, condition); a subject must carry one label."""
        out: dict[str, tuple[int, str]] = {}
        for s, y, c in zip(self.subjects, self.y, self.conditions):
            if s in out and out[s][0] != y:
                raise ValueError(f"subject {s} carries both labels")
            out.setdefault(s, (int(y), c))
        return out


# -- reporting ---------------------------------------------------------------------

@dataclass
class EvalReport:
    n_samples: int
    per_subject_accuracy: float
    healthy_accuracy: float
    unhealthy_accuracy: float
    per_class_accuracy: float
    per_condition: dict[str, float]
    confusion: list[list[int]]  # rows true class, columns predicted
    subject_accuracy: dict[str, float]
    majority_subject_accuracy: float
    rounds: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "per_subject_accuracy": self.per_subject_accuracy,
            "per_class_accuracy": {
                "healthy": self.healthy_accuracy,
                "unhealthy": self.unhealthy_accuracy,
                "mean": self.per_class_accuracy,
            },
            "per_condition_accuracy": dict(sorted(self.per_condition.items())),
            "confusion": self.confusion,
            "subject_accuracy": dict(sorted(self.subject_accuracy.items())),
            "majority_subject_accuracy": self.majority_subject_accuracy,
            "rounds": self.rounds,
        }

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        """JSON report plus an optional one-row-per-round summary table."""
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if csv_path is None:
            return
        cols = ["round", "class_weight", "n_test", "healthy", "unhealthy", "per_class", "per_subject"]
        rows = self.rounds or [{
            "round": "all", "class_weight": "", "n_test": self.n_samples,
            "healthy": self.healthy_accuracy, "unhealthy": self.unhealthy_accuracy,
            "per_class": self.per_class_accuracy, "per_subject": self.per_subject_accuracy,
        }]
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in rows:
                w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in cols])


def _class_accuracy(y, pred, cls) -> float:
    m = y == cls
    return float(np.mean(pred[m] == cls)) if m.any() else float("nan")


def report_from_predictions(ds: Dataset, pred: np.ndarray) -> EvalReport:
    y = ds.y
    pred = np.asarray(pred, dtype=int)
    correct = pred == y
    subj: dict[str, list[bool]] = {}
    for s, c in zip(ds.subjects, correct):
        subj.setdefault(s, []).append(bool(c))
    subject_acc = {s: float(np.mean(v)) for s, v in subj.items()}
    majority = float(np.mean([np.mean(v) > 0.5 for v in subj.values()])) if subj else float("nan")
    cond: dict[str, list[bool]] = {}
    for c, ok in zip(ds.conditions, correct):
        cond.setdefault(c, []).append(bool(ok))
    conf = np.zeros((2, 2), dtype=int)
    np.add.at(conf, (y, pred), 1)
    h = _class_accuracy(y, pred, HEALTHY)
    u = _class_accuracy(y, pred, UNHEALTHY)
    present = [a for a in (h, u) if not np.isnan(a)]
    return EvalReport(
        n_samples=len(y),
        per_subject_accuracy=float(np.mean(list(subject_acc.values()))) if subj else float("nan"),
        healthy_accuracy=h,
        unhealthy_accuracy=u,
        per_class_accuracy=float(np.mean(present)) if present else float("nan"),
        per_condition={c: float(np.mean(v)) for c, v in cond.items()},
        confusion=conf.tolist(),
        subject_accuracy=subject_acc,
        majority_subject_accuracy=majority,
    )


def evaluate(model: MlpModel, ds: Dataset) -> EvalReport:
    pred, _ = predict(model, ds.x) if len(ds) else (np.zeros(0, int), None)
    return report_from_predictions(ds, pred)


def mean_class_accuracy(model: MlpModel, ds: Dataset) -> float:
    return evaluate(model, ds).per_class_accuracy


# -- class-weight search --------------------------------------------------------------

def lower_median(values) -> float:
    v = sorted(values)
    if not v:
        raise ValueError("median of an empty sequence")
    return v[(len(v) - 1) // 2]


def repeat_seed(seed: int, repeat: int) -> int:
    return int(np.random.SeedSequence([int(seed), 0xADA, int(repeat)]).generate_state(1)[0])


class ModelCache:
    """Memoizes trained models by (class weight, seed) for a fixed training set."""

    def __init__(self, train_set: Dataset, config: TrainConfig):
        self.train_set = train_set
        self.config = config
        self._models: dict[tuple[float, int], MlpModel] = {}

    def get(self, weight: float, seed: int) -> MlpModel:
        key = (float(weight), int(seed))
        if key not in self._models:
            cfg = self.config.replace(class_weight=float(weight), seed=int(seed))
            self._models[key] = train(self.train_set.x, self.train_set.y, cfg)
        return self._models[key]

    def __len__(self) -> int:
        return len(self._models)


def search_weight(score_fn, grid) -> float:
    """Grid weight with the highest score; the first (smallest index) wins ties."""
    grid = list(grid)
    if not grid:
        raise ValueError("empty weight grid")
    scores = [score_fn(w) for w in grid]
    return float(grid[int(np.argmax(scores))])


def domain_adapt(
    train_set: Dataset,
    adapt_set: Dataset,
    grid=None,
    repeats: int = 10,
    config: TrainConfig | None = None,
    cache: ModelCache | None = None,
) -> tuple[float, list[float]]:
    """Unhealthy-class loss weight that maximizes adaptation-set per-class accuracy.

    Each repeat trains one model per grid weight with a seed derived from
    ``config.seed`` and the repeat index (shared across the grid, so weights
    are compared on equal footing) and keeps the best weight. The returned
    weight is the lower median of the per-repeat winners.
    """
    config = config or TrainConfig()
    grid = default_weight_grid() if grid is None else np.asarray(grid, dtype=float)
    if len(grid) == 0:
        raise ValueError("empty weight grid")
    cache = cache or ModelCache(train_set, config)
    winners = []
    for r in range(repeats):
        seed = repeat_seed(config.seed, r)
        if len(grid) == 1:
            winners.append(float(grid[0]))
            continue
        winners.append(search_weight(lambda w: mean_class_accuracy(cache.get(w, seed), adapt_set), grid))
    return lower_median(winners), winners


# -- sampling protocol ----------------------------------------------------------------

def sample_adaptation_subjects(
    subjects: dict[str, tuple[int, str]], rng: np.random.Generator
) -> list[str]:
    """Draw 6 healthy and 6 unhealthy subjects.

    With exactly two unhealthy conditions the unhealthy draw is split 3 + 3
    between them.
    """
    healthy = sorted(s for s, (y, _) in subjects.items() if y == HEALTHY)
    unhealthy = sorted(s for s, (y, _) in subjects.items() if y == UNHEALTHY)
    conditions = sorted({c for s, (y, c) in subjects.items() if y == UNHEALTHY})
    if len(healthy) < ADAPT_HEALTHY or len(unhealthy) < ADAPT_UNHEALTHY:
        raise ValueError("subject pool too small for a 6 + 6 adaptation draw")
    picked = list(rng.choice(healthy, ADAPT_HEALTHY, replace=False))
    if len(conditions) == 2:
        for c in conditions:
            group = sorted(s for s in unhealthy if subjects[s][1] == c)
            if len(group) < ADAPT_UNHEALTHY // 2:
                raise ValueError(f"condition {c!r} has fewer than {ADAPT_UNHEALTHY // 2} subjects")
            picked += list(rng.choice(group, ADAPT_UNHEALTHY // 2, replace=False))
    else:
        picked += list(rng.choice(unhealthy, ADAPT_UNHEALTHY, replace=False))
    return sorted(str(s) for s in picked)


def protocol_partitions(pool: Dataset, rounds: int, seed: int) -> list[tuple[list[str], list[str]]]:
    subjects = pool.subject_table()
    if len(subjects) < ADAPT_HEALTHY + ADAPT_UNHEALTHY + 1:
        raise ValueError(f"pool of {len(subjects)} subjects is too small (need at least 13)")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9A27]))
    out = []
    for _ in range(rounds):
        adapt = sample_adaptation_subjects(subjects, rng)
        test = sorted(set(subjects) - set(adapt))
        out.append((adapt, test))
    return out


def protocol_run(
    train_set: Dataset,
    pool: Dataset,
    rounds: int = 8,
    config: TrainConfig | None = None,
    grid=None,
    repeats: int = 10,
    seed: int = 0,
    progress=None,
    models: list | None = None,
) -> EvalReport:
    """Repeated adaptation-subject sampling, weight search, retraining and testing.

    The training set is fixed, so trained models are shared across rounds
    through a cache. Sample-level predictions of all rounds are pooled into
    the aggregate report; per-round metrics are listed under ``rounds``.
    When ``models`` is a list, each round's final model is appended to it.
    """
    config = config or TrainConfig()
    cache = ModelCache(train_set, config)
    preds, parts = [], []
    rounds_out = []
    for r, (adapt_ids, test_ids) in enumerate(protocol_partitions(pool, rounds, seed)):
        adapt_set = pool.of_subjects(adapt_ids)
        test_set = pool.of_subjects(test_ids)
        w, winners = domain_adapt(train_set, adapt_set, grid, repeats, config, cache)
        model = cache.get(w, config.seed)
        if models is not None:
            models.append(model)
        rep = evaluate(model, test_set)
        preds.append(predict(model, test_set.x)[0])
        parts.append(test_set)
        rounds_out.append({
            "round": r,
            "class_weight": w,
            "repeat_weights": winners,
            "adaptation_subjects": adapt_ids,
            "test_subjects": test_ids,
            "n_test": len(test_set),
            "healthy": rep.healthy_accuracy,
            "unhealthy": rep.unhealthy_accuracy,
            "per_class": rep.per_class_accuracy,
            "per_subject": rep.per_subject_accuracy,
        })
        if progress:
            progress(r, rounds_out[-1])
    allset = Dataset(
        np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
        sum((p.subjects for p in parts), ()), sum((p.conditions for p in parts), ()),
    )
    report = report_from_predictions(allset, np.concatenate(preds))
    report.rounds = rounds_out
    return report
