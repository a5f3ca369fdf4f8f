"""Self-taught training loop: the student labels the pool, the CRF teacher refines,
and the refinements the teacher changed least become pseudo-labels.

Also provides the comparison runs: random raw pseudo-labels (``unet_only``) and
plain supervised training (``labeled_only``).
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image_stack, check_mask_stack
from .densecrf import CrfParams, DenseCRF, refine
from .imagecore import AugmentParams
from .metrics import IterationReport, dsc, evaluate
from .student import StudentArch, TrainConfig, UNetSegmenter, init_params, predict, train

logger = logging.getLogger(__name__)

RETRAIN_MODES = ("fine_tune", "from_scratch")


@dataclass
class SamplePool:
    """Curriculum state. The loops move samples from ``unlabeled`` to ``pseudo`` in place.

    ``pool_truth`` optionally maps unlabeled ids to ground-truth masks; only
    :func:`baseline_labeled_only` with ``use_full=True`` reads it.
    """

    labeled: list = field(default_factory=list)      # (id, image, mask)
    unlabeled: list = field(default_factory=list)    # (id, image)
    pseudo: list = field(default_factory=list)       # (id, image, mask, origin_iteration)
    validation: list = field(default_factory=list)   # (id, image, mask)
    test: list = field(default_factory=list)         # (id, image, mask)
    pool_truth: dict = field(default_factory=dict)

    def ids(self):
        out = [s[0] for s in self.labeled] + [s[0] for s in self.unlabeled]
        out += [s[0] for s in self.pseudo] + [s[0] for s in self.validation]
        return out + [s[0] for s in self.test]

    def check(self, size=None):
        ids = self.ids()
        if len(ids) != len(set(ids)):
            raise ValueError("sample ids must be unique across the pool")
        for sample in self.labeled + self.pseudo + self.validation + self.test:
            if np.shape(sample[1]) != np.shape(sample[2]):
                raise ValueError(f"sample {sample[0]!r}: image and mask sizes differ")
        if size is not None:
            for sample in self.labeled + self.unlabeled + self.pseudo + self.test:
                if np.shape(sample[1]) != (size, size):
                    raise ValueError(f"sample {sample[0]!r} is not {size}x{size}")

    def training_set(self):
        return [(img, mask) for _, img, mask in self.labeled] + \
               [(img, mask) for _, img, mask, _ in self.pseudo]

    def test_set(self):
        return [(img, mask) for _, img, mask in self.test]


@dataclass
class CurriculumConfig:
    n_per_iter: int = 10
    iterations: int = 6
    crf: CrfParams = field(default_factory=CrfParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    retrain_mode: str = "fine_tune"
    arch: StudentArch = field(default_factory=StudentArch)
    augment: AugmentParams = field(default_factory=AugmentParams)

    def __post_init__(self):
        if self.n_per_iter < 1:
            raise ValueError("n_per_iter must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.retrain_mode not in RETRAIN_MODES:
            raise ValueError(f"retrain_mode must be one of {RETRAIN_MODES}")

    def check_feasible(self, pool_size):
        need = self.n_per_iter * (self.iterations - 1)
        if need > pool_size:
            raise ValueError(f"{self.iterations} iterations x {self.n_per_iter} per iteration need "
                             f"{need} unlabeled samples, pool has {pool_size}")


def score_sample(params, crf, img, arch=None):
    """Returns ``(raw_mask, refined_mask, proxy)`` with proxy = Dice(raw, refined)."""
    probs, raw = predict(params, img, arch)
    refined, _ = refine(probs, img, crf)
    return raw, refined, dsc(raw, refined)


def select_top(scored, n):
    """Ids of the ``n`` highest proxies, ordered by descending proxy then ascending id."""
    if n < 0:
        raise ValueError("n must be >= 0")
    ranked = sorted(scored, key=lambda item: (-item[1], item[0]))
    return [sid for sid, _ in ranked[:n]]


def _fit(params, pool, cfg, iteration):
    train_cfg = replace(cfg.train, seed=cfg.train.seed + iteration - 1)
    if params is None or cfg.retrain_mode == "from_scratch":
        params = init_params(cfg.arch, cfg.train.seed)
    params, _ = train(params, pool.training_set(), train_cfg, cfg.augment)
    return params


def _check_run(pool, cfg):
    if not pool.labeled:
        raise ValueError("the pool has no labeled samples")
    if not pool.test:
        raise ValueError("the pool has no test samples")
    cfg.check_feasible(len(pool.unlabeled))
    pool.check(cfg.arch.input_size)


def _run_loop(pool, cfg, strategy, choose, callback):
    _check_run(pool, cfg)
    params = _fit(None, pool, cfg, 1)
    reports = [IterationReport(1, strategy, evaluate(params, pool.test_set(), cfg.arch))]
    logger.info("[%s] iteration 1: test dsc %.4f", strategy, reports[-1].test_dsc)
    if callback is not None:
        callback(1, pool, params)
    for iteration in range(2, cfg.iterations + 1):
        chosen = choose(params, iteration)  # [(id, pseudo_mask, proxy)]
        by_id = {sid: img for sid, img in pool.unlabeled}
        picked = {sid for sid, _, _ in chosen}
        for sid, mask, _ in chosen:
            pool.pseudo.append((sid, by_id[sid], mask, iteration))
        pool.unlabeled = [s for s in pool.unlabeled if s[0] not in picked]
        params = _fit(params, pool, cfg, iteration)
        reports.append(IterationReport(
            iteration, strategy, evaluate(params, pool.test_set(), cfg.arch),
            selected_ids=[sid for sid, _, _ in chosen],
            proxy_scores=[proxy for _, _, proxy in chosen],
        ))
        logger.info("[%s] iteration %d: promoted %d, test dsc %.4f", strategy, iteration,
                    len(chosen), reports[-1].test_dsc)
        if callback is not None:
            callback(iteration, pool, params)
    return params, reports


def self_taught_loop(pool, cfg, callback=None):
    """Curriculum self-training; mutates ``pool`` and returns ``(params, reports)``.

    ``callback(iteration, pool, params)`` runs after every iteration.
    """
    def choose(params, iteration):
        scored, refined = [], {}
        for sid, img in pool.unlabeled:
            _, ref, proxy = score_sample(params, cfg.crf, img, cfg.arch)
            scored.append((sid, proxy))
            refined[sid] = (ref, proxy)
        return [(sid, *refined[sid]) for sid in select_top(scored, cfg.n_per_iter)]

    return _run_loop(pool, cfg, "top_dsc", choose, callback)


def baseline_random_loop(pool, cfg, seed, callback=None):
    """Random selection, raw student masks as pseudo-labels (no teacher).

    Proxy scores are not computed for this strategy and are recorded as NaN.
    """
    rng = np.random.default_rng(seed)

    def choose(params, iteration):
        k = min(cfg.n_per_iter, len(pool.unlabeled))
        picks = rng.choice(len(pool.unlabeled), size=k, replace=False)
        out = []
        for i in picks:
            sid, img = pool.unlabeled[int(i)]
            out.append((sid, predict(params, img, cfg.arch)[1], float("nan")))
        return out

    return _run_loop(pool, cfg, "unet_only", choose, callback)


def baseline_labeled_only(pool, cfg, use_full=False):
    """One supervised run on the labeled set, plus the pool's true masks when ``use_full``."""
    if not pool.labeled:
        raise ValueError("the pool has no labeled samples")
    if not pool.test:
        raise ValueError("the pool has no test samples")
    pool.check(cfg.arch.input_size)
    data = [(img, mask) for _, img, mask in pool.labeled]
    if use_full:
        missing = [sid for sid, _ in pool.unlabeled if sid not in pool.pool_truth]
        if missing:
            raise ValueError(f"no ground truth for pool samples: {', '.join(missing[:5])}")
        data += [(img, pool.pool_truth[sid]) for sid, img in pool.unlabeled]
    params = init_params(cfg.arch, cfg.train.seed)
    params, _ = train(params, data, cfg.train, cfg.augment)
    report = IterationReport(1, "labeled_only", evaluate(params, pool.test_set(), cfg.arch))
    return params, [report]


class SelfTaughtSegmenter(BaseEstimator):
    """Estimator front-end for the curriculum loop.

    ``fit(X, y, X_unlabeled=..., X_test=..., y_test=...)`` runs the chosen strategy;
    ``reports_`` holds one :class:`IterationReport` per iteration and ``student_``
    a fitted :class:`UNetSegmenter` carrying the final weights.
    """

    def __init__(self, student=None, crf=None, strategy="top_dsc", n_per_iter=10,
                 iterations=6, retrain_mode="fine_tune", random_state=0):
        self.student = student
        self.crf = crf
        self.strategy = strategy
        self.n_per_iter = n_per_iter
        self.iterations = iterations
        self.retrain_mode = retrain_mode
        self.random_state = random_state

    def _config(self):
        student = self.student if self.student is not None else UNetSegmenter()
        crf = self.crf if self.crf is not None else DenseCRF()
        train_cfg = replace(student._train_config(), seed=self.random_state)
        return student, CurriculumConfig(
            n_per_iter=self.n_per_iter, iterations=self.iterations,
            crf=crf.to_params(), train=train_cfg, retrain_mode=self.retrain_mode,
            arch=student._arch(), augment=student.augment_params or AugmentParams(),
        )

    def fit(self, X, y, X_unlabeled, X_test, y_test):
        X, X_unlabeled, X_test = (check_image_stack(a) for a in (X, X_unlabeled, X_test))
        y, y_test = check_mask_stack(y), check_mask_stack(y_test)
        pool = SamplePool(
            labeled=[(f"l{i:05d}", img, m) for i, (img, m) in enumerate(zip(X, y))],
            unlabeled=[(f"u{i:05d}", img) for i, img in enumerate(X_unlabeled)],
            test=[(f"t{i:05d}", img, m) for i, (img, m) in enumerate(zip(X_test, y_test))],
        )
        student, cfg = self._config()
        if self.strategy == "top_dsc":
            params, reports = self_taught_loop(pool, cfg)
        elif self.strategy == "unet_only":
            params, reports = baseline_random_loop(pool, cfg, self.random_state)
        elif self.strategy == "labeled_only":
            params, reports = baseline_labeled_only(pool, cfg)
        else:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        from sklearn.base import clone

        fitted = clone(student)
        fitted.params_, fitted.arch_, fitted.loss_history_ = params, cfg.arch, []
        self.student_ = fitted
        self.reports_ = reports
        self.pool_ = pool
        return self

    def predict(self, X):
        check_is_fitted(self, "student_")
        return self.student_.predict(X)

    def predict_proba(self, X):
        check_is_fitted(self, "student_")
        return self.student_.predict_proba(X)

    def score(self, X, y):
        check_is_fitted(self, "student_")
        return self.student_.score(X, y)
