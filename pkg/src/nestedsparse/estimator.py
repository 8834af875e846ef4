"""scikit-learn style wrappers around the nested trainer and pruner."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import LevelError
from .kernels import quantize_layer
from .netcore import OptimizerConfig, ToyNetwork, forward, softmax
from .nestedcsr import encode
from .presets import parse_architecture
from .pruning import SparsityLevelSet, apply_mask, get_nested_masks
from .runtime import model_container
from .training import Mode, PruneSchedule, TrainConfig, level_weights, train


class NestedSparseClassifier(ClassifierMixin, BaseEstimator):
    """A toy network trained so that nested sub-networks at every sparsity
    level remain accurate.

    ``level`` picks the sub-network used by :meth:`predict` (0 = least
    sparse); it can be changed after fitting without retraining, e.g. with
    ``clf.set_params(level=2)``.

    Parameters follow :class:`~nestedsparse.training.TrainConfig`.
    ``architecture`` is ``"mlp"`` (with ``hidden`` widths) or
    ``"tiny-conv"`` (needs ``input_shape=(H, W, C)`` with NHWC-flattened
    rows in ``X``). ``warmup_steps=None`` means ``steps // 10``.
    """

    def __init__(self, architecture="mlp", hidden=(32,), input_shape=None,
                 levels=(0.7, 0.8, 0.9), block_shape=(1, 2), mode="nested", steps=1000,
                 batch_size=64, base_lr=0.05, momentum=0.9, weight_decay=5e-4,
                 warmup_steps=None, period=1, sparse_targets="soft", level=0,
                 random_state=0):
        self.architecture = architecture
        self.hidden = hidden
        self.input_shape = input_shape
        self.levels = levels
        self.block_shape = block_shape
        self.mode = mode
        self.steps = steps
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.period = period
        self.sparse_targets = sparse_targets
        self.level = level
        self.random_state = random_state

    def _train_config(self):
        steps = int(self.steps)
        warmup = steps // 10 if self.warmup_steps is None else int(self.warmup_steps)
        return TrainConfig(
            levels=SparsityLevelSet(tuple(self.levels), *self.block_shape),
            steps=steps, batch_size=int(self.batch_size),
            optimizer=OptimizerConfig(self.base_lr, self.momentum, self.weight_decay, steps),
            prune_schedule=PruneSchedule(warmup, int(self.period)),
            mode=Mode(self.mode), seed=int(self.random_state or 0),
            sparse_targets=self.sparse_targets)

    def _layers(self, n_features, n_classes):
        shape = tuple(self.input_shape) if self.input_shape is not None else (n_features,)
        if int(np.prod(shape)) != n_features:
            raise ValueError(f"input_shape {shape} does not match {n_features} features")
        name = self.architecture
        if name == "mlp":
            name = "mlp:" + ",".join(str(int(h)) for h in self.hidden)
        return parse_architecture(name, shape, n_classes)

    def fit(self, X, y, eval_set=None):
        X, y = check_X_y(X, y, dtype=np.float32)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        y_idx = np.searchsorted(self.classes_, y)
        cfg = self._train_config()
        net = ToyNetwork(self._layers(X.shape[1], len(self.classes_)), seed=cfg.seed)
        eval_data = None
        if eval_set is not None:
            Xe, ye = check_X_y(*eval_set, dtype=np.float32)
            eval_data = (Xe, np.searchsorted(self.classes_, ye))
        model = train(net, X, y_idx, cfg, eval_data=eval_data)
        self.net_ = model.net
        self.masks_ = model.masks
        self.levels_ = (0.0,) if cfg.mode is Mode.DENSE else cfg.levels.levels
        self.history_ = model.history
        self.evals_ = model.evals
        self.n_features_in_ = X.shape[1]
        return self

    def _check_level(self, level):
        level = self.level if level is None else level
        if not 0 <= level < len(self.levels_):
            raise LevelError(f"level {level} out of range for {len(self.levels_)} levels")
        return level

    def decision_function(self, X, level=None):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        ws = level_weights(self.net_, self.masks_, self._check_level(level))
        return forward(self.net_, X, weights=ws)[0]

    def predict_proba(self, X, level=None):
        return softmax(self.decision_function(X, level))

    def predict(self, X, level=None):
        scores = self.decision_function(X, level)
        return self.classes_[scores.argmax(axis=1)]

    def score_levels(self, X, y):
        """Accuracy of every nested sub-network, least sparse first."""
        return [float(np.mean(self.predict(X, level=i) == np.asarray(y)))
                for i in range(len(self.levels_))]

    def to_nestedcsr(self, quantize=False):
        """Per weighted layer: a NestedCSR matrix (or QuantizedLayer), or the dense array."""
        check_is_fitted(self, "net_")
        out = []
        for w, ms in zip(self.net_.weights, self.masks_ or [None] * len(self.net_.weights)):
            if ms is None:
                out.append(w)
            else:
                out.append(quantize_layer(w, ms) if quantize else encode(w, ms))
        return out

    def to_container(self, meta=None):
        """Model container ready for :func:`nestedsparse.container.save`."""
        check_is_fitted(self, "net_")
        meta = dict(meta or {}, levels=list(self.levels_), mode=self.mode,
                    classes=[c.item() if hasattr(c, "item") else c for c in self.classes_])
        return model_container(self.net_, self.masks_, meta)


class NestedBlockPruner(TransformerMixin, BaseEstimator):
    """Computes nested block masks for a weight matrix.

    ``fit`` stores the masks; ``transform`` returns ``W * M`` for the mask at
    ``level`` (0 = least sparse).
    """

    def __init__(self, levels=(0.7, 0.8, 0.9), block_shape=(1, 2), level=0):
        self.levels = levels
        self.block_shape = block_shape
        self.level = level

    def fit(self, W, y=None):
        W = check_array(W, dtype=np.float32)
        self.masks_ = get_nested_masks(W, SparsityLevelSet(tuple(self.levels), *self.block_shape))
        self.shape_ = W.shape
        return self

    def transform(self, W):
        check_is_fitted(self, "masks_")
        W = check_array(W, dtype=np.float32)
        if W.shape != self.shape_:
            raise ValueError(f"expected shape {self.shape_}, got {W.shape}")
        if not 0 <= self.level < len(self.masks_):
            raise LevelError(f"level {self.level} out of range")
        return apply_mask(W, self.masks_[self.level])
