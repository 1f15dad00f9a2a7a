"""scikit-learn style wrappers over the functional modules.

These adapt the network, the attribute-matrix solver, logic regression and
the linear SVM to the ``fit``/``predict``/``transform`` protocol so they
compose with sklearn utilities such as ``clone`` and ``cross_val_score``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .evaluate import AnnealConfig, binarize, evaluate_tree, fit_logic_tree, train_linear_svm
from .network import NetworkConfig, build, predict
from .percept import BetaParams, SolverConfig, check_distance_matrix, solve_category_attribute_matrix
from .synth import Split
from .train import TrainConfig, train


def _check_images(X, patch_size=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images of shape (n, 3, H, W), got {X.shape}")
    if patch_size is not None and X.shape[2:] != (patch_size, patch_size):
        raise ValueError(f"expected {patch_size}x{patch_size} patches, got {X.shape[2:]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    return X


class CategoryAttributeEmbedding(BaseEstimator):
    """Fit a K x M attribute matrix whose row distances reproduce ``D``."""

    def __init__(self, n_attributes=12, restarts=8, iterations=2000, step=0.05,
                 prior_weight=0.01, beta_a=0.5, beta_b=0.5, random_state=0):
        self.n_attributes = n_attributes
        self.restarts = restarts
        self.iterations = iterations
        self.step = step
        self.prior_weight = prior_weight
        self.beta_a = beta_a
        self.beta_b = beta_b
        self.random_state = random_state

    def _solver_config(self):
        return SolverConfig(restarts=self.restarts, iterations=self.iterations, step=self.step,
                            prior_weight=self.prior_weight, beta=BetaParams(self.beta_a, self.beta_b),
                            seed=self.random_state)

    def fit(self, D, y=None):
        D = check_distance_matrix(D)
        result = solve_category_attribute_matrix(D, self.n_attributes, self._solver_config())
        self.attribute_matrix_ = result.A
        self.objective_ = result.objective
        self.stress_ = result.stress
        self.n_categories_ = D.shape[0]
        return self

    def transform(self, D=None):
        check_is_fitted(self, "attribute_matrix_")
        return self.attribute_matrix_.copy()

    def fit_transform(self, D, y=None):
        return self.fit(D).transform()


class MACClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Material classifier whose ``transform`` returns attribute probabilities.

    ``attribute_matrix`` is the K x M target matrix; it is required unless
    ``aux_heads`` is False. Labels are mapped onto ``0..K-1`` in sorted order.
    """

    def __init__(self, attribute_matrix=None, patch_size=32, channels=(16, 32, 64, 64), hidden=128,
                 lambda_attr=1.0, lambda_dist=0.1, aux_heads=True, kde_mode="pooled",
                 batch_size=64, learning_rate=0.01, momentum=0.9, weight_decay=5e-4,
                 max_epochs=60, grad_clip=5.0, random_state=0):
        self.attribute_matrix = attribute_matrix
        self.patch_size = patch_size
        self.channels = channels
        self.hidden = hidden
        self.lambda_attr = lambda_attr
        self.lambda_dist = lambda_dist
        self.aux_heads = aux_heads
        self.kde_mode = kde_mode
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.grad_clip = grad_clip
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on ``(X, y)``; validate on ``(X_val, y_val)`` or on ``(X, y)``."""
        X = _check_images(X, self.patch_size)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        self.classes_ = unique_labels(y)
        k = len(self.classes_)
        A = None
        if self.attribute_matrix is not None:
            A = check_array(self.attribute_matrix, dtype=np.float64)
            if A.shape[0] != k:
                raise ValueError(f"attribute matrix has {A.shape[0]} rows for {k} classes")
        elif self.aux_heads:
            raise ValueError("attribute_matrix is required when aux_heads is True")
        m = A.shape[1] if A is not None else 1
        cfg = NetworkConfig(patch_size=self.patch_size, channels=tuple(self.channels), n_categories=k,
                            n_attributes=m, hidden=self.hidden, lambda_attr=self.lambda_attr,
                            lambda_dist=self.lambda_dist, aux_heads=self.aux_heads, kde_mode=self.kde_mode)
        tcfg = TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           max_epochs=self.max_epochs, grad_clip=self.grad_clip, seed=self.random_state)
        train_split = Split(X, np.searchsorted(self.classes_, y), None, None)
        if X_val is None:
            val_split = train_split
        else:
            X_val = _check_images(X_val, self.patch_size)
            val_split = Split(X_val, self._encode(y_val), None, None)
        net = build(cfg, self.random_state)
        self.network_, self.train_log_ = train(net, train_split, val_split, A, tcfg)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _encode(self, y):
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        bad = (idx >= len(self.classes_)) | (self.classes_[np.minimum(idx, len(self.classes_) - 1)] != y)
        if np.any(bad):
            raise ValueError(f"unknown labels: {sorted(set(y[bad].tolist()))}")
        return idx

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        return predict(self.network_, _check_images(X, self.patch_size))["probabilities"]

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def transform(self, X):
        """Final attribute probabilities, shape ``(n, M)``."""
        check_is_fitted(self, "network_")
        out = predict(self.network_, _check_images(X, self.patch_size))
        if out["attributes"] is None:
            raise ValueError("network was built without attribute heads")
        return out["attributes"]


class LogicRegression(ClassifierMixin, BaseEstimator):
    """Boolean expression tree over binarized attributes, fit by annealing."""

    def __init__(self, threshold=0.5, n_proposals=20000, t0=1.0, cooling=0.97,
                 cooling_interval=100, max_leaves=8, random_state=0):
        self.threshold = threshold
        self.n_proposals = n_proposals
        self.t0 = t0
        self.cooling = cooling
        self.cooling_interval = cooling_interval
        self.max_leaves = max_leaves
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) != 2:
            raise ValueError(f"logic regression needs exactly two classes, got {len(self.classes_)}")
        cfg = AnnealConfig(n_proposals=self.n_proposals, t0=self.t0, cooling=self.cooling,
                           cooling_interval=self.cooling_interval, max_leaves=self.max_leaves,
                           threshold=self.threshold)
        target = (y == self.classes_[1]).astype(np.int64)
        self.tree_, self.train_accuracy_ = fit_logic_tree(binarize(X, self.threshold), target, cfg,
                                                          self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "tree_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.classes_[evaluate_tree(self.tree_, binarize(X, self.threshold)).astype(np.int64)]


class LinearSVM(ClassifierMixin, BaseEstimator):
    """Binary linear SVM trained by hinge-loss subgradient descent."""

    def __init__(self, C=1.0, epochs=200, batch_size=16, random_state=0):
        self.C = C
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) != 2:
            raise ValueError(f"binary SVM needs exactly two classes, got {len(self.classes_)}")
        signs = np.where(y == self.classes_[1], 1.0, -1.0)
        self.coef_, self.intercept_ = train_linear_svm(X, signs, self.C, self.epochs, self.batch_size,
                                                       self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_ + self.intercept_

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(np.int64)]
