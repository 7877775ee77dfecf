"""scikit-learn style wrappers around the segmentation pipeline.

Samples are whole volumes: ``X`` is a list of :class:`~voxseg.io.Volume` (or
3D arrays), ``y`` a list of :class:`~voxseg.io.LabelMap` (or integer arrays).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .inference import argmax_labels, segment_dense
from .io import normalize_intensity
from .metrics import largest_component_filter, majority_vote_baseline, mean_foreground_dsc
from .network import make_spec
from .training import TrainingConfig, train
from .validation import check_labelmaps, check_masks, check_volumes

__all__ = [
    "IntensityNormalizer",
    "LargestComponentFilter",
    "MajorityVoteSegmenter",
    "FCNNSegmenter",
]


class IntensityNormalizer(TransformerMixin, BaseEstimator):
    """Volume-wise z-scoring; stateless."""

    def fit(self, X, y=None, masks=None):
        check_volumes(X)
        return self

    def fit_transform(self, X, y=None, masks=None):
        return self.fit(X).transform(X, masks)

    def transform(self, X, masks=None):
        vols = check_volumes(X)
        return [normalize_intensity(v, m) for v, m in zip(vols, check_masks(masks, vols))]


class LargestComponentFilter(TransformerMixin, BaseEstimator):
    def __init__(self, connectivity=26):
        self.connectivity = connectivity

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [largest_component_filter(l, self.connectivity) for l in X]


class MajorityVoteSegmenter(BaseEstimator):
    """Predicts the per-voxel modal training label for every input volume."""

    def __init__(self, num_classes=9):
        self.num_classes = num_classes

    def fit(self, X, y):
        vols = check_volumes(X)
        labels = check_labelmaps(y, vols, self.num_classes)
        self.labelmap_ = majority_vote_baseline(labels)
        return self

    def predict(self, X):
        check_is_fitted(self, "labelmap_")
        out = []
        for v in check_volumes(X):
            if v.dims != self.labelmap_.dims:
                raise ValueError(f"volume dims {v.dims} differ from training dims {self.labelmap_.dims}")
            out.append(self.labelmap_.with_labels(self.labelmap_.labels))
        return out

    def score(self, X, y):
        preds = self.predict(X)
        refs = check_labelmaps(y, check_volumes(X), self.num_classes)
        return float(np.mean([mean_foreground_dsc(r, p) for r, p in zip(refs, preds)]))


class FCNNSegmenter(BaseEstimator):
    """Train and apply one of the three FCNN architectures.

    Parameters mirror :class:`~voxseg.training.TrainingConfig`; defaults are
    the published schedule. ``conv_widths``/``fc_widths`` rescale the layer
    widths (``None`` keeps 25/50/75 and 400/200/150). ``random_state`` seeds
    both weight initialization and segment sampling.
    """

    def __init__(
        self,
        arch="cnn_multi",
        conv_widths=None,
        fc_widths=None,
        num_classes=9,
        epochs=30,
        subepochs_per_epoch=20,
        samples_per_subepoch=500,
        batch_size=5,
        segment_size=27,
        initial_lr=0.001,
        lr_halving_period=3,
        momentum=0.6,
        foreground_fraction=0.5,
        normalize=True,
        postprocess=True,
        input_tile=35,
        n_jobs=1,
        random_state=0,
        checkpoint_dir=None,
        log_path=None,
    ):
        self.arch = arch
        self.conv_widths = conv_widths
        self.fc_widths = fc_widths
        self.num_classes = num_classes
        self.epochs = epochs
        self.subepochs_per_epoch = subepochs_per_epoch
        self.samples_per_subepoch = samples_per_subepoch
        self.batch_size = batch_size
        self.segment_size = segment_size
        self.initial_lr = initial_lr
        self.lr_halving_period = lr_halving_period
        self.momentum = momentum
        self.foreground_fraction = foreground_fraction
        self.normalize = normalize
        self.postprocess = postprocess
        self.input_tile = input_tile
        self.n_jobs = n_jobs
        self.random_state = random_state
        self.checkpoint_dir = checkpoint_dir
        self.log_path = log_path

    def _config(self) -> TrainingConfig:
        seed = self.random_state
        if seed is None:
            seed = int(np.random.SeedSequence().generate_state(1)[0])
        return TrainingConfig(
            epochs=self.epochs,
            subepochs_per_epoch=self.subepochs_per_epoch,
            samples_per_subepoch=self.samples_per_subepoch,
            batch_size=self.batch_size,
            segment_size=self.segment_size,
            initial_lr=self.initial_lr,
            lr_halving_period=self.lr_halving_period,
            momentum=self.momentum,
            foreground_fraction=self.foreground_fraction,
            seed=int(seed),
        )

    def _prepare(self, X, masks):
        vols = check_volumes(X)
        ms = check_masks(masks, vols)
        if self.normalize:
            vols = [normalize_intensity(v, m) for v, m in zip(vols, ms)]
        return vols, ms

    def fit(self, X, y, masks=None, X_val=None, y_val=None, masks_val=None):
        vols, ms = self._prepare(X, masks)
        labels = check_labelmaps(y, vols, self.num_classes)
        validation = None
        if X_val is not None:
            vv, mv = self._prepare(X_val, masks_val)
            validation = list(zip(vv, check_labelmaps(y_val, vv, self.num_classes), mv))
        self.spec_ = make_spec(self.arch, self.conv_widths, self.fc_widths, self.num_classes)
        self.config_ = self._config()
        self.state_, self.training_log_ = train(
            self.spec_,
            list(zip(vols, labels, ms)),
            self.config_,
            validation=validation,
            checkpoint_dir=self.checkpoint_dir,
            log_path=self.log_path,
        )
        return self

    def predict_proba(self, X, masks=None):
        check_is_fitted(self, "state_")
        vols, ms = self._prepare(X, masks)
        return [
            segment_dense(v, self.state_, self.spec_, input_tile=self.input_tile, mask=m, n_jobs=self.n_jobs)
            for v, m in zip(vols, ms)
        ]

    def predict(self, X, masks=None):
        out = [argmax_labels(p) for p in self.predict_proba(X, masks)]
        if self.postprocess:
            out = [largest_component_filter(l) for l in out]
        return out

    def score(self, X, y, masks=None):
        """Mean foreground DSC over the given volumes."""
        preds = self.predict(X, masks)
        refs = check_labelmaps(y, check_volumes(X), self.num_classes)
        return float(np.mean([mean_foreground_dsc(r, p) for r, p in zip(refs, preds)]))

    def save(self, path):
        check_is_fitted(self, "state_")
        save_checkpoint(path, self.state_, self.spec_, seed=self.config_.seed,
                        epoch=self.config_.epochs, config=self.config_.to_dict())

    @classmethod
    def from_checkpoint(cls, path, **params):
        state, spec = load_checkpoint(path)
        est = cls(arch=spec.name, conv_widths=spec.conv_widths, fc_widths=spec.fc_widths,
                  num_classes=spec.num_classes, **params)
        est.state_, est.spec_ = state, spec
        est.config_ = est._config()
        est.training_log_ = []
        return est
