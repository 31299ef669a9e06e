"""Estimator facade so the model composes with the wider ecosystem:
``fit`` trains on a cohort directory (or loaded CohortData), ``predict``
virtually stains requested markers, ``transform`` produces pooled latent
embeddings ready for any downstream classifier.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .markers import MarkerSet
from .masking import MaskConfig
from .network import NetworkConfig
from .preprocess import center_crop
from .trainer import CohortData, TrainConfig, train
from .evalsuite import run_loo_eval
from .validation import check_marker_arg, check_raster


def _resolve_net(net):
    if isinstance(net, NetworkConfig):
        return net
    if net == "tiny":
        return NetworkConfig.tiny()
    if net == "base":
        return NetworkConfig.base()
    raise ValueError(f"unknown network preset {net!r}")


class HyperconvStainer(BaseEstimator):
    """Marker-adaptive masked autoencoder with heteroscedastic output.

    Parameters mirror the training configuration; ``net`` is "tiny",
    "base", or an explicit NetworkConfig.
    """

    def __init__(self, net="tiny", epochs=30, batch_size=8, peak_lr=5e-4,
                 final_lr=1e-6, warmup_epochs=5, weight_decay=1e-4,
                 clip_norm=1.0, mask_alpha=0.75, mask_beta=0.5, mask_rho=0.6,
                 mask_patch=8, subimage=256, masked_loss_only=False, seed=0):
        self.net = net
        self.epochs = epochs
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.final_lr = final_lr
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.mask_alpha = mask_alpha
        self.mask_beta = mask_beta
        self.mask_rho = mask_rho
        self.mask_patch = mask_patch
        self.subimage = subimage
        self.masked_loss_only = masked_loss_only
        self.seed = seed

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            peak_lr=self.peak_lr, final_lr=self.final_lr,
            warmup_epochs=self.warmup_epochs, weight_decay=self.weight_decay,
            clip_norm=self.clip_norm, seed=self.seed, subimage=self.subimage,
            masked_loss_only=self.masked_loss_only,
            mask=MaskConfig(alpha=self.mask_alpha, beta=self.mask_beta,
                            rho=self.mask_rho, patch=self.mask_patch),
            net=_resolve_net(self.net))

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predicting")

    def fit(self, dataset, y=None):
        """Train on a cohort directory path or a loaded CohortData."""
        if isinstance(dataset, str):
            dataset = CohortData.load(dataset)
        result = train(self._train_config(), dataset)
        self.model_ = result.model
        self.vocab_ = result.model.vocab
        self.history_ = result.history
        self.result_ = result
        return self

    def predict(self, image, markers, targets=None):
        """Virtually stain ``targets`` (default: the input markers) from a
        [C,H,W] image; returns (mean, log_variance) float arrays."""
        self._check_fitted()
        in_set = MarkerSet(check_marker_arg(markers, self.vocab_))
        image = check_raster(image, channels=len(in_set))
        tgt = in_set if targets is None else MarkerSet(
            check_marker_arg(targets, self.vocab_))
        z = self.model_.encode(image, in_set)
        pred = self.model_.decode(z, tgt)
        return pred.mean.data.copy(), pred.log_var.data.copy()

    def transform(self, crops, markers):
        """Pooled latent embeddings [n, d_lat] for a stack of [C,H,W]
        crops sharing one marker panel."""
        self._check_fitted()
        mset = MarkerSet(check_marker_arg(markers, self.vocab_))
        out = []
        for crop in crops:
            arr = check_raster(crop, channels=len(mset), name="crop")
            z = self.model_.encode(arr, mset)
            out.append(z.data.mean(axis=(1, 2)))
        return np.stack(out)

    def score(self, dataset, y=None):
        """Negative mean leave-one-marker-out MSE over the cohort (higher
        is better, sklearn convention)."""
        self._check_fitted()
        if isinstance(dataset, str):
            dataset = CohortData.load(dataset)
        rows = run_loo_eval(self.model_, dataset)
        return -float(np.mean([r.mse for r in rows]))
