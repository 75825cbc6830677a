# seg_task.py - Synthetic segmentation task: FNR control, soft-FPR cost

"""
Synthetic stand-in for tumour segmentation.

Each image has d pixels with feature vectors x_j (first entry is a bias
of 1) and binary labels drawn from a logistic ground truth. A linear
scorer f_theta(x) = theta . x marks pixel j positive when
f_theta(x_j) >= lambda. The controlled risk is the false negative rate

    L_i(lambda) = (1/|Y_i|) * #{positive j : f_theta(x_j) < lambda}

and the training cost is the sigmoid-smoothed false positive rate

    l_i(theta, lambda) = mean over negative j of sigmoid((f_theta(x_j) - lambda) / T)
"""

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy.special import expit

from .calibrate import crc_bisect, DEFAULT_EPS
from .config import dataclass_from_dict
from .exceptions import NoNegativePixels, NoPositivePixels
from .grad import lambda_grad_piecewise
from .logger import get_logger
from .loss_models import BoundFn, ParamInterval, fnr_step_loss
from .validators import (
    collect_errors, validate_count, validate_finite, validate_positive, validate_probability,
)

logger = get_logger(__name__)


@dataclass(frozen=True)
class SegTaskConfig:
    """
    Args:
        d (int): Pixels per image
        feature_dim (int): D, including the bias feature
        n_train, n_cal, n_test (int): Images per split
        alpha (float): Target FNR
        temperature (float): Soft-FPR temperature T
        noise_scale (float): Logit noise of the ground truth
        seed (int): Seed of the ground truth and the default data draw
    """

    d: int = 64
    feature_dim: int = 4
    n_train: int = 400
    n_cal: int = 100
    n_test: int = 200
    alpha: float = 0.1
    temperature: float = 0.1
    noise_scale: float = 1.0
    seed: int = 0

    def validate(self):
        return collect_errors(
            validate_count(self.d, 'd'),
            validate_count(self.feature_dim, 'feature_dim', min_count=2),
            validate_count(self.n_train, 'n_train'),
            validate_count(self.n_cal, 'n_cal'),
            validate_count(self.n_test, 'n_test'),
            validate_probability(self.alpha, 'alpha', allow_zero=False),
            validate_positive(self.temperature, 'temperature'),
            validate_finite(self.noise_scale, 'noise_scale'),
            validate_count(self.seed, 'seed', min_count=0),
        )

    @classmethod
    def from_dict(cls, values):
        return dataclass_from_dict(cls, values)


class SegDataset:
    """Images as a (n, d, D) feature array and a (n, d) label array"""

    def __init__(self, features, labels, ids=None):
        self.features = np.asarray(features, dtype=float)
        self.labels = np.asarray(labels, dtype=int)
        if self.features.ndim != 3 or self.labels.shape != self.features.shape[:2]:
            raise ValueError("features must be (n, d, D) and labels (n, d)")
        self.ids = np.arange(len(self.labels)) if ids is None else np.asarray(ids, dtype=int)

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=int)
        return SegDataset(self.features[indices], self.labels[indices], self.ids[indices])

    def positive_rate(self):
        return float(self.labels.mean())

    def to_frame(self):
        """One row per pixel: image_id, pixel, x0..x{D-1}, label"""
        n, d, dim = self.features.shape
        frame = pd.DataFrame(self.features.reshape(n * d, dim),
                             columns=[f"x{k}" for k in range(dim)])
        frame.insert(0, 'pixel', np.tile(np.arange(d), n))
        frame.insert(0, 'image_id', np.repeat(self.ids, d))
        frame['label'] = self.labels.ravel()
        return frame

    @classmethod
    def from_frame(cls, frame):
        frame = frame.sort_values(['image_id', 'pixel'], kind='stable')
        ids = frame['image_id'].unique()
        d = int(frame['pixel'].max()) + 1
        feature_cols = [c for c in frame.columns if c.startswith('x')]
        features = frame[feature_cols].to_numpy(dtype=float)
        features = features.reshape(len(ids), d, len(feature_cols))
        labels = frame['label'].to_numpy(dtype=int).reshape(len(ids), d)
        return cls(features, labels, ids)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def read_csv(cls, path):
        return cls.from_frame(pd.read_csv(path))


def seg_true_weights(config):
    """Ground-truth logistic weights, fixed by config.seed"""
    rng = np.random.default_rng(config.seed)
    weights = rng.normal(0.0, 1.5, config.feature_dim)
    weights[0] = -1.0
    return weights


def seg_generate(config, n_images=None, rng=None, start_id=0):
    """
    Draw images from the synthetic ground truth

    Images without a positive pixel are redrawn, so every image has a
    defined FNR.

    Args:
        config (SegTaskConfig): Task settings
        n_images (int): Images to draw (default n_train + n_cal + n_test)
        rng (np.random.Generator): Random stream (default: seeded by config.seed)
        start_id (int): First image id

    Returns:
        SegDataset: Generated images
    """
    if n_images is None:
        n_images = config.n_train + config.n_cal + config.n_test
    if rng is None:
        rng = np.random.default_rng([config.seed, 1])

    weights = seg_true_weights(config)
    d, dim = config.d, config.feature_dim
    features = np.empty((n_images, d, dim))
    labels = np.empty((n_images, d), dtype=int)

    for i in range(n_images):
        while True:
            x = rng.normal(size=(d, dim))
            x[:, 0] = 1.0
            logits = x @ weights + config.noise_scale * rng.normal(size=d)
            y = (rng.random(d) < expit(logits)).astype(int)
            if y.any():
                break
        features[i], labels[i] = x, y

    return SegDataset(features, labels, np.arange(start_id, start_id + n_images))


def seg_generate_splits(config):
    """Disjoint train / cal / test splits of one seeded draw"""
    data = seg_generate(config)
    bounds = np.cumsum([config.n_train, config.n_cal])
    indices = np.arange(len(data))
    return {
        'train': data.subset(indices[:bounds[0]]),
        'cal': data.subset(indices[bounds[0]:bounds[1]]),
        'test': data.subset(indices[bounds[1]:]),
    }


def seg_pretrain(train):
    """Least-squares fit of the labels, so scores fall roughly in [0, 1]"""
    x = train.features.reshape(-1, train.features.shape[-1])
    theta, *_ = np.linalg.lstsq(x, train.labels.ravel().astype(float), rcond=None)
    return theta


def seg_scores(theta, data):
    return data.features @ np.asarray(theta, dtype=float)


def seg_fnr_losses(theta, data):
    """FNR StepLoss per image; images without positives are dropped"""
    scores = seg_scores(theta, data)
    losses = []
    for image_scores, image_labels in zip(scores, data.labels):
        try:
            losses.append(fnr_step_loss(image_scores[image_labels == 1]))
        except NoPositivePixels:
            logger.debug("Dropping an image without positive pixels")
    return losses


def seg_fnr(theta, lam, data):
    """Per-image false negative rate at threshold lam"""
    scores = seg_scores(theta, data)
    positives = data.labels == 1
    missed = (scores < lam) & positives
    with np.errstate(invalid='ignore', divide='ignore'):
        return missed.sum(axis=1) / positives.sum(axis=1)


def seg_fpr(theta, lam, data):
    """Per-image false positive rate at threshold lam (nan without negatives)"""
    scores = seg_scores(theta, data)
    negatives = data.labels == 0
    flagged = (scores >= lam) & negatives
    with np.errstate(invalid='ignore', divide='ignore'):
        return flagged.sum(axis=1) / negatives.sum(axis=1)


def seg_fnr_lambda(theta, cal_data, alpha, interval=None, average_neighbors=0):
    """
    lambda(theta) = max{lam in [0, 1] : (1 + sum_i FNR_i(lam)) / (N + 1) <= alpha}

    Args:
        theta (array): Scorer parameters
        cal_data (SegDataset): Calibration images
        alpha (float): Target FNR
        interval (ParamInterval): Lambda (default [0, 1])
        average_neighbors (int): Optional neighbour-averaged gradient

    Returns:
        LambdaGrad: lambda equals one positive pixel's score, whose
            gradient is that pixel's feature vector
    """
    theta = np.asarray(theta, dtype=float)
    scores = seg_scores(theta, cal_data)
    thresholds = []
    for image_scores, image_features, image_labels in zip(scores, cal_data.features,
                                                          cal_data.labels):
        positive = image_labels == 1
        count = int(positive.sum())
        if count == 0:
            continue
        thresholds.append([(s, x, 1.0 / count)
                           for s, x in zip(image_scores[positive], image_features[positive])])

    return lambda_grad_piecewise(thresholds, BoundFn.constant(1.0), alpha, interval,
                                 dim=theta.size, average_neighbors=average_neighbors)


def seg_soft_fpr_cost(theta, lam, features, labels, temperature):
    """
    Soft FPR of one image and its partial derivatives

    Args:
        theta (array): Scorer parameters
        lam (float): Threshold
        features (array): (d, D) pixel features
        labels (array): (d,) binary labels
        temperature (float): T > 0

    Returns:
        tuple: (value, d/dtheta, d/dlambda)

    Raises:
        NoNegativePixels: The image has no negative pixel
    """
    negative = np.asarray(labels) == 0
    if not negative.any():
        raise NoNegativePixels("Soft FPR is undefined for an image without negative pixels")

    x = np.asarray(features, dtype=float)[negative]
    sigma = expit((x @ theta - lam) / temperature)
    slope = sigma * (1.0 - sigma)
    count = x.shape[0]
    return (float(sigma.mean()),
            slope @ x / (temperature * count),
            float(-slope.mean() / temperature))


def seg_soft_fpr_batch(theta, lam, data, temperature):
    """Mean soft FPR and partials over the images that have negatives"""
    theta = np.asarray(theta, dtype=float)
    values, grads, lambda_grads = [], [], []
    for features, labels in zip(data.features, data.labels):
        try:
            value, grad, lambda_grad = seg_soft_fpr_cost(theta, lam, features, labels, temperature)
        except NoNegativePixels:
            continue
        values.append(value)
        grads.append(grad)
        lambda_grads.append(lambda_grad)

    if not values:
        raise NoNegativePixels("No image in the batch has a negative pixel")
    return float(np.mean(values)), np.mean(grads, axis=0), float(np.mean(lambda_grads))


class SegTask:
    """Segmentation task adapter used by the training and validation harness"""

    name = 'seg'
    risk_kind = 'expectation'

    def __init__(self, config=None):
        self.config = config or SegTaskConfig()
        self.bound = BoundFn.constant(1.0)
        self.interval = ParamInterval(0.0, 1.0)

    @property
    def alpha(self):
        return self.config.alpha

    def with_risk(self, alpha=None, delta=None):
        if alpha is None:
            return self
        return SegTask(replace(self.config, alpha=alpha))

    def generate(self):
        return seg_generate_splits(self.config)

    def sample(self, rng, n):
        return seg_generate(self.config, n, rng)

    def initial_theta(self, train):
        return seg_pretrain(train)

    def lambda_grad(self, theta, cal, pred, train_config, t=None):
        return seg_fnr_lambda(theta, cal, self.alpha, self.interval,
                              train_config.average_neighbors)

    def cost_partials(self, theta, lam, pred):
        return seg_soft_fpr_batch(theta, lam, pred, self.config.temperature)

    def calibration_losses(self, theta, data):
        return seg_fnr_losses(theta, data)

    def tune_t(self, theta, holdout):
        return None

    def recalibrate(self, theta, cal, policy='fixed', t=None, eps=DEFAULT_EPS):
        return crc_bisect(self.calibration_losses(theta, cal), self.bound, self.alpha, eps,
                          self.interval)

    def evaluate(self, theta, lam, test):
        fnr = seg_fnr(theta, lam, test)
        fpr = seg_fpr(theta, lam, test)
        return {
            'losses': fnr,
            'costs': fpr,
            'risk': float(np.mean(fnr)),
            'cost': float(np.nanmean(fpr)),
        }

    def loss_sampler(self, theta):
        """(rng, n) -> FNR losses of n fresh images under a fixed model"""
        def sample(rng, n):
            return seg_fnr_losses(theta, seg_generate(self.config, n, rng))
        return sample

    def calibrator(self, eps=DEFAULT_EPS):
        def calibrate(losses):
            return crc_bisect(losses, self.bound, self.alpha, eps, self.interval)
        return calibrate
