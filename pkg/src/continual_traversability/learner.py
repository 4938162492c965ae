"""Anomaly-style traversability learner.

A variational autoencoder is trained to reconstruct traversable features only,
while an MLP head on the latent mean predicts traversability. The objective is::

    total = w1 * reconstruction + w2 * traversability (BCE) + w3 * regularization

where the regularization is the KL divergence between the latent of a row and
the latent of its own reconstruction (``cycle``), or the KL divergence to a
standard normal prior (``prior``). Gradients are derived by hand; see
`gradient_check`.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .exceptions import LearnerError, NonFiniteLossError
from .protocol import (
    OPTIMIZER_ADAM,
    OPTIMIZER_SGD,
    REGULARIZATION_CYCLE,
    REGULARIZATION_PRIOR,
)

logger = logging.getLogger(__name__)

# Predictions are clamped to [BCE_EPSILON, 1 - BCE_EPSILON] inside the BCE.
BCE_EPSILON = 1e-7
GRADIENT_CHECK_STEP = 1e-5
GRADIENT_CHECK_FLOOR = 1e-8

PARAMETER_NAMES = (
    'enc_w1',
    'enc_b1',
    'enc_w2',
    'enc_b2',
    'dec_w1',
    'dec_b1',
    'dec_w2',
    'dec_b2',
    'mlp_w1',
    'mlp_b1',
    'mlp_w2',
    'mlp_b2',
)

ACTIVATIONS = {
    # name: (function, derivative expressed through the function's output)
    'tanh': (np.tanh, lambda out: 1.0 - out ** 2),
    'linear': (lambda x: x, np.ones_like),
}


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0

    def __post_init__(self):
        values = (self.w1, self.w2, self.w3)
        if not all(np.isfinite(value) and value >= 0 for value in values):
            raise LearnerError("Loss weights must be finite and non-negative.")
        if not any(value > 0 for value in values):
            raise LearnerError("At least one loss weight must be positive.")


@dataclass(frozen=True)
class LearnerConfig:
    feature_dim: int = 64
    latent_dim: int = 16
    hidden: int = 64
    mlp_hidden: int = 32
    activation: str = 'tanh'
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: str = OPTIMIZER_SGD
    lr: float = 1e-2
    momentum: float = 0.9
    regularization: str = REGULARIZATION_CYCLE
    negative_weight: float = 1.0
    clip_norm: float = 10.0
    # Pre-clip gradient norms above this are logged as warnings.
    warn_gradient_norm: float = 1e3

    def __post_init__(self):
        for name in ('feature_dim', 'latent_dim', 'hidden', 'mlp_hidden'):
            if getattr(self, name) < 1:
                raise LearnerError("{} must be >= 1.".format(name))
        if self.activation not in ACTIVATIONS:
            raise LearnerError("Unknown activation '{}'.".format(self.activation))
        if self.optimizer not in (OPTIMIZER_SGD, OPTIMIZER_ADAM):
            raise LearnerError("Unknown optimizer '{}'.".format(self.optimizer))
        if self.regularization not in (REGULARIZATION_CYCLE, REGULARIZATION_PRIOR):
            raise LearnerError(
                "Unknown regularization '{}'.".format(self.regularization)
            )
        if not self.lr > 0:
            raise LearnerError("lr must be positive.")
        if not 0 <= self.momentum < 1:
            raise LearnerError("momentum must lie in [0, 1).")
        if self.negative_weight < 0:
            raise LearnerError("negative_weight must be non-negative.")
        if not self.clip_norm > 0:
            raise LearnerError("clip_norm must be positive.")


class ModelParams:
    """Encoder, decoder and MLP weights, held in `PARAMETER_NAMES` order."""

    def __init__(self, arrays, activation='tanh'):
        missing = [name for name in PARAMETER_NAMES if name not in arrays]
        if missing:
            raise LearnerError("Missing parameter blocks: {}.".format(missing))
        if activation not in ACTIVATIONS:
            raise LearnerError("Unknown activation '{}'.".format(activation))
        self.arrays = OrderedDict(
            (name, np.array(arrays[name], dtype=np.float64)) for name in PARAMETER_NAMES
        )
        self.activation = activation
        self._check_shapes()

    def _check_shapes(self):
        dim, hidden = self.arrays['enc_w1'].shape
        latent = self.arrays['dec_w1'].shape[0]
        mlp_hidden = self.arrays['mlp_w1'].shape[1]
        expected = self.expected_shapes(dim, latent, hidden, mlp_hidden)
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise LearnerError(
                    "Parameter {} has shape {}, expected {}.".format(
                        name, self.arrays[name].shape, shape
                    )
                )

    @staticmethod
    def expected_shapes(feature_dim, latent_dim, hidden, mlp_hidden):
        return OrderedDict(
            [
                ('enc_w1', (feature_dim, hidden)),
                ('enc_b1', (hidden,)),
                ('enc_w2', (hidden, 2 * latent_dim)),
                ('enc_b2', (2 * latent_dim,)),
                ('dec_w1', (latent_dim, hidden)),
                ('dec_b1', (hidden,)),
                ('dec_w2', (hidden, feature_dim)),
                ('dec_b2', (feature_dim,)),
                ('mlp_w1', (latent_dim, mlp_hidden)),
                ('mlp_b1', (mlp_hidden,)),
                ('mlp_w2', (mlp_hidden, 1)),
                ('mlp_b2', (1,)),
            ]
        )

    @classmethod
    def zeros(cls, feature_dim, latent_dim, hidden, mlp_hidden, activation='tanh'):
        shapes = cls.expected_shapes(feature_dim, latent_dim, hidden, mlp_hidden)
        arrays = {name: np.zeros(shape) for name, shape in shapes.items()}
        return cls(arrays, activation)

    @classmethod
    def initialize(cls, config, rng):
        """Weights ~ N(0, 1/fan_in), zero biases."""
        shapes = cls.expected_shapes(
            config.feature_dim, config.latent_dim, config.hidden, config.mlp_hidden
        )
        arrays = {}
        for name, shape in shapes.items():
            if len(shape) == 2:
                arrays[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
            else:
                arrays[name] = np.zeros(shape)
        return cls(arrays, config.activation)

    @property
    def feature_dim(self):
        return self.arrays['enc_w1'].shape[0]

    @property
    def hidden(self):
        return self.arrays['enc_w1'].shape[1]

    @property
    def latent_dim(self):
        return self.arrays['dec_w1'].shape[0]

    @property
    def mlp_hidden(self):
        return self.arrays['mlp_w1'].shape[1]

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self):
        arrays = {name: array.copy() for name, array in self.arrays.items()}
        return ModelParams(arrays, self.activation)

    def is_finite(self):
        return all(np.all(np.isfinite(array)) for array in self.arrays.values())

    def size(self):
        return sum(array.size for array in self.arrays.values())

    def __repr__(self):
        return '<ModelParams: D={} L={} hidden={} mlp_hidden={} activation={}>'.format(
            self.feature_dim,
            self.latent_dim,
            self.hidden,
            self.mlp_hidden,
            self.activation,
        )


@dataclass(frozen=True, eq=False)
class LatentSample:
    mean: np.ndarray
    log_var: np.ndarray
    z: np.ndarray
    noise: np.ndarray


def _as_rows(x, name):
    rows = np.asarray(x, dtype=np.float64)
    single = rows.ndim == 1
    rows = np.atleast_2d(rows)
    if not np.all(np.isfinite(rows)):
        raise LearnerError("{} contains non-finite values.".format(name))
    return rows, single


def _encoder(params, rows):
    act, _ = ACTIVATIONS[params.activation]
    hidden = act(rows @ params['enc_w1'] + params['enc_b1'])
    out = hidden @ params['enc_w2'] + params['enc_b2']
    latent = params.latent_dim
    return hidden, out[:, :latent], out[:, latent:]


def _decoder(params, z):
    act, _ = ACTIVATIONS[params.activation]
    hidden = act(z @ params['dec_w1'] + params['dec_b1'])
    return hidden, hidden @ params['dec_w2'] + params['dec_b2']


def _mlp_logit(params, mean):
    act, _ = ACTIVATIONS[params.activation]
    hidden = act(mean @ params['mlp_w1'] + params['mlp_b1'])
    return hidden, (hidden @ params['mlp_w2'] + params['mlp_b2'])[:, 0]


def encode(x, params, rng=None, noise=None):
    """Encode features into a reparameterized latent sample.

    ``noise`` (standard normal, one per latent dimension) is drawn from ``rng``
    unless given; with neither, ``z`` equals the mean.
    """
    rows, single = _as_rows(x, 'Encoder input')
    _, mean, log_var = _encoder(params, rows)
    if noise is None:
        noise = np.zeros_like(mean) if rng is None else rng.standard_normal(mean.shape)
    noise = np.asarray(noise, dtype=np.float64).reshape(mean.shape)
    z = mean + np.exp(0.5 * log_var) * noise
    if single:
        return LatentSample(mean[0], log_var[0], z[0], noise[0])
    return LatentSample(mean, log_var, z, noise)


def decode(z, params):
    rows, single = _as_rows(z, 'Decoder input')
    _, output = _decoder(params, rows)
    return output[0] if single else output


def predict_traversability(x, params):
    """Traversability probability; uses the latent mean, so it is rng-free."""
    rows, single = _as_rows(x, 'Prediction input')
    _, mean, _ = _encoder(params, rows)
    _, logit = _mlp_logit(params, mean)
    probability = expit(logit)
    return float(probability[0]) if single else probability


def loss_reconstruction(features, reconstructions):
    """Mean over rows of the squared Euclidean reconstruction error."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    reconstructions = np.atleast_2d(np.asarray(reconstructions, dtype=np.float64))
    if features.shape[0] == 0:
        raise LearnerError("Reconstruction loss of an empty batch.")
    return float(np.mean(np.sum((features - reconstructions) ** 2, axis=1)))


def _bce_rows(labels, predictions, negative_weight):
    labels = np.asarray(labels, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    clamped = np.clip(predictions, BCE_EPSILON, 1 - BCE_EPSILON)
    row_weights = np.where(labels > 0.5, 1.0, negative_weight)
    loss = -(labels * np.log(clamped) + (1.0 - labels) * np.log(1.0 - clamped))
    return row_weights, loss


def loss_traversability(labels, predictions, negative_weight=1.0):
    """Binary cross-entropy, negatives weighted by ``negative_weight``."""
    row_weights, loss = _bce_rows(labels, predictions, negative_weight)
    return float(np.mean(row_weights * loss))


def _kl_rows(mean, log_var, mean_hat, log_var_hat):
    inverse = np.exp(-log_var_hat)
    spread = (np.exp(log_var) + (mean - mean_hat) ** 2) * inverse
    terms = log_var_hat - log_var + spread - 1.0
    return 0.5 * np.sum(np.atleast_2d(terms), axis=1)


def loss_regularization(latent, latent_hat):
    """Batch-mean KL(latent || latent_hat) between diagonal Gaussians."""
    rows = _kl_rows(latent.mean, latent.log_var, latent_hat.mean, latent_hat.log_var)
    return float(np.mean(rows))


def loss_prior(latent):
    """Batch-mean KL(latent || N(0, I))."""
    mean = np.atleast_2d(latent.mean)
    log_var = np.atleast_2d(latent.log_var)
    terms = np.exp(log_var) + mean ** 2 - 1.0 - log_var
    return float(np.mean(0.5 * np.sum(terms, axis=1)))


@dataclass
class Objective:
    total: float
    components: dict
    # Squared reconstruction error of every row.
    row_errors: np.ndarray
    gradients: dict = None


def evaluate_objective(
    params,
    features,
    labels,
    noise,
    weights,
    regularization=REGULARIZATION_CYCLE,
    negative_weight=1.0,
    gradients=True,
):
    """Total loss of a batch and, optionally, its gradient for every parameter.

    Reconstruction and regularization use the traversable rows only; the
    traversability loss uses every row.
    """
    _, dact = ACTIVATIONS[params.activation]
    rows = np.asarray(features, dtype=np.float64)
    traversable = np.asarray(labels, dtype=bool)
    count = rows.shape[0]
    positives = int(traversable.sum())
    positive_scale = 1.0 / positives if positives else 0.0

    enc_hidden, mean, log_var = _encoder(params, rows)
    sigma = np.exp(0.5 * log_var)
    z = mean + sigma * noise
    dec_hidden, reconstruction = _decoder(params, z)
    mlp_hidden, logit = _mlp_logit(params, mean)
    prediction = expit(logit)

    residual = reconstruction - rows
    row_errors = np.sum(residual ** 2, axis=1)
    reco = float(row_errors[traversable].mean()) if positives else 0.0

    target = traversable.astype(np.float64)
    row_weights, bce = _bce_rows(target, prediction, negative_weight)
    trav = float(np.mean(row_weights * bce))

    if regularization == REGULARIZATION_CYCLE:
        cyc_hidden, mean_hat, log_var_hat = _encoder(params, reconstruction)
        kl = _kl_rows(mean, log_var, mean_hat, log_var_hat)
    else:
        kl = 0.5 * np.sum(np.exp(log_var) + mean ** 2 - 1.0 - log_var, axis=1)
    reg = float(kl[traversable].mean()) if positives else 0.0

    total = weights.w1 * reco + weights.w2 * trav + weights.w3 * reg
    objective = Objective(
        total=total,
        components={
            'reconstruction': reco,
            'traversability': trav,
            'regularization': reg,
        },
        row_errors=row_errors,
    )
    if not gradients:
        return objective

    grads = {name: np.zeros_like(array) for name, array in params.arrays.items()}

    d_reconstruction = np.zeros_like(rows)
    d_reconstruction[traversable] = (
        2.0 * weights.w1 * positive_scale * residual[traversable]
    )

    # Clamped predictions have zero gradient.
    inside = (prediction > BCE_EPSILON) & (prediction < 1 - BCE_EPSILON)
    d_logit = weights.w2 * row_weights * (prediction - target) / count
    d_logit = np.where(inside, d_logit, 0.0)
    d_logit = d_logit[:, None]
    grads['mlp_w2'] += mlp_hidden.T @ d_logit
    grads['mlp_b2'] += d_logit.sum(axis=0)
    d_mlp = (d_logit @ params['mlp_w2'].T) * dact(mlp_hidden)
    grads['mlp_w1'] += mean.T @ d_mlp
    grads['mlp_b1'] += d_mlp.sum(axis=0)
    d_mean = d_mlp @ params['mlp_w1'].T
    d_log_var = np.zeros_like(log_var)

    kl_scale = np.where(traversable, weights.w3 * positive_scale, 0.0)[:, None]
    if regularization == REGULARIZATION_CYCLE:
        inverse = np.exp(-log_var_hat)
        delta = mean - mean_hat
        variance = np.exp(log_var)
        d_mean += kl_scale * delta * inverse
        d_log_var += kl_scale * 0.5 * (variance * inverse - 1.0)
        d_out_hat = np.hstack(
            [
                -kl_scale * delta * inverse,
                kl_scale * 0.5 * (1.0 - (variance + delta ** 2) * inverse),
            ]
        )
        grads['enc_w2'] += cyc_hidden.T @ d_out_hat
        grads['enc_b2'] += d_out_hat.sum(axis=0)
        d_cyc = (d_out_hat @ params['enc_w2'].T) * dact(cyc_hidden)
        grads['enc_w1'] += reconstruction.T @ d_cyc
        grads['enc_b1'] += d_cyc.sum(axis=0)
        d_reconstruction += d_cyc @ params['enc_w1'].T
    else:
        d_mean += kl_scale * mean
        d_log_var += kl_scale * 0.5 * (np.exp(log_var) - 1.0)

    grads['dec_w2'] += dec_hidden.T @ d_reconstruction
    grads['dec_b2'] += d_reconstruction.sum(axis=0)
    d_dec = (d_reconstruction @ params['dec_w2'].T) * dact(dec_hidden)
    grads['dec_w1'] += z.T @ d_dec
    grads['dec_b1'] += d_dec.sum(axis=0)
    d_z = d_dec @ params['dec_w1'].T

    d_mean += d_z
    d_log_var += d_z * noise * 0.5 * sigma
    d_out = np.hstack([d_mean, d_log_var])
    grads['enc_w2'] += enc_hidden.T @ d_out
    grads['enc_b2'] += d_out.sum(axis=0)
    d_enc = (d_out @ params['enc_w2'].T) * dact(enc_hidden)
    grads['enc_w1'] += rows.T @ d_enc
    grads['enc_b1'] += d_enc.sum(axis=0)

    objective.gradients = grads
    return objective


def global_norm(gradients):
    return float(np.sqrt(sum(np.sum(g ** 2) for g in gradients.values())))


class SgdMomentum:
    def __init__(self, lr, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, params, gradients):
        for name, gradient in gradients.items():
            velocity = self.velocity.get(name)
            if velocity is None:
                velocity = gradient.copy()
            else:
                velocity = self.momentum * velocity + gradient
            self.velocity[name] = velocity
            params.arrays[name] -= self.lr * velocity


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.steps = 0
        self.first = {}
        self.second = {}

    def step(self, params, gradients):
        self.steps += 1
        for name, gradient in gradients.items():
            first = self.beta1 * self.first.get(name, 0.0) + (1 - self.beta1) * gradient
            second = (
                self.beta2 * self.second.get(name, 0.0)
                + (1 - self.beta2) * gradient ** 2
            )
            self.first[name] = first
            self.second[name] = second
            first_hat = first / (1 - self.beta1 ** self.steps)
            second_hat = second / (1 - self.beta2 ** self.steps)
            update = first_hat / (np.sqrt(second_hat) + self.epsilon)
            params.arrays[name] -= self.lr * update


@dataclass
class StepResult:
    total: float
    components: dict
    # Mean reconstruction loss over the traversable rows of each drawn node.
    node_losses: dict
    gradient_norm: float


def stack_batch(batch):
    """Stack replay draws into feature rows, labels and the owning node of each row."""
    if not batch:
        raise LearnerError("Training batch is empty.")
    features = np.concatenate([item.features for item in batch]).astype(np.float64)
    labels = np.concatenate([item.labels for item in batch]).astype(bool)
    owners = np.concatenate(
        [np.full(len(item.rows), position) for position, item in enumerate(batch)]
    )
    return features, labels, owners


class Learner:
    """VAE + MLP model with its optimizer state."""

    def __init__(self, config, rng=None, params=None):
        self.config = config
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            params = ModelParams.initialize(config, rng)
        elif params.feature_dim != config.feature_dim:
            raise LearnerError(
                "Model feature dimension {} differs from configured {}.".format(
                    params.feature_dim, config.feature_dim
                )
            )
        self.params = params
        if config.optimizer == OPTIMIZER_ADAM:
            self.optimizer = Adam(config.lr)
        else:
            self.optimizer = SgdMomentum(config.lr, config.momentum)
        self.steps = 0

    def __repr__(self):
        return '<Learner: {!r} optimizer={} steps={}>'.format(
            self.params, self.config.optimizer, self.steps
        )

    def objective(self, features, labels, noise, gradients=True):
        return evaluate_objective(
            self.params,
            features,
            labels,
            noise,
            self.config.weights,
            regularization=self.config.regularization,
            negative_weight=self.config.negative_weight,
            gradients=gradients,
        )

    def train_step(self, batch, rng):
        """One optimizer update on a replay batch (list of `BatchItem`)."""
        features, labels, owners = stack_batch(batch)
        noise = rng.standard_normal((features.shape[0], self.params.latent_dim))
        objective = self.objective(features, labels, noise)
        norm = global_norm(objective.gradients)

        if not (np.isfinite(objective.total) and np.isfinite(norm)):
            raise NonFiniteLossError(
                "Training loss is not finite (learning rate {} too high?).".format(
                    self.config.lr
                ),
                diagnostics={
                    'step': self.steps,
                    'lr': self.config.lr,
                    'components': objective.components,
                    'gradient_norm': norm,
                },
            )
        if norm > self.config.warn_gradient_norm:
            logger.warning(
                "Large gradient norm before clipping",
                extra={'step': self.steps, 'gradient_norm': norm},
            )
        gradients = objective.gradients
        if norm > self.config.clip_norm:
            scale = self.config.clip_norm / norm
            gradients = {name: gradient * scale for name, gradient in gradients.items()}

        self.optimizer.step(self.params, gradients)
        self.steps += 1
        if not self.params.is_finite():
            raise NonFiniteLossError(
                "Parameters became non-finite after step {}.".format(self.steps),
                diagnostics={
                    'step': self.steps,
                    'lr': self.config.lr,
                    'gradient_norm': norm,
                },
            )

        return StepResult(
            total=objective.total,
            components=objective.components,
            node_losses=self._node_losses(batch, objective.row_errors, labels, owners),
            gradient_norm=norm,
        )

    @staticmethod
    def _node_losses(batch, row_errors, labels, owners):
        sums = {}
        counts = {}
        for position, item in enumerate(batch):
            selected = (owners == position) & labels
            if not selected.any():
                continue
            error = float(row_errors[selected].sum())
            sums[item.node] = sums.get(item.node, 0.0) + error
            counts[item.node] = counts.get(item.node, 0) + int(selected.sum())
        return {node: sums[node] / counts[node] for node in sums}

    def predict(self, features):
        """Traversability probabilities of an (N, D) array of pixel features."""
        rows = np.asarray(features).reshape(-1, self.params.feature_dim)
        return predict_traversability(rows, self.params)

    def reconstruction_errors(self, features):
        """Squared reconstruction error of each row, decoding the latent mean."""
        rows = np.asarray(features, dtype=np.float64)
        rows = rows.reshape(-1, self.params.feature_dim)
        _, mean, _ = _encoder(self.params, rows)
        _, reconstruction = _decoder(self.params, mean)
        return np.sum((reconstruction - rows) ** 2, axis=1)


def gradient_check(
    params,
    batch,
    weights,
    regularization=REGULARIZATION_CYCLE,
    negative_weight=1.0,
    rng=None,
    step=GRADIENT_CHECK_STEP,
):
    """Largest relative error between analytic and central-difference gradients.

    :param batch: ``(features, labels)`` arrays or a list of `BatchItem`
    :return: ``max |a - n| / max(|a|, |n|, 1e-8)`` over every parameter entry
    """
    if isinstance(batch, tuple):
        features, labels = batch
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=bool)
    else:
        features, labels, _ = stack_batch(batch)
    rng = np.random.default_rng(0) if rng is None else rng
    noise = rng.standard_normal((features.shape[0], params.latent_dim))

    def total(current):
        return evaluate_objective(
            current,
            features,
            labels,
            noise,
            weights,
            regularization=regularization,
            negative_weight=negative_weight,
            gradients=False,
        ).total

    analytic = evaluate_objective(
        params,
        features,
        labels,
        noise,
        weights,
        regularization=regularization,
        negative_weight=negative_weight,
    ).gradients

    probe = params.copy()
    worst = 0.0
    for name, array in probe.arrays.items():
        flat = array.reshape(-1)
        exact = analytic[name].reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + step
            upper = total(probe)
            flat[index] = original - step
            lower = total(probe)
            flat[index] = original
            numeric = (upper - lower) / (2.0 * step)
            denominator = max(abs(exact[index]), abs(numeric), GRADIENT_CHECK_FLOOR)
            worst = max(worst, abs(exact[index] - numeric) / denominator)
    return worst
