"""Numerical self-checks: convolution oracle and finite differences.

All checks run in ``float64``. A gradient check compares analytic
gradients of the scalar ``sum(forward(x) * projection)`` with central
differences (step ``1e-5``) on a sample of entries of the input and of
every parameter.
"""

import time

import numpy as np
import structlog

from . import errors
from . import fields
from . import model as model_module
from . import nn
from . import records
from . import tensor
from . import train

log = structlog.get_logger()

STEP = 1e-5
ORACLE_TOLERANCE = 1e-10
LAYER_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def relative_error(actual, expected):
    """Return ``max|a - b| / max(max|a|, max|b|)`` (0 for two zero arrays)."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise errors.DimensionError('cannot compare shapes {0} and {1}'.format(
            actual.shape, expected.shape))
    if not actual.size:
        return 0.0
    scale = max(np.abs(actual).max(), np.abs(expected).max(), 1e-12)
    return float(np.abs(actual - expected).max() / scale)


def numerical_gradient(function, array, indices=None, step=STEP):
    """Central differences of scalar ``function()`` w.r.t. ``array`` entries.

    ``array`` is perturbed in place and restored afterwards.

    :returns: derivatives for ``indices`` (all flat indices by default)
    """
    flat = array.reshape(-1)
    if indices is None:
        indices = np.arange(flat.size)
    result = np.empty(len(indices))
    for position, index in enumerate(indices):
        saved = flat[index]
        flat[index] = saved + step
        upper = function()
        flat[index] = saved - step
        lower = function()
        flat[index] = saved
        result[position] = (upper - lower) / (2.0 * step)
    return result


def _sample(rng, size, limit):
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, limit, replace=False))


def check_layer(layer, x, seed=0, limit=24):
    """Return the relative gradient error of ``layer`` at input ``x``.

    Inputs and every parameter are compared on up to ``limit`` sampled
    entries each; the error is taken over all sampled entries together.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    projection = rng.standard_normal(layer.forward(x).shape)

    def objective():
        return float(np.sum(layer.forward(x) * projection))

    for _, owner, local in layer.named_parameters():
        owner.grad(local)[...] = 0.0
    layer.forward(x)
    grad_input = layer.backward(projection)

    analytic, numeric = [], []
    picks = _sample(rng, x.size, limit)
    analytic.append(grad_input.reshape(-1)[picks])
    numeric.append(numerical_gradient(objective, x, picks))
    for _, owner, local in layer.named_parameters():
        value = owner.param(local)
        picks = _sample(rng, value.size, limit)
        analytic.append(owner.grad(local).reshape(-1)[picks].copy())
        numeric.append(numerical_gradient(objective, value, picks))
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


class CheckResult(records.Record):
    """Outcome of one self-check."""

    name = fields.String(required=True)
    error = fields.Float(minimum=0.0, required=True)
    tolerance = fields.Float(minimum=0.0, required=True)
    seconds = fields.Float(minimum=0.0, default=0.0)

    __view_key__ = (name, error, tolerance)

    @property
    def ok(self):
        """True when within tolerance."""
        return self.error <= self.tolerance


def random_geometry(rng):
    """Return a random valid ``(x, weight, bias, geom)`` for conv checks."""
    groups = int(rng.choice([1, 1, 2, 3]))
    in_channels = groups * int(rng.integers(1, 4))
    out_channels = groups * int(rng.integers(1, 4))
    kernel = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    stride = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    padding = (int(rng.integers(0, kernel[0])), int(rng.integers(0,
                                                                 kernel[1])))
    height = int(rng.integers(kernel[0], kernel[0] + 7))
    width = int(rng.integers(kernel[1], kernel[1] + 7))
    geom = tensor.ConvGeometry(kernel=kernel, stride=stride, padding=padding,
                               groups=groups)
    x = rng.standard_normal((int(rng.integers(1, 3)), in_channels, height,
                             width))
    weight = rng.standard_normal((out_channels, in_channels // groups) +
                                 kernel)
    bias = rng.standard_normal(out_channels) if rng.random() < 0.5 else None
    return x, weight, bias, geom


def check_conv_oracle(count=100, seed=0):
    """Return the worst im2col-vs-loop relative error over random cases."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        x, weight, bias, geom = random_geometry(rng)
        worst = max(worst, relative_error(
            tensor.conv2d(x, weight, bias, geom),
            tensor.conv2d_reference(x, weight, bias, geom)))
    return worst


def _away_from_zero(rng, shape, margin=0.1):
    values = rng.standard_normal(shape)
    return np.where(np.abs(values) < margin, np.sign(values + 1e-3) * margin,
                    values)


def _layer_cases(rng):
    """Yield ``(name, layer, input)`` for every differentiable layer."""
    yield 'conv2d', nn.Conv2d(3, 4, 3, stride=2, padding=1), \
        rng.standard_normal((2, 3, 7, 7))
    yield 'conv2d depthwise', nn.Conv2d(4, 4, 3, padding=1, groups=4), \
        rng.standard_normal((1, 4, 5, 5))
    yield 'linear', nn.Linear(4, 3), rng.standard_normal((1, 4, 2, 2))
    yield 'layer norm', nn.LayerNorm2d(5), rng.standard_normal((2, 5, 3, 3))
    batch_norm = nn.BatchNorm2d(3)
    yield 'batch norm train', batch_norm, rng.standard_normal((2, 3, 4, 4))
    frozen = nn.BatchNorm2d(3).eval()
    frozen.buffer('running_mean')[...] = rng.standard_normal(3)
    frozen.buffer('running_var')[...] = rng.uniform(0.5, 2.0, 3)
    yield 'batch norm eval', frozen, rng.standard_normal((2, 3, 4, 4))
    yield 'gelu', nn.GELU(), rng.standard_normal((2, 3, 4))
    yield 'relu', nn.ReLU(), _away_from_zero(rng, (2, 3, 4, 4))
    yield 'max pool', nn.MaxPool2d(3, 2, 1), rng.standard_normal((1, 2, 7, 7))
    yield 'global avg pool', nn.GlobalAvgPool(), \
        rng.standard_normal((2, 3, 4, 5))
    yield 'patch merge', nn.PatchMerge(3, 5), rng.standard_normal((1, 3, 4, 6))
    yield 'channel mlp', nn.ChannelMLP(8, 2), rng.standard_normal((1, 8, 3, 3))
    yield 'residual', nn.Residual(nn.Sequential(nn.Linear(4, 4), nn.GELU())), \
        rng.standard_normal((1, 4, 3, 3))
    yield 'conv-mlp block', model_module.ConvMLPBlock(8, 2), \
        rng.standard_normal((1, 8, 4, 4))


def check_layer_gradients(seed=0):
    """Return ``name -> relative error`` for every layer kind."""
    rng = np.random.default_rng(seed)
    results = {}
    for index, (name, layer, x) in enumerate(_layer_cases(rng)):
        nn.init_params(layer, seed + index)
        for _, owner, local in layer.named_parameters():
            value = owner.param(local)
            value += 0.5 * rng.standard_normal(value.shape)
        results[name] = check_layer(layer, x, seed=seed + index)
    return results


TINY_CONFIG = dict(stage_depths=(1, 1, 1), channels=(8, 16, 32, 64),
                   mlp_ratio=2, conv_stage_blocks=1, num_classes=2)


def check_end_to_end_gradient(seed=0, limit=4):
    """Return the relative error of the loss gradient of a tiny model.

    Every parameter is sampled at ``limit`` entries; the loss is the
    cross-entropy of a two-sample batch in train mode.
    """
    config = model_module.ModelConfig(**TINY_CONFIG)
    model = model_module.build(config, seed=seed, dtype=np.float64)
    model.train()
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 32, 32))
    labels = np.array([0, 1])

    def objective():
        return train.cross_entropy(model.forward(x), labels)[0]

    model.zero_grad()
    _, grad_logits = train.cross_entropy(model.forward(x), labels)
    model.backward(grad_logits)
    analytic, numeric = [], []
    for parameter in model.params:
        picks = _sample(rng, parameter.value.size, limit)
        analytic.append(parameter.grad.reshape(-1)[picks].copy())
        numeric.append(numerical_gradient(objective, parameter.value, picks))
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


def _timed(name, tolerance, function):
    started = time.time()
    error = function()
    result = CheckResult(name=name, error=error, tolerance=tolerance,
                         seconds=time.time() - started)
    log.debug('check finished', name=name, error=error, ok=result.ok)
    return result


def run_selftest(level='fast', seed=0):
    """Run the oracle and gradient suites.

    ``fast`` samples fewer geometries and skips nothing else; ``full`` runs
    the complete oracle sweep.

    :rtype: list[CheckResult]
    """
    if level not in ('fast', 'full'):
        raise errors.ParameterError('level must be fast or full, {0!r} '
                                    'given'.format(level))
    count = 100 if level == 'fast' else 400
    results = [_timed('conv oracle ({0} geometries)'.format(count),
                      ORACLE_TOLERANCE,
                      lambda: check_conv_oracle(count, seed))]
    for name, error in sorted(check_layer_gradients(seed).items()):
        results.append(CheckResult(name='gradient: ' + name, error=error,
                                   tolerance=LAYER_TOLERANCE))
    results.append(_timed('gradient: end to end', MODEL_TOLERANCE,
                          lambda: check_end_to_end_gradient(
                              seed, limit=4 if level == 'fast' else 12)))
    return results


def require(results):
    """Raise when any result is out of tolerance.

    :raises errors.NumericalCheckError: listing failed checks
    """
    failed = [result for result in results if not result.ok]
    if failed:
        raise errors.NumericalCheckError('failed checks: {0}'.format(
            ', '.join('{0} ({1:.2e} > {2:.0e})'.format(
                result.name, result.error, result.tolerance)
                for result in failed)))
    return results
