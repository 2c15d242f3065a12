"""Layers module.

A :py:class:`Layer` owns named parameters, one gradient accumulator per
parameter, optional buffers (batch-norm running statistics) and child layers.
``forward`` caches what ``backward`` needs; ``backward`` accumulates
parameter gradients in place and returns the input gradient.

Shapes used by :py:meth:`Layer.trace`, :py:meth:`Layer.output_shape` and
:py:meth:`Layer.macs` are per sample, without the batch axis.
"""

import collections as std_collections

import numpy as np
import six
from scipy import stats

from . import collections
from . import errors
from . import fields
from . import records
from . import tensor

ROLES = ('weight', 'bias', 'scale', 'shift')
"""Parameter roles; only weights take part in weight decay."""

INIT_STD = 0.02


class ParamRegistry(collections.Collection):
    """Ordered registry of learnable parameters."""

    def zero_grad(self):
        """Reset every gradient accumulator to zero."""
        for parameter in self:
            parameter.grad[...] = 0

    def total_size(self):
        """Return the number of learnable scalars.

        :rtype: int
        """
        return sum(int(parameter.value.size) for parameter in self)

    def values(self):
        """Return ``name -> value`` in registry order."""
        return std_collections.OrderedDict(
            (parameter.name, parameter.value) for parameter in self)


class Parameter(records.Record):
    """Registry entry; value and grad are shared with the owning layer."""

    Collection = ParamRegistry

    name = fields.String(required=True)
    value = fields.Array(required=True)
    grad = fields.Array(required=True)
    role = fields.Choice(ROLES, default='weight')
    decay = fields.Bool(default=False)

    __view_key__ = (name, role)


class Layer(object):
    """Base layer."""

    kind = 'layer'

    def __init__(self):
        """Initializer."""
        self.training = True
        self._params = std_collections.OrderedDict()
        self._grads = std_collections.OrderedDict()
        self._roles = {}
        self._buffers = std_collections.OrderedDict()
        self._children = std_collections.OrderedDict()
        self._cache = None

    def __call__(self, x):
        """Run :py:meth:`forward`."""
        return self.forward(x)

    def add_param(self, name, shape, role):
        """Create a zero parameter and its gradient accumulator.

        :rtype: numpy.ndarray
        """
        if role not in ROLES:
            raise errors.ParameterError('unknown role {0!r}'.format(role))
        self._params[name] = np.zeros(shape)
        self._grads[name] = np.zeros(shape)
        self._roles[name] = role
        return self._params[name]

    def add_buffer(self, name, value):
        """Register non-learnable state such as running statistics."""
        self._buffers[name] = np.asarray(value, dtype=np.float64)
        return self._buffers[name]

    def add_child(self, name, layer):
        """Register a child layer under ``name``."""
        self._children[str(name)] = layer
        return layer

    def param(self, name):
        """Return a local parameter array."""
        return self._params[name]

    def grad(self, name):
        """Return a local gradient accumulator."""
        return self._grads[name]

    def buffer(self, name):
        """Return a local buffer array."""
        return self._buffers[name]

    def children(self):
        """Return ``(name, layer)`` pairs of direct children."""
        return list(six.iteritems(self._children))

    def walk(self, prefix=''):
        """Yield ``(qualified_name, layer)`` for this layer and descendants."""
        yield prefix, self
        for name, child in six.iteritems(self._children):
            for item in child.walk(_join(prefix, name)):
                yield item

    def named_parameters(self, prefix=''):
        """Yield ``(qualified_name, layer, local_name)`` in build order."""
        for qualified, layer in self.walk(prefix):
            for local in layer._params:
                yield _join(qualified, local), layer, local

    def named_buffers(self, prefix=''):
        """Yield ``(qualified_name, array)`` in build order."""
        for qualified, layer in self.walk(prefix):
            for local, value in six.iteritems(layer._buffers):
                yield _join(qualified, local), value

    def registry(self, prefix=''):
        """Build the parameter registry of this layer tree.

        :raises errors.ConsistencyError: on repeated names or arrays
        :rtype: ParamRegistry
        """
        entries, seen_names, seen_arrays = [], set(), set()
        for name, layer, local in self.named_parameters(prefix):
            value = layer._params[local]
            if name in seen_names or id(value) in seen_arrays:
                raise errors.ConsistencyError(
                    'parameter {0} is reachable twice'.format(name))
            seen_names.add(name)
            seen_arrays.add(id(value))
            role = layer._roles[local]
            entries.append(Parameter(name=name, value=value,
                                     grad=layer._grads[local], role=role,
                                     decay=role == 'weight'))
        return Parameter.Collection(entries)

    def cast(self, dtype):
        """Convert parameters, gradients and buffers to ``dtype``."""
        for _, layer in self.walk():
            for store in (layer._params, layer._grads, layer._buffers):
                for key in list(store):
                    store[key] = store[key].astype(dtype)
        return self

    def train(self, mode=True):
        """Switch this layer tree to train (or eval) mode."""
        for _, layer in self.walk():
            layer.training = bool(mode)
        return self

    def eval(self):
        """Switch this layer tree to eval mode."""
        return self.train(False)

    def forward(self, x):
        """Compute the layer output."""
        raise NotImplementedError()

    def backward(self, grad):
        """Accumulate parameter gradients and return the input gradient."""
        raise NotImplementedError()

    def output_shape(self, shape):
        """Return the per-sample output shape for a per-sample input shape."""
        return tuple(shape)

    def macs(self, shape):
        """Return multiply-accumulates per sample for an input ``shape``."""
        return 0

    def own_param_count(self):
        """Return the number of scalars in this layer's own parameters."""
        return sum(int(value.size) for value in six.itervalues(self._params))

    def trace(self, shape, prefix=''):
        """Yield ``(name, layer, in_shape, out_shape)`` for leaf layers."""
        yield prefix, self, tuple(shape), self.output_shape(shape)

    def _saved(self):
        if self._cache is None:
            raise errors.Error('{0}.backward called before forward'.format(
                self.__class__.__name__))
        return self._cache


def _join(prefix, name):
    return '.'.join((prefix, name)) if prefix else name


class Conv2d(Layer):
    """2-D convolution; ``groups == channels`` gives a depthwise conv."""

    kind = 'conv'

    def __init__(self, in_channels, out_channels, kernel, stride=1,
                 padding=0, groups=1, bias=True):
        """Initializer."""
        super(Conv2d, self).__init__()
        self.geom = tensor.ConvGeometry.square(kernel, stride, padding,
                                               groups)
        self.geom.check_channels(in_channels, out_channels)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.add_param('weight', (out_channels, in_channels // groups,
                                  kernel, kernel), 'weight')
        self.with_bias = bias
        if bias:
            self.add_param('bias', (out_channels,), 'bias')

    def forward(self, x):
        """Convolve."""
        self._cache = x
        return tensor.conv2d(x, self._params['weight'],
                             self._params.get('bias'), self.geom)

    def backward(self, grad):
        """Backpropagate through the convolution."""
        x = self._saved()
        grad_input, grad_weight, grad_bias = tensor.conv2d_backward(
            grad, x, self._params['weight'], self.geom, self.with_bias)
        self._grads['weight'] += grad_weight
        if self.with_bias:
            self._grads['bias'] += grad_bias
        return grad_input

    def output_shape(self, shape):
        """Return ``(Cout, H', W')``."""
        channels, height, width = shape
        if channels != self.in_channels:
            raise errors.DimensionError('conv expects {0} channels, {1} '
                                        'given'.format(self.in_channels,
                                                       channels))
        return (self.out_channels,) + self.geom.output_extent(height, width)

    def macs(self, shape):
        """Return ``Cout * Cin/groups * kh * kw * H' * W'``."""
        _, height, width = self.output_shape(shape)
        kh, kw = self.geom.kernel
        return (self.out_channels * (self.in_channels // self.geom.groups) *
                kh * kw * height * width)


class BatchNorm2d(Layer):
    """Batch normalization over ``(N, H, W)`` per channel."""

    kind = 'batchnorm'

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        """Initializer."""
        super(BatchNorm2d, self).__init__()
        self.eps = eps
        self.momentum = momentum
        self.add_param('weight', (channels,), 'scale')
        self.add_param('bias', (channels,), 'shift')
        self.add_buffer('running_mean', np.zeros(channels))
        self.add_buffer('running_var', np.ones(channels))

    def forward(self, x):
        """Normalize with batch (train) or running (eval) statistics."""
        self._cache = (x, self.training)
        return tensor.batch_norm2d(
            x, self._params['weight'], self._params['bias'],
            self._buffers['running_mean'], self._buffers['running_var'],
            self.eps, self.momentum, self.training)

    def backward(self, grad):
        """Backpropagate in the mode the forward pass ran in."""
        x, training = self._saved()
        grad_input, grad_gamma, grad_beta = tensor.batch_norm2d_backward(
            grad, x, self._params['weight'], self._buffers['running_mean'],
            self._buffers['running_var'], self.eps, training)
        self._grads['weight'] += grad_gamma
        self._grads['bias'] += grad_beta
        return grad_input


class LayerNorm2d(Layer):
    """Layer normalization over the channel axis at every position."""

    kind = 'layernorm'

    def __init__(self, channels, eps=1e-5):
        """Initializer."""
        super(LayerNorm2d, self).__init__()
        self.eps = eps
        self.add_param('weight', (channels,), 'scale')
        self.add_param('bias', (channels,), 'shift')

    def forward(self, x):
        """Normalize."""
        self._cache = x
        return tensor.layer_norm(x, self._params['weight'],
                                 self._params['bias'], self.eps)

    def backward(self, grad):
        """Backpropagate."""
        grad_input, grad_gamma, grad_beta = tensor.layer_norm_backward(
            grad, self._saved(), self._params['weight'], self.eps)
        self._grads['weight'] += grad_gamma
        self._grads['bias'] += grad_beta
        return grad_input


class Linear(Layer):
    """Affine map over channels.

    Rank-4 inputs are transformed at every ``(n, h, w)`` position; rank-2
    inputs over their last axis.
    """

    kind = 'linear'

    def __init__(self, in_features, out_features, bias=True):
        """Initializer."""
        super(Linear, self).__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.with_bias = bias
        self.add_param('weight', (out_features, in_features), 'weight')
        if bias:
            self.add_param('bias', (out_features,), 'bias')

    def forward(self, x):
        """Apply the affine map."""
        if x.ndim == 4:
            x = np.moveaxis(x, 1, -1)
        elif x.ndim != 2:
            raise errors.DimensionError(
                'linear takes rank 2 or 4 input, shape {0} given'.format(
                    x.shape))
        self._cache = x
        out = tensor.linear(x, self._params['weight'],
                            self._params.get('bias'))
        return np.ascontiguousarray(np.moveaxis(out, -1, 1)) \
            if out.ndim == 4 else out

    def backward(self, grad):
        """Backpropagate."""
        x = self._saved()
        if grad.ndim == 4:
            grad = np.moveaxis(grad, 1, -1)
        grad_input, grad_weight, grad_bias = tensor.linear_backward(
            grad, x, self._params['weight'], self.with_bias)
        self._grads['weight'] += grad_weight
        if self.with_bias:
            self._grads['bias'] += grad_bias
        if grad_input.ndim == 4:
            grad_input = np.ascontiguousarray(np.moveaxis(grad_input, -1, 1))
        return grad_input

    def output_shape(self, shape):
        """Replace the channel extent."""
        if shape[0] != self.in_features:
            raise errors.DimensionError('linear expects {0} channels, {1} '
                                        'given'.format(self.in_features,
                                                       shape[0]))
        return (self.out_features,) + tuple(shape[1:])

    def macs(self, shape):
        """Return ``Cin * Cout * positions``."""
        positions = int(np.prod(shape[1:], dtype=np.int64)) \
            if len(shape) > 1 else 1
        return self.in_features * self.out_features * positions


class ReLU(Layer):
    """Rectified linear unit."""

    kind = 'relu'

    def forward(self, x):
        """Apply."""
        self._cache = x
        return tensor.relu(x)

    def backward(self, grad):
        """Backpropagate."""
        return tensor.relu_backward(grad, self._saved())


class GELU(Layer):
    """Exact GELU."""

    kind = 'gelu'

    def forward(self, x):
        """Apply."""
        self._cache = x
        return tensor.gelu(x)

    def backward(self, grad):
        """Backpropagate."""
        return tensor.gelu_backward(grad, self._saved())


class MaxPool2d(Layer):
    """Window maximum."""

    kind = 'maxpool'

    def __init__(self, kernel, stride, padding=0):
        """Initializer."""
        super(MaxPool2d, self).__init__()
        self.geom = tensor.ConvGeometry.square(kernel, stride, padding)

    def forward(self, x):
        """Apply."""
        self._cache = x
        return tensor.max_pool2d(x, self.geom)

    def backward(self, grad):
        """Backpropagate."""
        return tensor.max_pool2d_backward(grad, self._saved(), self.geom)

    def output_shape(self, shape):
        """Return pooled shape."""
        return (shape[0],) + self.geom.output_extent(shape[1], shape[2])


class GlobalAvgPool(Layer):
    """Spatial mean: ``(N, C, H, W) -> (N, C)``."""

    kind = 'avgpool'

    def forward(self, x):
        """Apply."""
        self._cache = x
        return tensor.global_avg_pool(x)

    def backward(self, grad):
        """Backpropagate."""
        return tensor.global_avg_pool_backward(grad, self._saved())

    def output_shape(self, shape):
        """Drop the spatial axes."""
        return (shape[0],)


def dropout(x, p, training, rng):
    """Inverted dropout.

    :returns: ``(output, mask)``; ``mask`` is None when nothing is dropped
    :raises errors.ParameterError: unless ``0 <= p < 1``
    """
    if not 0.0 <= p < 1.0:
        raise errors.ParameterError(
            'dropout probability must be in [0, 1), {0} given'.format(p))
    if not training or p == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * mask, mask


class Dropout(Layer):
    """Inverted dropout with its own random stream."""

    kind = 'dropout'

    def __init__(self, p=0.0, seed=0):
        """Initializer."""
        super(Dropout, self).__init__()
        if not 0.0 <= p < 1.0:
            raise errors.ParameterError(
                'dropout probability must be in [0, 1), {0} given'.format(p))
        self.p = p
        self.reseed(seed)

    def reseed(self, seed):
        """Restart the random stream."""
        self.rng = np.random.default_rng(seed)

    def forward(self, x):
        """Apply."""
        out, mask = dropout(x, self.p, self.training, self.rng)
        self._cache = (mask,)
        return out

    def backward(self, grad):
        """Backpropagate through the stored mask."""
        mask, = self._saved()
        return grad if mask is None else grad * mask


class Sequential(Layer):
    """Children applied in order."""

    kind = 'sequential'

    def __init__(self, *layers, **named):
        """Initializer.

        Positional layers are named ``0, 1, ...``; pass ``names`` to choose.
        """
        super(Sequential, self).__init__()
        names = named.pop('names', None) or [str(index) for index in
                                              range(len(layers))]
        if named:
            raise TypeError('unexpected arguments {0}'.format(sorted(named)))
        for name, layer in zip(names, layers):
            self.add_child(name, layer)

    def __len__(self):
        """Return number of children."""
        return len(self._children)

    def __getitem__(self, index):
        """Return the child at ``index``."""
        return list(six.itervalues(self._children))[index]

    def forward(self, x):
        """Apply children in order."""
        for layer in six.itervalues(self._children):
            x = layer.forward(x)
        return x

    def backward(self, grad):
        """Backpropagate in reverse order."""
        for layer in reversed(list(six.itervalues(self._children))):
            grad = layer.backward(grad)
        return grad

    def output_shape(self, shape):
        """Chain child shapes."""
        for layer in six.itervalues(self._children):
            shape = layer.output_shape(shape)
        return tuple(shape)

    def trace(self, shape, prefix=''):
        """Trace every child in order."""
        for name, layer in six.iteritems(self._children):
            for item in layer.trace(shape, _join(prefix, name)):
                yield item
            shape = layer.output_shape(shape)


def residual(sublayer, x):
    """Return ``x + sublayer(x)``.

    :raises errors.DimensionError: when the sub-layer changes the shape
    """
    out = sublayer.forward(x)
    if out.shape != x.shape:
        raise errors.DimensionError(
            'residual branch changed shape {0} -> {1}'.format(x.shape,
                                                              out.shape))
    return x + out


class Residual(Layer):
    """Identity shortcut around a body layer."""

    kind = 'residual'

    def __init__(self, body):
        """Initializer."""
        super(Residual, self).__init__()
        self.body = self.add_child('body', body)

    def forward(self, x):
        """Apply ``x + body(x)``."""
        return residual(self.body, x)

    def backward(self, grad):
        """Sum the identity and body gradients."""
        return grad + self.body.backward(grad)

    def output_shape(self, shape):
        """Keep the input shape."""
        if tuple(self.body.output_shape(shape)) != tuple(shape):
            raise errors.DimensionError('residual branch changes shape '
                                        '{0}'.format(shape))
        return tuple(shape)

    def trace(self, shape, prefix=''):
        """Trace the body."""
        return self.body.trace(shape, _join(prefix, 'body'))


class ChannelMLP(Sequential):
    """``fc2(dropout(gelu(fc1(x))))`` applied at every position."""

    kind = 'channel_mlp'

    def __init__(self, channels, ratio, p=0.0):
        """Initializer."""
        hidden = int(channels * ratio)
        super(ChannelMLP, self).__init__(
            Linear(channels, hidden), GELU(), Dropout(p), Linear(hidden,
                                                                 channels),
            names=('fc1', 'act', 'drop', 'fc2'))
        self.channels = channels
        self.hidden = hidden

    def forward(self, x):
        """Apply, checking the channel count first."""
        if x.shape[1] != self.channels:
            raise errors.DimensionError('channel MLP expects {0} channels, '
                                        '{1} given'.format(self.channels,
                                                           x.shape[1]))
        return super(ChannelMLP, self).forward(x)


def channel_mlp_forward(mlp, x, training=False):
    """Run ``mlp`` on ``x`` in the requested mode."""
    mlp.train(training)
    return mlp.forward(x)


class PatchMerge(Layer):
    """Concatenate ``2x2`` neighbourhoods then project ``4 Cin -> Cout``."""

    kind = 'patch_merge'

    def __init__(self, in_channels, out_channels):
        """Initializer."""
        super(PatchMerge, self).__init__()
        self.reduction = self.add_child(
            'reduction', Linear(4 * in_channels, out_channels))

    def forward(self, x):
        """Merge and project."""
        self._cache = x
        return self.reduction.forward(tensor.space_to_depth(x))

    def backward(self, grad):
        """Backpropagate."""
        return tensor.space_to_depth_backward(
            self.reduction.backward(grad), self._saved())

    def _merged_shape(self, shape):
        channels, height, width = shape
        if height % 2 or width % 2:
            raise errors.GeometryError('patch merging needs even extents, '
                                       '{0}x{1} given'.format(height, width))
        return (4 * channels, height // 2, width // 2)

    def output_shape(self, shape):
        """Halve the extents and project channels."""
        return self.reduction.output_shape(self._merged_shape(shape))

    def trace(self, shape, prefix=''):
        """Trace the projection on the merged shape."""
        return self.reduction.trace(self._merged_shape(shape),
                                    _join(prefix, 'reduction'))


def init_params(layer, seed, scheme='trunc_normal'):
    """Initialize every parameter of ``layer`` in registry order.

    Weights follow a normal distribution truncated at two standard
    deviations (std 0.02) under ``trunc_normal`` and are zero under
    ``zeros``; biases and shifts are zero; scales are one. Dropout streams
    are reseeded from ``seed`` and their position.
    """
    if scheme not in ('trunc_normal', 'zeros'):
        raise errors.ParameterError('unknown init scheme {0!r}'.format(scheme))
    rng = np.random.default_rng(seed)
    for _, owner, local in layer.named_parameters():
        value = owner.param(local)
        role = owner._roles[local]
        if role == 'weight' and scheme == 'trunc_normal':
            value[...] = stats.truncnorm.rvs(-2.0, 2.0, scale=INIT_STD,
                                             size=value.shape,
                                             random_state=rng)
        elif role == 'scale':
            value[...] = 1.0
        else:
            value[...] = 0.0
        owner.grad(local)[...] = 0.0
    for index, (_, owner) in enumerate(
            item for item in layer.walk() if isinstance(item[1], Dropout)):
        owner.reseed([seed, index])
