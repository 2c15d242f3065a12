"""Tensor module.

Dense tensors are plain ``numpy.ndarray`` values; activations use the
``(N, C, H, W)`` layout. Every kernel comes as a forward function and a
``*_backward`` function that takes the upstream gradient together with the
forward inputs, so the kernels hold no state of their own.
"""

import numpy as np
from scipy import special

from . import errors
from . import fields
from . import records

REAL32 = np.dtype(np.float32)
REAL64 = np.dtype(np.float64)

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class ConvGeometry(records.Record):
    """Kernel, stride, zero padding and group count of a 2-D window op."""

    kernel = fields.Ints(arity=2, minimum=1, default=(1, 1))
    stride = fields.Ints(arity=2, minimum=1, default=(1, 1))
    padding = fields.Ints(arity=2, minimum=0, default=(0, 0))
    groups = fields.Int(minimum=1, default=1)

    __value_semantics__ = True

    @classmethod
    def square(cls, kernel, stride=1, padding=0, groups=1):
        """Build geometry with equal height and width settings.

        :rtype: ConvGeometry
        """
        return cls(kernel=(kernel, kernel), stride=(stride, stride),
                   padding=(padding, padding), groups=groups)

    def output_extent(self, height, width):
        """Return output ``(H', W')`` for an input of ``(height, width)``.

        :raises errors.GeometryError: when an output extent is below one
        """
        extents = []
        for size, kernel, stride, pad in zip((height, width), self.kernel,
                                             self.stride, self.padding):
            extent = (size + 2 * pad - kernel) // stride + 1
            if size + 2 * pad < kernel or extent < 1:
                raise errors.GeometryError(
                    'input {0}x{1} with kernel {2}, stride {3}, padding {4} '
                    'gives an empty output'.format(
                        height, width, self.kernel, self.stride,
                        self.padding))
            extents.append(extent)
        return tuple(extents)

    def check_channels(self, in_channels, out_channels):
        """Ensure both channel counts are divisible by the group count."""
        if in_channels % self.groups or out_channels % self.groups:
            raise errors.DimensionError(
                'channels {0}->{1} are not divisible by groups={2}'.format(
                    in_channels, out_channels, self.groups))


def check_tensor(x, rank, name='input'):
    """Ensure ``x`` is a real array of the given rank with extents >= 1.

    :raises errors.DimensionError:
    """
    if not isinstance(x, np.ndarray):
        raise errors.DimensionError(
            '{0} must be an ndarray, {1} given'.format(name, type(x)))
    if x.ndim != rank:
        raise errors.DimensionError('{0} must have rank {1}, shape {2} '
                                    'given'.format(name, rank, x.shape))
    if min(x.shape) < 1:
        raise errors.DimensionError(
            '{0} has an empty extent: {1}'.format(name, x.shape))


def _pad(x, padding, value=0.0):
    ph, pw = padding
    if not ph and not pw:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)),
                  mode='constant', constant_values=value)


def _window_slices(offset, stride, count):
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def im2col(x, geom, fill=0.0):
    """Gather sliding windows into columns.

    :param numpy.ndarray x: ``(N, C, H, W)``
    :param ConvGeometry geom:
    :returns: ``(N, C, kh, kw, H', W')`` array of window values
    """
    n, c, h, w = x.shape
    kh, kw = geom.kernel
    sh, sw = geom.stride
    ho, wo = geom.output_extent(h, w)
    padded = _pad(x, geom.padding, fill)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        rows = _window_slices(i, sh, ho)
        for j in range(kw):
            cols[:, :, i, j] = padded[:, :, rows, _window_slices(j, sw, wo)]
    return cols


def col2im(cols, input_shape, geom):
    """Scatter-add columns back onto an input-shaped gradient.

    Inverse bookkeeping of :py:func:`im2col`; overlapping windows add up.
    """
    n, c, h, w = input_shape
    kh, kw = geom.kernel
    sh, sw = geom.stride
    ph, pw = geom.padding
    ho, wo = cols.shape[-2:]
    padded = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        rows = _window_slices(i, sh, ho)
        for j in range(kw):
            padded[:, :, rows, _window_slices(j, sw, wo)] += cols[:, :, i, j]
    return padded[:, :, ph:ph + h, pw:pw + w]


def _check_conv(x, weight, bias, geom):
    check_tensor(x, 4)
    check_tensor(weight, 4, 'weight')
    n, cin, h, w = x.shape
    cout, cin_group, kh, kw = weight.shape
    geom.check_channels(cin, cout)
    if cin_group * geom.groups != cin:
        raise errors.DimensionError(
            'weight expects {0} input channels per group ({1} groups), input '
            'has {2} channels'.format(cin_group, geom.groups, cin))
    if (kh, kw) != tuple(geom.kernel):
        raise errors.DimensionError('weight kernel {0} does not match '
                                    'geometry kernel {1}'.format(
                                        (kh, kw), geom.kernel))
    if bias is not None and bias.shape != (cout,):
        raise errors.DimensionError('bias must have shape ({0},), {1} '
                                    'given'.format(cout, bias.shape))
    return geom.output_extent(h, w)


def conv2d(x, weight, bias=None, geom=None):
    """Cross-correlate ``x`` with ``weight`` (im2col + batched matmul).

    :param numpy.ndarray x: ``(N, Cin, H, W)``
    :param numpy.ndarray weight: ``(Cout, Cin / groups, kh, kw)``
    :param numpy.ndarray bias: ``(Cout,)`` or None
    :param ConvGeometry geom: defaults to 1x1, stride 1, no padding
    :rtype: numpy.ndarray
    """
    if geom is None:
        geom = ConvGeometry.square(weight.shape[-1])
    ho, wo = _check_conv(x, weight, bias, geom)
    n = x.shape[0]
    cout = weight.shape[0]
    groups = geom.groups
    cols = im2col(x, geom).reshape(n, groups, -1, ho * wo)
    kernels = weight.reshape(groups, cout // groups, -1)
    out = np.matmul(kernels, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out += bias.reshape(1, cout, 1, 1)
    return out


def conv2d_backward(grad, x, weight, geom=None, with_bias=True):
    """Gradients of :py:func:`conv2d`.

    :returns: ``(grad_input, grad_weight, grad_bias)``; ``grad_bias`` is
        None when ``with_bias`` is false
    """
    if geom is None:
        geom = ConvGeometry.square(weight.shape[-1])
    ho, wo = _check_conv(x, weight, None, geom)
    n = x.shape[0]
    cout = weight.shape[0]
    groups = geom.groups
    positions = ho * wo
    if grad.shape != (n, cout, ho, wo):
        raise errors.DimensionError('upstream gradient shape {0} does not '
                                    'match output {1}'.format(
                                        grad.shape, (n, cout, ho, wo)))

    cols = im2col(x, geom).reshape(n, groups, -1, positions)
    grad_groups = grad.reshape(n, groups, cout // groups, positions)
    kernels = weight.reshape(groups, cout // groups, -1)

    batch_grad = grad_groups.transpose(1, 2, 0, 3).reshape(
        groups, cout // groups, n * positions)
    batch_cols = cols.transpose(1, 0, 3, 2).reshape(
        groups, n * positions, -1)
    grad_weight = np.matmul(batch_grad, batch_cols).reshape(weight.shape)

    grad_cols = np.matmul(kernels.transpose(0, 2, 1), grad_groups)
    kh, kw = geom.kernel
    grad_cols = grad_cols.reshape(n, x.shape[1], kh, kw, ho, wo)
    grad_input = col2im(grad_cols, x.shape, geom)

    grad_bias = grad.sum(axis=(0, 2, 3)) if with_bias else None
    return grad_input, grad_weight, grad_bias


def conv2d_reference(x, weight, bias=None, geom=None):
    """Direct nested-loop convolution, the oracle for :py:func:`conv2d`."""
    if geom is None:
        geom = ConvGeometry.square(weight.shape[-1])
    ho, wo = _check_conv(x, weight, bias, geom)
    n, cin, h, w = x.shape
    cout, cin_group, kh, kw = weight.shape
    sh, sw = geom.stride
    ph, pw = geom.padding
    cout_group = cout // geom.groups
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for b in range(n):
        for o in range(cout):
            first = (o // cout_group) * cin_group
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for c in range(cin_group):
                        for i in range(kh):
                            iy = oy * sh + i - ph
                            if iy < 0 or iy >= h:
                                continue
                            for j in range(kw):
                                ix = ox * sw + j - pw
                                if 0 <= ix < w:
                                    acc += (x[b, first + c, iy, ix] *
                                            weight[o, c, i, j])
                    out[b, o, oy, ox] = acc
    if bias is not None:
        out += bias.reshape(1, cout, 1, 1)
    return out


def linear(x, weight, bias=None):
    """Affine map over the last axis.

    :param numpy.ndarray x: ``(..., Cin)``
    :param numpy.ndarray weight: ``(Cout, Cin)``
    :param numpy.ndarray bias: ``(Cout,)`` or None
    """
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise errors.DimensionError(
            'linear expects last axis {0}, input shape {1} given'.format(
                weight.shape[1] if weight.ndim == 2 else weight.shape,
                x.shape))
    out = np.matmul(x, weight.T)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise errors.DimensionError('bias must have shape ({0},), {1} '
                                        'given'.format(weight.shape[0],
                                                       bias.shape))
        out += bias
    return out


def linear_backward(grad, x, weight, with_bias=True):
    """Gradients of :py:func:`linear`.

    :returns: ``(grad_input, grad_weight, grad_bias)``
    """
    cout, cin = weight.shape
    flat_grad = grad.reshape(-1, cout)
    grad_weight = np.matmul(flat_grad.T, x.reshape(-1, cin))
    grad_bias = flat_grad.sum(axis=0) if with_bias else None
    return np.matmul(grad, weight), grad_weight, grad_bias


def _channel_shape(x):
    return (1, -1) + (1,) * (x.ndim - 2)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the channel axis at every spatial position.

    :param numpy.ndarray x: ``(N, C, ...)``
    """
    if eps <= 0:
        raise errors.ParameterError('eps must be positive, {0} '
                                    'given'.format(eps))
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise errors.DimensionError(
            'norm parameters must have shape ({0},)'.format(x.shape[1]))
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True)
                            + eps)
    shape = _channel_shape(x)
    return centered * inv_std * gamma.reshape(shape) + beta.reshape(shape)


def layer_norm_backward(grad, x, gamma, eps=1e-5):
    """Gradients of :py:func:`layer_norm`.

    :returns: ``(grad_input, grad_gamma, grad_beta)``
    """
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True)
                            + eps)
    normalized = centered * inv_std
    reduce_axes = (0,) + tuple(range(2, x.ndim))
    grad_gamma = (grad * normalized).sum(axis=reduce_axes)
    grad_beta = grad.sum(axis=reduce_axes)

    grad_normalized = grad * gamma.reshape(_channel_shape(x))
    grad_input = inv_std * (
        grad_normalized
        - grad_normalized.mean(axis=1, keepdims=True)
        - normalized * (grad_normalized * normalized).mean(axis=1,
                                                           keepdims=True))
    return grad_input, grad_gamma, grad_beta


def _batch_statistics(x):
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count == 1:
        raise errors.ParameterError(
            'batch norm needs more than one value per channel in train '
            'mode, input shape {0} given'.format(x.shape))
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return count, mean, var


def batch_norm2d(x, gamma, beta, running_mean, running_var, eps=1e-5,
                 momentum=0.1, training=True):
    """Per-channel batch normalization.

    In train mode the batch statistics normalize ``x`` and the running
    statistics are updated in place (unbiased variance). In eval mode the
    running statistics are used and nothing is mutated.
    """
    check_tensor(x, 4)
    channels = x.shape[1]
    for name, value in (('gamma', gamma), ('beta', beta),
                        ('running_mean', running_mean),
                        ('running_var', running_var)):
        if value.shape != (channels,):
            raise errors.DimensionError('{0} must have shape ({1},), {2} '
                                        'given'.format(name, channels,
                                                       value.shape))
    if not 0.0 < momentum <= 1.0:
        raise errors.ParameterError('momentum must be in (0, 1], {0} '
                                    'given'.format(momentum))
    if training:
        count, mean, var = _batch_statistics(x)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean, var = running_mean, running_var
    shape = (1, channels, 1, 1)
    scale = (gamma / np.sqrt(var + eps)).astype(x.dtype)
    shift = (beta - mean * scale).astype(x.dtype)
    return x * scale.reshape(shape) + shift.reshape(shape)


def batch_norm2d_backward(grad, x, gamma, running_mean=None,
                          running_var=None, eps=1e-5, training=True):
    """Gradients of :py:func:`batch_norm2d`.

    Eval mode needs the running statistics the forward pass used.

    :returns: ``(grad_input, grad_gamma, grad_beta)``
    """
    shape = (1, x.shape[1], 1, 1)
    if training:
        _, mean, var = _batch_statistics(x)
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).reshape(shape)
    normalized = (x - mean.reshape(shape)) * inv_std
    grad_gamma = (grad * normalized).sum(axis=(0, 2, 3))
    grad_beta = grad.sum(axis=(0, 2, 3))
    grad_normalized = grad * gamma.reshape(shape)
    if training:
        grad_input = inv_std * (
            grad_normalized
            - grad_normalized.mean(axis=(0, 2, 3), keepdims=True)
            - normalized * (grad_normalized * normalized).mean(
                axis=(0, 2, 3), keepdims=True))
    else:
        grad_input = grad_normalized * inv_std
    return grad_input.astype(x.dtype), grad_gamma, grad_beta


def gelu(x):
    """Exact Gaussian error linear unit ``x * Phi(x)``."""
    return 0.5 * x * (1.0 + special.erf(x / _SQRT2))


def gelu_backward(grad, x):
    """Gradient of :py:func:`gelu`."""
    cdf = 0.5 * (1.0 + special.erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return grad * (cdf + x * pdf)


def relu(x):
    """Rectified linear unit."""
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad, x):
    """Gradient of :py:func:`relu`; zero at the kink."""
    return grad * (x > 0)


def _pool_windows(x, geom):
    check_tensor(x, 4)
    if geom.groups != 1:
        raise errors.GeometryError('pooling does not take groups')
    cols = im2col(x, geom, fill=-np.inf)
    n, c, kh, kw, ho, wo = cols.shape
    return cols.reshape(n, c, kh * kw, ho, wo)


def max_pool2d(x, geom):
    """Window maximum with ``-inf`` padding."""
    return _pool_windows(x, geom).max(axis=2)


def max_pool2d_backward(grad, x, geom):
    """Route ``grad`` to the first row-major argmax of every window."""
    windows = _pool_windows(x, geom)
    winners = windows.argmax(axis=2)
    n, c, area, ho, wo = windows.shape
    routed = np.zeros((n, c, area, ho, wo), dtype=grad.dtype)
    np.put_along_axis(routed, winners[:, :, None], grad[:, :, None], axis=2)
    kh, kw = geom.kernel
    return col2im(routed.reshape(n, c, kh, kw, ho, wo), x.shape, geom)


def global_avg_pool(x):
    """Average over all spatial positions: ``(N, C, H, W) -> (N, C)``."""
    check_tensor(x, 4)
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad, x):
    """Spread ``grad`` evenly over the ``H * W`` positions."""
    n, c, h, w = x.shape
    spread = grad.reshape(n, c, 1, 1) / float(h * w)
    return np.broadcast_to(spread, x.shape).astype(grad.dtype)


_MERGE_OFFSETS = ((0, 0), (1, 0), (0, 1), (1, 1))


def space_to_depth(x):
    """Concatenate every ``2x2`` neighbourhood along the channel axis.

    Offset order follows patch merging: ``(0,0), (1,0), (0,1), (1,1)``.
    """
    check_tensor(x, 4)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise errors.GeometryError(
            'patch merging needs even extents, {0}x{1} given'.format(h, w))
    return np.concatenate([x[:, :, dy::2, dx::2]
                           for dy, dx in _MERGE_OFFSETS], axis=1)


def space_to_depth_backward(grad, x):
    """Gradient of :py:func:`space_to_depth`."""
    c = x.shape[1]
    grad_input = np.empty_like(x, dtype=grad.dtype)
    for index, (dy, dx) in enumerate(_MERGE_OFFSETS):
        grad_input[:, :, dy::2, dx::2] = grad[:, index * c:(index + 1) * c]
    return grad_input
