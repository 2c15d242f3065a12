"""ConvMLP architecture.

Pipeline::

    tokenizer -> conv stage -> (downsample -> Conv-MLP blocks) x 3
              -> global average pool -> linear head

The tokenizer output and the three Conv-MLP stage outputs are the feature
pyramid ``F1..F4`` with strides 4, 8, 16 and 32.
"""

import numpy as np
import structlog

from . import errors
from . import fields
from . import nn
from . import records

log = structlog.get_logger()

REDUCTION = 32
"""Total stride of the backbone; input extents must be multiples of it."""


class ModelConfig(records.Record):
    """Complete architectural description of a ConvMLP model.

    ``tokenizer_channels`` and ``conv_stage_hidden`` are optional: when
    unset they derive from ``C1`` as ``(C1/2, C1/2, C1)`` and ``2 C1``.
    """

    tokenizer = fields.Choice(('conv', 'patch'), default='conv')
    tokenizer_channels = fields.Ints(minimum=1)
    use_conv_stage = fields.Bool(default=True)
    conv_stage_blocks = fields.Int(minimum=1, default=2)
    conv_stage_hidden = fields.Int(minimum=1)
    stage_depths = fields.Ints(arity=3, minimum=1, default=(2, 4, 2))
    channels = fields.Ints(arity=4, minimum=1, default=(64, 128, 256, 512))
    mlp_ratio = fields.Int(minimum=1, default=2)
    num_classes = fields.Int(minimum=1, default=1000)
    use_conv_downsample = fields.Bool(default=True)
    use_dw_conv = fields.Bool(default=True)
    dropout = fields.Float(minimum=0.0, maximum=1.0, default=0.0)

    __view_key__ = (stage_depths, channels, mlp_ratio)
    __value_semantics__ = True

    def resolved_tokenizer_channels(self):
        """Return tokenizer conv widths, deriving them when unset."""
        if self.tokenizer_channels is not None:
            return self.tokenizer_channels
        c1 = self.channels[0]
        return (max(c1 // 2, 1), max(c1 // 2, 1), c1)

    def resolved_conv_stage_hidden(self):
        """Return the 3x3 mid-conv width of the conv stage."""
        if self.conv_stage_hidden is not None:
            return self.conv_stage_hidden
        return 2 * self.channels[0]

    def validate(self):
        """Check cross-field invariants.

        :raises errors.ConfigError: naming the violated invariant
        """
        if self.tokenizer == 'conv':
            widths = self.resolved_tokenizer_channels()
            if widths[-1] != self.channels[0]:
                raise errors.ConfigError(
                    'tokenizer_channels must end at C1={0}, {1} given'.format(
                        self.channels[0], widths[-1]),
                    field='tokenizer_channels')
        elif self.tokenizer_channels is not None:
            raise errors.ConfigError('tokenizer_channels only applies to the '
                                     'conv tokenizer',
                                     field='tokenizer_channels')
        if self.conv_stage_hidden is not None and not self.use_conv_stage:
            raise errors.ConfigError('conv_stage_hidden needs use_conv_stage',
                                     field='conv_stage_hidden')
        return self


_SMALL = dict(stage_depths=(2, 4, 2), channels=(64, 128, 256, 512),
              mlp_ratio=2, conv_stage_blocks=2)

_ABLATION_BASE = dict(_SMALL, conv_stage_hidden=64)

PRESETS = {
    'S': dict(_SMALL),
    'M': dict(stage_depths=(3, 6, 3), channels=(64, 128, 256, 512),
              mlp_ratio=3, conv_stage_blocks=3),
    'L': dict(stage_depths=(4, 8, 3), channels=(96, 192, 384, 768),
              mlp_ratio=3, conv_stage_blocks=3),
    'pure_mlp_baseline': dict(_SMALL, tokenizer='patch',
                              use_conv_stage=False, conv_stage_blocks=3,
                              use_conv_downsample=False, use_dw_conv=False),
    'ablation_A1': dict(_ABLATION_BASE, use_conv_downsample=False,
                        use_dw_conv=False),
    'ablation_A2': dict(_ABLATION_BASE, use_dw_conv=False),
    'ablation_A3': dict(_ABLATION_BASE, use_conv_downsample=False),
    'ablation_A4': dict(_ABLATION_BASE),
    'ablation_A5': dict(_SMALL),
    'tiny': dict(stage_depths=(1, 1, 1), channels=(8, 16, 32, 64),
                 mlp_ratio=2, conv_stage_blocks=1, num_classes=10),
}
PRESETS['ablation_A0'] = PRESETS['pure_mlp_baseline']

PRESET_NAMES = ('S', 'M', 'L', 'pure_mlp_baseline', 'ablation_A0',
                'ablation_A1', 'ablation_A2', 'ablation_A3', 'ablation_A4',
                'ablation_A5', 'tiny')


def preset(name):
    """Return the named configuration.

    :raises KeyError: on unknown names
    :rtype: ModelConfig
    """
    try:
        values = PRESETS[name]
    except KeyError:
        raise KeyError('unknown preset {0!r}, expected one of {1}'.format(
            name, ', '.join(PRESET_NAMES)))
    return ModelConfig(**values)


class FeaturePyramid(records.Record):
    """Stage outputs at strides 4, 8, 16 and 32."""

    f1 = fields.Array(required=True)
    f2 = fields.Array(required=True)
    f3 = fields.Array(required=True)
    f4 = fields.Array(required=True)

    STRIDES = (4, 8, 16, 32)

    def levels(self):
        """Return ``(F1, F2, F3, F4)``."""
        return (self.f1, self.f2, self.f3, self.f4)

    def level(self, stage):
        """Return the map of ``stage`` (1-based)."""
        if stage not in (1, 2, 3, 4):
            raise errors.ParameterError(
                'stage must be 1..4, {0} given'.format(stage))
        return self.levels()[stage - 1]


def conv_bn_relu(in_channels, out_channels, kernel, stride=1, padding=0):
    """Return ``conv (no bias) -> batch norm -> ReLU``."""
    return [nn.Conv2d(in_channels, out_channels, kernel, stride, padding,
                      bias=False),
            nn.BatchNorm2d(out_channels), nn.ReLU()]


class ConvTokenizer(nn.Sequential):
    """Three conv-BN-ReLU blocks (strides 2, 1, 1) then 3x3/2 max pooling."""

    kind = 'tokenizer'

    def __init__(self, widths, in_channels=3):
        """Initializer."""
        layers, names = [], []
        for index, width in enumerate(widths, 1):
            block = conv_bn_relu(in_channels, width, 3,
                                 stride=2 if index == 1 else 1, padding=1)
            layers.extend(block)
            names.extend(['conv{0}'.format(index), 'bn{0}'.format(index),
                          'relu{0}'.format(index)])
            in_channels = width
        layers.append(nn.MaxPool2d(3, 2, 1))
        names.append('pool')
        super(ConvTokenizer, self).__init__(*layers, names=names)


class PatchTokenizer(nn.Sequential):
    """Linear 4x4 stride-4 patch embedding."""

    kind = 'tokenizer'

    def __init__(self, out_channels, in_channels=3, patch=4):
        """Initializer."""
        super(PatchTokenizer, self).__init__(
            nn.Conv2d(in_channels, out_channels, patch, stride=patch),
            names=('proj',))


class ConvStageBlock(nn.Residual):
    """Residual ``1x1 -> 3x3 -> 1x1`` bottleneck with BN and ReLU."""

    kind = 'conv_block'

    def __init__(self, channels, hidden):
        """Initializer."""
        layers = (conv_bn_relu(channels, hidden, 1) +
                  conv_bn_relu(hidden, hidden, 3, padding=1) +
                  conv_bn_relu(hidden, channels, 1))
        names = ['{0}{1}'.format(kind, index)
                 for index in (1, 2, 3) for kind in ('conv', 'bn', 'relu')]
        super(ConvStageBlock, self).__init__(
            nn.Sequential(*layers, names=names))


class ConvMLPBlock(nn.Layer):
    """Channel MLP, optional depthwise 3x3 conv, channel MLP.

    Each sub-layer sits on its own residual branch; the MLPs see
    layer-normalized inputs.
    """

    kind = 'convmlp_block'

    def __init__(self, channels, ratio, use_dw=True, p=0.0):
        """Initializer."""
        super(ConvMLPBlock, self).__init__()
        self.channels = channels
        self.norm1 = self.add_child('norm1', nn.LayerNorm2d(channels))
        self.mlp1 = self.add_child('mlp1', nn.ChannelMLP(channels, ratio, p))
        self.dw = None
        if use_dw:
            self.dw = self.add_child('dw', nn.Conv2d(
                channels, channels, 3, padding=1, groups=channels))
        self.norm2 = self.add_child('norm2', nn.LayerNorm2d(channels))
        self.mlp2 = self.add_child('mlp2', nn.ChannelMLP(channels, ratio, p))

    def forward(self, x):
        """Apply the three residual sub-layers."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise errors.DimensionError(
                'Conv-MLP block expects (N, {0}, H, W), {1} given'.format(
                    self.channels, x.shape))
        x = x + self.mlp1.forward(self.norm1.forward(x))
        if self.dw is not None:
            x = nn.residual(self.dw, x)
        return x + self.mlp2.forward(self.norm2.forward(x))

    def backward(self, grad):
        """Backpropagate through the three residual branches in reverse."""
        grad = grad + self.norm2.backward(self.mlp2.backward(grad))
        if self.dw is not None:
            grad = grad + self.dw.backward(grad)
        return grad + self.norm1.backward(self.mlp1.backward(grad))

    def trace(self, shape, prefix=''):
        """Trace sub-layers; shapes never change."""
        for name, layer in self.children():
            for item in layer.trace(shape, nn._join(prefix, name)):
                yield item


def convmlp_block_forward(block, x, training=False):
    """Run ``block`` on ``x`` in the requested mode."""
    block.train(training)
    return block.forward(x)


def downsampler(in_channels, out_channels, use_conv):
    """Return a stride-2 transition layer ``Cin -> Cout``."""
    if use_conv:
        return nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
    return nn.PatchMerge(in_channels, out_channels)


def downsample_forward(transition, x):
    """Halve the extents of ``x`` with ``transition``.

    :raises errors.GeometryError: on odd extents
    """
    height, width = x.shape[-2:]
    if height % 2 or width % 2:
        raise errors.GeometryError(
            'downsampling needs even extents, {0}x{1} given'.format(height,
                                                                     width))
    return transition.forward(x)


class ConvMLPStage(nn.Sequential):
    """Downsampler followed by Conv-MLP blocks."""

    kind = 'stage'

    def __init__(self, in_channels, out_channels, depth, ratio, use_conv,
                 use_dw, p=0.0):
        """Initializer."""
        blocks = nn.Sequential(*[ConvMLPBlock(out_channels, ratio, use_dw, p)
                                 for _ in range(depth)])
        super(ConvMLPStage, self).__init__(
            downsampler(in_channels, out_channels, use_conv), blocks,
            names=('downsample', 'blocks'))
        self.downsample = self[0]
        self.blocks = self[1]

    def forward(self, x):
        """Downsample then run the blocks."""
        return self.blocks.forward(downsample_forward(self.downsample, x))


class ConvMLP(nn.Sequential):
    """Built model: layer tree, parameter registry and its config."""

    kind = 'convmlp'

    def __init__(self, config):
        """Initializer."""
        config.validate()
        c1 = config.channels[0]
        if config.tokenizer == 'conv':
            tokenizer = ConvTokenizer(config.resolved_tokenizer_channels())
        else:
            tokenizer = PatchTokenizer(c1)
        if config.use_conv_stage:
            stem = nn.Sequential(*[
                ConvStageBlock(c1, config.resolved_conv_stage_hidden())
                for _ in range(config.conv_stage_blocks)])
            stem_name = 'conv_stage'
        else:
            stem = nn.Sequential(*[
                ConvMLPBlock(c1, config.mlp_ratio, config.use_dw_conv,
                             config.dropout)
                for _ in range(config.conv_stage_blocks)])
            stem_name = 'mlp_stage'
        stages = nn.Sequential(*[
            ConvMLPStage(config.channels[index], config.channels[index + 1],
                         config.stage_depths[index], config.mlp_ratio,
                         config.use_conv_downsample, config.use_dw_conv,
                         config.dropout)
            for index in range(3)])
        super(ConvMLP, self).__init__(
            tokenizer, stem, stages, nn.GlobalAvgPool(),
            nn.Linear(config.channels[-1], config.num_classes),
            names=('tokenizer', stem_name, 'stages', 'pool', 'head'))
        self.config = config
        self.tokenizer, self.stem, self.stages, self.pool, self.head = \
            [layer for _, layer in self.children()]
        self.params = None

    def refresh_registry(self):
        """Rebuild the registry after parameter arrays were replaced."""
        self.params = self.registry()
        return self.params

    def zero_grad(self):
        """Zero every gradient accumulator."""
        self.params.zero_grad()

    def state_names(self):
        """Return checkpoint record names: parameters, then buffers."""
        return (self.params.keys() +
                [name for name, _ in self.named_buffers()])

    def state_arrays(self):
        """Return checkpoint record arrays in :py:meth:`state_names` order."""
        return ([parameter.value for parameter in self.params] +
                [value for _, value in self.named_buffers()])

    @staticmethod
    def check_input(x, multiple=REDUCTION):
        """Validate an image batch ``(N, 3, H, W)``."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise errors.DimensionError(
                'expected images of shape (N, 3, H, W), {0} given'.format(
                    x.shape))
        height, width = x.shape[2:]
        if height % multiple or width % multiple:
            raise errors.GeometryError(
                'input extents {0}x{1} must be divisible by {2}'.format(
                    height, width, multiple))

    def tokenizer_forward(self, x):
        """Return ``F``-level tokens at stride 4."""
        self.check_input(x, 4)
        return self.tokenizer.forward(x)

    def conv_stage_forward(self, x):
        """Run the conv stage; resolution is preserved."""
        if not self.config.use_conv_stage:
            raise errors.Error('model has no conv stage')
        return self.stem.forward(x)

    def forward_pyramid(self, x):
        """Return the four stage outputs.

        :rtype: FeaturePyramid
        """
        self.check_input(x)
        levels = [self.stem.forward(self.tokenizer.forward(x))]
        for stage in self.stages:
            levels.append(stage.forward(levels[-1]))
        return FeaturePyramid(f1=levels[0], f2=levels[1], f3=levels[2],
                              f4=levels[3])

    def features(self, x):
        """Return ``F4``, the activation the classifier pools."""
        self.check_input(x)
        return self.stages.forward(self.stem.forward(
            self.tokenizer.forward(x)))

    def forward(self, x):
        """Return class logits ``(N, num_classes)``."""
        return self.head.forward(self.pool.forward(self.features(x)))

    def forward_classify(self, x, training=None):
        """Return logits, optionally switching mode first."""
        if training is not None:
            self.train(training)
        return self.forward(x)


def build(config, seed=0, dtype=np.float32, initialize=True):
    """Build a model deterministically from ``config`` and ``seed``.

    With ``initialize=False`` every parameter stays zero, which keeps
    accounting-only builds cheap.

    :raises errors.ConfigError: when ``config`` breaks an invariant
    :rtype: ConvMLP
    """
    model = ConvMLP(config)
    if np.dtype(dtype) != np.float64:
        model.cast(dtype)
    if initialize:
        nn.init_params(model, seed)
    model.refresh_registry()
    log.debug('model built', params=model.params.total_size(),
              depths=config.stage_depths, channels=config.channels,
              seed=seed)
    return model


def tokenizer_forward(model, x):
    """Module-level form of :py:meth:`ConvMLP.tokenizer_forward`."""
    return model.tokenizer_forward(x)


def conv_stage_forward(model, x):
    """Module-level form of :py:meth:`ConvMLP.conv_stage_forward`."""
    return model.conv_stage_forward(x)


def forward_classify(model, x, training=False):
    """Return logits of ``x`` in the requested mode."""
    return model.forward_classify(x, training)


def forward_pyramid(model, x):
    """Return the feature pyramid of ``x`` in the model's current mode."""
    return model.forward_pyramid(x)

