"""Parameter and MAC accounting, summaries and feature-map export.

One MAC is one multiply-accumulate. Normalization, activation, pooling and
residual additions cost nothing; patch merging costs its projection.
"""

import csv
import io
import os

import numpy as np
import structlog

from . import errors
from . import fields
from . import model as model_module
from . import persist
from . import records

log = structlog.get_logger()

PARAM_TOLERANCE = 0.03
MAC_TOLERANCE = 0.05
DELTA_TOLERANCE = 0.20

PUBLISHED_TARGETS = {
    2: {
        'pure_mlp_baseline': (7.88, 1.47),
        'ablation_A1': (7.89, 1.59),
        'ablation_A2': (8.71, 1.65),
        'ablation_A3': (7.91, 1.59),
        'ablation_A4': (8.73, 1.65),
        'ablation_A5': (9.02, 2.40),
    },
    3: {
        'S': (9.0, 2.4),
        'M': (17.4, 3.9),
        'L': (42.7, 9.9),
    },
}
"""Published ``(params in millions, GMACs at 224x224)`` per table."""

UNENFORCED = frozenset([(2, 'pure_mlp_baseline', 'gmacs')])
"""Targets reported but never failed; see the calibration ledger."""

ABLATION_DELTAS = (
    ('depthwise conv', 'ablation_A3', 'ablation_A1', 0.02),
    ('conv downsampling', 'ablation_A2', 'ablation_A1', 0.82),
)
"""``(label, with, without, published params delta in millions)``."""


class CostRow(records.Record):
    """Cost of one leaf layer."""

    name = fields.String(required=True)
    kind = fields.String(required=True)
    out_shape = fields.Ints(minimum=1)
    params = fields.Int(minimum=0, default=0)
    macs = fields.Int(minimum=0, default=0)

    __view_key__ = (name, params, macs)


class CostReport(records.Record):
    """Per-layer rows plus totals at one input resolution."""

    rows = fields.Collection(CostRow, default=list)
    resolution = fields.Ints(arity=2, minimum=1)

    CSV_HEADER = ('name', 'kind', 'out_shape', 'params', 'macs')

    @property
    def total_params(self):
        """Sum of row parameter counts."""
        return self.rows.sum_of('params')

    @property
    def total_macs(self):
        """Sum of row MACs."""
        return self.rows.sum_of('macs')

    @property
    def gmacs(self):
        """Total MACs in units of 1e9."""
        return self.total_macs / 1e9

    def to_csv(self):
        """Return rows as CSV text with a header line."""
        stream = io.StringIO()
        writer = csv.writer(stream, lineterminator='\n')
        writer.writerow(self.CSV_HEADER)
        for row in self.rows:
            shape = 'x'.join(str(extent) for extent in row.out_shape or ())
            writer.writerow((row.name, row.kind, shape, row.params, row.macs))
        return stream.getvalue()


def _check_total(report, model):
    expected = model.params.total_size()
    if report.total_params != expected:
        raise errors.ConsistencyError(
            'layer rows hold {0} parameters, registry holds {1}'.format(
                report.total_params, expected))
    return report


def count_params(model):
    """Return exact per-layer parameter counts of a built model.

    :raises errors.ConsistencyError: if rows and registry disagree
    :rtype: CostReport
    """
    rows = [CostRow(name=name, kind=layer.kind,
                    params=layer.own_param_count())
            for name, layer in model.walk() if not layer.children()]
    return _check_total(CostReport(rows=rows), model)


def trace_costs(model, height, width):
    """Return per-layer shapes, parameters and MACs at ``height x width``.

    :raises errors.GeometryError: unless both extents divide by 32
    :rtype: CostReport
    """
    if height % model_module.REDUCTION or width % model_module.REDUCTION:
        raise errors.GeometryError(
            'input extents {0}x{1} must be divisible by {2}'.format(
                height, width, model_module.REDUCTION))
    rows = [CostRow(name=name, kind=layer.kind, out_shape=out_shape,
                    params=layer.own_param_count(),
                    macs=layer.macs(in_shape))
            for name, layer, in_shape, out_shape in
            model.trace((3, height, width))]
    return _check_total(CostReport(rows=rows, resolution=(height, width)),
                        model)


def count_macs(config, height, width):
    """Return the cost report of ``config`` at ``height x width``.

    The model is built with zero parameters; nothing is initialized.
    """
    model = model_module.build(config, dtype=np.float64, initialize=False)
    return trace_costs(model, height, width)


_STAGE_LABELS = (('tokenizer', 'tokenizer'), ('conv_stage', 'conv stage'),
                 ('mlp_stage', 'mlp stage'), ('stages.0', 'stage 1'),
                 ('stages.1', 'stage 2'), ('stages.2', 'stage 3'),
                 ('pool', 'head'), ('head', 'head'))


def _section(name):
    for prefix, label in _STAGE_LABELS:
        if name == prefix or name.startswith(prefix + '.'):
            return label
    return name


def _millions(count):
    return '{0:,} ({1:.2f}M)'.format(count, count / 1e6)


def summarize(model, height, width):
    """Return a per-stage text table with exact totals."""
    report = trace_costs(model, height, width)
    sections = []
    totals = {}
    for row in report.rows:
        label = _section(row.name)
        if label not in totals:
            sections.append(label)
            totals[label] = [0, 0, ()]
        entry = totals[label]
        entry[0] += row.params
        entry[1] += row.macs
        entry[2] = row.out_shape
    config = model.config
    blocks = {'tokenizer': '-', 'head': '-',
              'conv stage': config.conv_stage_blocks,
              'mlp stage': config.conv_stage_blocks}
    for index in range(3):
        blocks['stage {0}'.format(index + 1)] = config.stage_depths[index]

    template = '{0:<12}{1:>7}{2:>10}  {3:<14}{4:>14}{5:>16}'
    lines = [template.format('stage', 'blocks', 'channels', 'output',
                             'params', 'MACs')]
    for label in sections:
        params, macs, shape = totals[label]
        lines.append(template.format(
            label, blocks.get(label, '-'), shape[0] if shape else '-',
            'x'.join(str(extent) for extent in shape), '{0:,}'.format(params),
            '{0:,}'.format(macs)))
    lines.append('resolution: {0}x{1}'.format(height, width))
    lines.append('total params: {0}'.format(_millions(report.total_params)))
    lines.append('total MACs: {0:,} ({1:.3f} GMACs)'.format(
        report.total_macs, report.gmacs))
    return '\n'.join(lines) + '\n'


class TargetCheck(records.Record):
    """Measured quantity against a published target."""

    quantity = fields.String(required=True)
    target = fields.Float(required=True)
    measured = fields.Float(required=True)
    tolerance = fields.Float(minimum=0.0, required=True)
    enforced = fields.Bool(default=True)

    __view_key__ = (quantity, target, measured)

    @property
    def deviation(self):
        """Relative deviation of the measurement from the target."""
        return (self.measured - self.target) / self.target

    @property
    def ok(self):
        """True when within tolerance or not enforced."""
        return not self.enforced or abs(self.deviation) <= self.tolerance


def compare_to_published(name, table, height=224, width=224):
    """Compare a preset with its published parameter and GMAC targets.

    :raises KeyError: when ``name`` is not in ``table``
    :rtype: list[TargetCheck]
    """
    targets = PUBLISHED_TARGETS[table]
    if name == 'ablation_A0':
        name = 'pure_mlp_baseline'
    if name not in targets:
        raise KeyError('{0!r} is not a row of table {1}; rows: {2}'.format(
            name, table, ', '.join(sorted(targets))))
    report = count_macs(model_module.preset(name), height, width)
    params, gmacs = targets[name]
    checks = [
        TargetCheck(quantity='params', target=params,
                    measured=report.total_params / 1e6,
                    tolerance=PARAM_TOLERANCE,
                    enforced=(table, name, 'params') not in UNENFORCED),
        TargetCheck(quantity='gmacs', target=gmacs, measured=report.gmacs,
                    tolerance=MAC_TOLERANCE,
                    enforced=(table, name, 'gmacs') not in UNENFORCED),
    ]
    if table == 2:
        checks.extend(ablation_deltas())
    return checks


def ablation_deltas():
    """Return the parameter deltas of the two ablation toggles.

    :rtype: list[TargetCheck]
    """
    checks = []
    for label, with_name, without_name, target in ABLATION_DELTAS:
        delta = (count_params(model_module.build(
            model_module.preset(with_name), dtype=np.float64,
            initialize=False)).total_params -
            count_params(model_module.build(
                model_module.preset(without_name), dtype=np.float64,
                initialize=False)).total_params)
        checks.append(TargetCheck(quantity=label + ' delta', target=target,
                                  measured=delta / 1e6,
                                  tolerance=DELTA_TOLERANCE))
    return checks


def normalize_map(values):
    """Min-max normalize to ``[0, 1]``; a constant map becomes zeros."""
    values = np.asarray(values, dtype=np.float64)
    low, high = values.min(), values.max()
    if high - low <= 0.0:
        return np.zeros_like(values)
    return (values - low) / (high - low)


def export_feature_maps(model, image, stage, reduce='mean', k=4,
                        out_dir=None, prefix='stage'):
    """Return normalized 2-D maps of one pyramid level.

    ``mean`` yields the channel-mean map; ``per_channel`` yields the first
    ``k`` channels. With ``out_dir`` every map is also written as a tensor
    file and a PGM raster.

    :rtype: list[numpy.ndarray]
    """
    if reduce not in ('mean', 'per_channel'):
        raise errors.ParameterError('reduce must be mean or per_channel, '
                                    '{0!r} given'.format(reduce))
    if image.ndim != 4 or image.shape[0] != 1:
        raise errors.DimensionError('export takes one image (1, 3, H, W), '
                                    '{0} given'.format(image.shape))
    model.eval()
    level = model.forward_pyramid(image).level(stage)[0]
    if reduce == 'mean':
        maps = [normalize_map(level.mean(axis=0))]
    else:
        maps = [normalize_map(channel) for channel in level[:k]]
    if out_dir is not None:
        _write_maps(maps, stage, reduce, out_dir, prefix)
    return maps


def _write_maps(maps, stage, reduce, out_dir, prefix):
    if not os.path.isdir(out_dir):
        os.makedirs(out_dir)
    for index, values in enumerate(maps):
        stem = os.path.join(out_dir, '{0}{1}_{2}_{3}'.format(
            prefix, stage, reduce, index))
        persist.save_tensor(stem + '.cmlt', values, name='map')
        persist.write_pgm(stem + '.pgm', values)
    log.info('feature maps written', stage=stage, count=len(maps),
             out_dir=str(out_dir))


def format_checks(name, checks):
    """Return a text report of target checks."""
    lines = ['{0}:'.format(name)]
    for check in checks:
        status = 'ok' if check.ok else 'FAIL'
        if not check.enforced:
            status = 'not enforced'
        lines.append('  {0:<24} target {1:>7.3f}  measured {2:>7.3f}  '
                     'deviation {3:+6.1%}  (tolerance {4:.0%}) {5}'.format(
                         check.quantity, check.target, check.measured,
                         check.deviation, check.tolerance, status))
    return '\n'.join(lines) + '\n'

