"""Desk-scale supervised training."""

import collections as std_collections
import csv
import glob
import math
import os

import numpy as np
import structlog
from scipy import special

from . import errors
from . import fields
from . import model as model_module
from . import records

log = structlog.get_logger()

CIFAR10_RECORD = 3073
CIFAR10_SIZE = 32
CIFAR10_CLASSES = 10


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy.

    :returns: ``(loss, grad_logits)`` with ``grad = (softmax - onehot) / N``
    :raises errors.DataError: on labels outside ``[0, K)``
    """
    if logits.ndim != 2:
        raise errors.DimensionError('logits must be (N, K), {0} given'.format(
            logits.shape))
    labels = np.asarray(labels, dtype=np.int64)
    count, classes = logits.shape
    if labels.shape != (count,):
        raise errors.DimensionError('expected {0} labels, shape {1} '
                                    'given'.format(count, labels.shape))
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise errors.DataError('labels must lie in [0, {0}), got range '
                               '[{1}, {2}]'.format(classes, labels.min(),
                                                   labels.max()))
    rows = np.arange(count)
    log_norm = special.logsumexp(logits, axis=1)
    loss = float(np.mean(log_norm - logits[rows, labels]))
    grad = np.exp(logits - log_norm[:, np.newaxis])
    grad[rows, labels] -= 1.0
    return loss, grad / count


class OptimizerState(records.Record):
    """Hyper-parameters, step counter and per-parameter slots.

    Slots (AdamW moments, SGD velocity) are created on the first step and
    keyed by registry name.
    """

    kind = fields.Choice(('adamw', 'sgd'), default='adamw')
    lr = fields.Float(minimum=0.0, default=1e-3)
    beta1 = fields.Float(minimum=0.0, maximum=1.0, default=0.9)
    beta2 = fields.Float(minimum=0.0, maximum=1.0, default=0.999)
    eps = fields.Float(minimum=0.0, default=1e-8)
    weight_decay = fields.Float(minimum=0.0, default=0.05)
    momentum = fields.Float(minimum=0.0, maximum=1.0, default=0.9)
    step = fields.Int(minimum=0, default=0)
    first = fields.Field(default=std_collections.OrderedDict)
    second = fields.Field(default=std_collections.OrderedDict)

    __view_key__ = (kind, lr, step)


def _slots(registry, state, names):
    """Create missing slots or check they mirror the registry.

    :raises errors.ConsistencyError: on name or shape drift
    """
    stores = [getattr(state, name) for name in names]
    if not stores[0]:
        for parameter in registry:
            for store in stores:
                store[parameter.name] = np.zeros_like(parameter.value)
        return stores
    if list(stores[0]) != registry.keys():
        raise errors.ConsistencyError(
            'optimizer state holds {0} slots, registry {1} parameters'.format(
                len(stores[0]), len(registry)))
    for parameter in registry:
        for store in stores:
            if store[parameter.name].shape != parameter.value.shape:
                raise errors.ConsistencyError(
                    'slot {0} has shape {1}, parameter {2}'.format(
                        parameter.name, store[parameter.name].shape,
                        parameter.value.shape))
    return stores


def adamw_step(registry, state):
    """Apply one AdamW step, then zero every gradient.

    Weight decay is decoupled and only touches decay-eligible parameters.
    """
    first, second = _slots(registry, state, ('first', 'second'))
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for parameter in registry:
        grad, value = parameter.grad, parameter.value
        moment, square = first[parameter.name], second[parameter.name]
        moment *= state.beta1
        moment += (1.0 - state.beta1) * grad
        square *= state.beta2
        square += (1.0 - state.beta2) * grad * grad
        if parameter.decay and state.weight_decay:
            value *= 1.0 - state.lr * state.weight_decay
        value -= (state.lr * (moment / correction1) /
                  (np.sqrt(square / correction2) + state.eps)).astype(
                      value.dtype)
    registry.zero_grad()


def sgd_step(registry, state):
    """Apply one momentum SGD step (``v = m v + g; p -= lr v``)."""
    velocity, = _slots(registry, state, ('first',))
    state.step += 1
    for parameter in registry:
        slot = velocity[parameter.name]
        slot *= state.momentum
        slot += parameter.grad
        if parameter.decay and state.weight_decay:
            parameter.value *= 1.0 - state.lr * state.weight_decay
        parameter.value -= (state.lr * slot).astype(parameter.value.dtype)
    registry.zero_grad()


OPTIMIZERS = {'adamw': adamw_step, 'sgd': sgd_step}


def cosine_lr(step, total_steps, base_lr, warmup_steps=0):
    """Linear warmup from 0 to ``base_lr``, then half-cosine decay to 0.

    :raises errors.ParameterError: unless ``0 <= step <= total_steps`` and
        ``warmup_steps < total_steps``
    """
    if not 0 <= warmup_steps < total_steps:
        raise errors.ParameterError(
            'warmup {0} must lie in [0, total {1})'.format(warmup_steps,
                                                           total_steps))
    if not 0 <= step <= total_steps:
        raise errors.ParameterError('step {0} outside [0, {1}]'.format(
            step, total_steps))
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = float(step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class Dataset(records.Record):
    """Normalized images, integer labels and the statistics used."""

    images = fields.Array(required=True)
    labels = fields.Array(dtype=np.int64, required=True)
    mean = fields.Array(dtype=np.float64)
    std = fields.Array(dtype=np.float64)
    num_classes = fields.Int(minimum=1, required=True)
    split = fields.String(default='train')

    __view_key__ = (split, num_classes)

    def __len__(self):
        """Return the number of samples."""
        return int(self.labels.shape[0])

    def check(self):
        """Validate labels and image values.

        :raises errors.DataError: on invalid contents
        """
        if self.images.ndim != 4 or self.images.shape[0] != len(self):
            raise errors.DataError('images {0} do not match {1} labels'.format(
                self.images.shape, len(self)))
        if len(self) and (self.labels.min() < 0 or
                          self.labels.max() >= self.num_classes):
            raise errors.DataError('labels must lie in [0, {0})'.format(
                self.num_classes))
        if not np.all(np.isfinite(self.images)):
            raise errors.DataError('images contain non-finite values')
        return self

    def batches(self, batch_size, order=None):
        """Yield ``(images, labels)`` batches in ``order``."""
        if batch_size < 1:
            raise errors.ParameterError('batch size must be positive')
        if order is None:
            order = np.arange(len(self))
        for start in range(0, len(order), batch_size):
            index = order[start:start + batch_size]
            yield self.images[index], self.labels[index]

    def subset(self, count):
        """Return the first ``count`` samples."""
        return self.replace(images=self.images[:count],
                            labels=self.labels[:count])


def channel_statistics(images):
    """Return per-channel mean and std over ``(N, H, W)``."""
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    return mean, np.where(std > 0, std, 1.0)


def normalize(images, mean, std, dtype=np.float32):
    """Return ``(images - mean) / std`` per channel."""
    shape = (1, -1, 1, 1)
    return ((images - mean.reshape(shape)) / std.reshape(shape)).astype(dtype)


def read_cifar10_batch(path):
    """Parse one CIFAR-10 binary batch.

    :returns: ``(uint8 images (N, 3, 32, 32), int64 labels)``
    :raises errors.FormatError: on a missing or truncated file
    """
    if not os.path.isfile(path):
        raise errors.FormatError('missing CIFAR-10 batch {0}'.format(path))
    raw = np.fromfile(path, dtype=np.uint8)
    whole = raw.size - raw.size % CIFAR10_RECORD
    if whole != raw.size:
        raise errors.TruncationError(
            '{0} ends inside record {1}'.format(path,
                                                whole // CIFAR10_RECORD),
            whole)
    rows = raw.reshape(-1, CIFAR10_RECORD)
    labels = rows[:, 0].astype(np.int64)
    if labels.size and labels.max() >= CIFAR10_CLASSES:
        bad = int(np.argmax(labels >= CIFAR10_CLASSES))
        raise errors.DataError('{0}: label {1} at byte offset {2}'.format(
            path, labels[bad], bad * CIFAR10_RECORD))
    images = rows[:, 1:].reshape(-1, 3, CIFAR10_SIZE, CIFAR10_SIZE)
    return images, labels


def _read_split(path, split):
    if split == 'train':
        files = sorted(glob.glob(os.path.join(path, 'data_batch_*.bin')))
    elif split == 'test':
        files = [os.path.join(path, 'test_batch.bin')]
    else:
        raise errors.ParameterError('split must be train or test, {0!r} '
                                    'given'.format(split))
    if not files or not os.path.isdir(path):
        raise errors.FormatError('no CIFAR-10 {0} batches in {1}'.format(
            split, path))
    parts = [read_cifar10_batch(name) for name in files]
    images = np.concatenate([part[0] for part in parts])
    labels = np.concatenate([part[1] for part in parts])
    return images.astype(np.float64) / 255.0, labels


def load_cifar10(path, split='train', limit=None):
    """Load CIFAR-10 binary batches from a directory.

    Images are scaled to ``[0, 1]`` and normalized with per-channel
    statistics of the training split (the test split's own statistics when
    no training batches are present).

    :rtype: Dataset
    """
    images, labels = _read_split(path, split)
    if split == 'train':
        mean, std = channel_statistics(images)
    else:
        try:
            mean, std = channel_statistics(_read_split(path, 'train')[0])
        except errors.FormatError:
            mean, std = channel_statistics(images)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    log.info('cifar10 loaded', path=str(path), split=split,
             samples=len(labels))
    return Dataset(images=normalize(images, mean, std), labels=labels,
                   mean=mean, std=std, num_classes=CIFAR10_CLASSES,
                   split=split).check()


def blob_centres(classes, size):
    """Return class blob centres ``(row, col)`` on a circle."""
    radius = size / 4.0
    angles = 2.0 * np.pi * np.arange(classes) / classes
    return np.stack([size / 2.0 + radius * np.sin(angles),
                     size / 2.0 + radius * np.cos(angles)], axis=1)


def synthetic_dataset(seed, n, classes, size=32, noise=0.1):
    """Return class-conditional Gaussian-blob images.

    Class ``k`` carries a blob at its own point on a circle; labels cycle
    through the classes so every class is present.

    :raises errors.ParameterError: when ``n < classes``
    :rtype: Dataset
    """
    if n < classes:
        raise errors.ParameterError('need at least one sample per class: '
                                    'n={0}, classes={1}'.format(n, classes))
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % classes
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    sigma = size / 8.0
    templates = np.stack([
        np.exp(-((rows - centre[0]) ** 2 + (cols - centre[1]) ** 2) /
               (2.0 * sigma ** 2))
        for centre in blob_centres(classes, size)])
    tint = rng.uniform(0.5, 1.0, size=(classes, 3))
    images = (templates[labels][:, np.newaxis] *
              tint[labels][:, :, np.newaxis, np.newaxis])
    images = images + noise * rng.standard_normal(images.shape)
    mean, std = channel_statistics(images)
    return Dataset(images=normalize(images, mean, std), labels=labels,
                   mean=mean, std=std, num_classes=classes,
                   split='synthetic').check()


def pad_to_multiple(images, multiple=model_module.REDUCTION):
    """Zero-pad the bottom and right edges up to a multiple of ``multiple``."""
    height, width = images.shape[2:]
    extra_h, extra_w = -height % multiple, -width % multiple
    if not extra_h and not extra_w:
        return images
    return np.pad(images, ((0, 0), (0, 0), (0, extra_h), (0, extra_w)),
                  mode='constant')


class TrainSettings(records.Record):
    """Optimizer and schedule settings of a training run."""

    optimizer = fields.Choice(sorted(OPTIMIZERS), default='adamw')
    lr = fields.Float(minimum=0.0, default=1e-3)
    weight_decay = fields.Float(minimum=0.0, default=0.05)
    beta1 = fields.Float(minimum=0.0, maximum=1.0, default=0.9)
    beta2 = fields.Float(minimum=0.0, maximum=1.0, default=0.999)
    eps = fields.Float(minimum=0.0, default=1e-8)
    momentum = fields.Float(minimum=0.0, maximum=1.0, default=0.9)
    warmup_fraction = fields.Float(minimum=0.0, maximum=1.0, default=0.05)
    pad = fields.Bool(default=False)
    dtype = fields.Choice(('real32', 'real64'), default='real32')

    __view_key__ = (optimizer, lr)

    def optimizer_state(self):
        """Return a fresh optimizer state."""
        return OptimizerState(kind=self.optimizer, lr=self.lr,
                              beta1=self.beta1, beta2=self.beta2,
                              eps=self.eps, weight_decay=self.weight_decay,
                              momentum=self.momentum)

    def numpy_dtype(self):
        """Return the numpy dtype of parameters and activations."""
        return np.float32 if self.dtype == 'real32' else np.float64


class EpochRecord(records.Record):
    """Metrics of one epoch."""

    epoch = fields.Int(minimum=0, required=True)
    loss = fields.Float(required=True)
    top1 = fields.Float(minimum=0.0, required=True)
    lr = fields.Float(minimum=0.0, required=True)

    __view_key__ = (epoch, loss, top1)


def _prepare_images(dataset, settings, config):
    images = dataset.images
    if settings.pad:
        images = pad_to_multiple(images)
    height, width = images.shape[2:]
    if height % model_module.REDUCTION or width % model_module.REDUCTION:
        raise errors.GeometryError(
            'image size {0}x{1} is not divisible by {2}; enable padding'
            .format(height, width, model_module.REDUCTION))
    if len(dataset) and dataset.labels.max() >= config.num_classes:
        raise errors.DataError(
            'dataset has labels up to {0}, model has {1} classes'.format(
                dataset.labels.max(), config.num_classes))
    return images.astype(settings.numpy_dtype())


def train_loop(config, dataset, epochs, batch_size, settings=None, seed=0,
               callback=None):
    """Train a freshly built model.

    Shuffling, initialization and dropout all derive from ``seed``.

    :returns: ``(model, history)`` with one :py:class:`EpochRecord` per epoch
    """
    settings = settings or TrainSettings()
    if epochs < 1 or batch_size < 1:
        raise errors.ParameterError('epochs and batch size must be positive')
    images = _prepare_images(dataset, settings, config)
    model = model_module.build(config, seed=seed,
                               dtype=settings.numpy_dtype())
    model.train()
    state = settings.optimizer_state()
    step_fn = OPTIMIZERS[settings.optimizer]
    steps_per_epoch = int(math.ceil(len(dataset) / float(batch_size)))
    total = epochs * steps_per_epoch
    warmup = int(settings.warmup_fraction * total)
    rng = np.random.default_rng(seed)
    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        loss_sum, correct = 0.0, 0
        batches = dataset.replace(images=images).batches(batch_size, order)
        for batch_images, batch_labels in batches:
            state.lr = cosine_lr(step, total, settings.lr, warmup)
            logits = model.forward(batch_images)
            loss, grad = cross_entropy(logits, batch_labels)
            model.backward(grad.astype(logits.dtype))
            step_fn(model.params, state)
            loss_sum += loss * len(batch_labels)
            correct += int(np.sum(np.argmax(logits, axis=1) == batch_labels))
            step += 1
        record = EpochRecord(epoch=epoch, loss=loss_sum / len(dataset),
                             top1=correct / float(len(dataset)), lr=state.lr)
        history.append(record)
        log.info('epoch finished', epoch=epoch, loss=round(record.loss, 6),
                 top1=record.top1, lr=record.lr)
        if callback is not None:
            callback(model, record)
    return model, history


def predict(model, images, batch_size=64):
    """Return eval-mode logits for ``images``."""
    model.eval()
    dtype = model.params[0].value.dtype
    outputs = [model.forward(images[start:start + batch_size].astype(dtype))
               for start in range(0, images.shape[0], batch_size)]
    return np.concatenate(outputs) if outputs else np.zeros(
        (0, model.config.num_classes), dtype=dtype)


def evaluate(model, dataset, batch_size=64, pad=False):
    """Return eval-mode top-1 accuracy; argmax ties go to the lowest class."""
    images = pad_to_multiple(dataset.images) if pad else dataset.images
    if not len(dataset):
        return 0.0
    logits = predict(model, images, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


METRICS_HEADER = ('epoch', 'loss', 'top1', 'lr')


def write_metrics_csv(history, path):
    """Write epoch metrics as CSV (``epoch,loss,top1,lr``)."""
    with open(path, 'w') as stream:
        writer = csv.writer(stream, lineterminator='\n')
        writer.writerow(METRICS_HEADER)
        for record in history:
            writer.writerow([record.epoch] + [repr(record.get(name)) for name
                                              in METRICS_HEADER[1:]])


def read_metrics_csv(path):
    """Read a metrics CSV back into epoch records."""
    with open(path) as stream:
        rows = list(csv.DictReader(stream))
    return [EpochRecord(**row) for row in rows]
