"""Checkpoint, tensor, config and raster file formats.

Checkpoint layout (all integers little-endian)::

    "CMLP" | u32 version | u32 len | config text (UTF-8) | u32 count
    | count x record | u32 CRC-32 of every preceding byte

    record := u32 len | name (UTF-8) | u8 dtype | u8 rank | rank x u64
              | raw little-endian values

Tensor files use the same record codec under the ``"CMLT"`` magic with
exactly one record and no config text.
"""

import struct
import zlib

import numpy as np
import six
import structlog

from . import errors
from . import model as model_module

log = structlog.get_logger()

CHECKPOINT_MAGIC = b'CMLP'
TENSOR_MAGIC = b'CMLT'
VERSION = 1

DTYPE_CODES = {1: np.dtype('<f4'), 2: np.dtype('<f8')}
"""Stored dtype code -> little-endian numpy dtype."""

_U8 = struct.Struct('<B')
_U32 = struct.Struct('<I')
_U64 = struct.Struct('<Q')


def _dtype_code(dtype):
    for code, stored in six.iteritems(DTYPE_CODES):
        if np.dtype(dtype).newbyteorder('<') == stored:
            return code
    raise errors.FormatError('unsupported dtype {0}'.format(dtype))


def encode_record(name, array):
    """Return the bytes of one named tensor record."""
    array = np.asarray(array)
    code = _dtype_code(array.dtype)
    raw_name = name.encode('utf-8')
    chunks = [_U32.pack(len(raw_name)), raw_name, _U8.pack(code),
              _U8.pack(array.ndim)]
    chunks.extend(_U64.pack(extent) for extent in array.shape)
    chunks.append(np.ascontiguousarray(array, dtype=DTYPE_CODES[code])
                  .tobytes())
    return b''.join(chunks)


class _Reader(object):
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, data, end=None):
        self.data = data
        self.offset = 0
        self.end = len(data) if end is None else end

    def take(self, size, what):
        if self.offset + size > self.end:
            raise errors.TruncationError(
                'file ends inside {0}: {1} bytes needed, {2} left'.format(
                    what, size, self.end - self.offset), self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, codec, what):
        return codec.unpack(self.take(codec.size, what))[0]

    def record(self):
        start = self.offset
        length = self.unpack(_U32, 'record name length')
        raw_name = self.take(length, 'record name')
        try:
            name = raw_name.decode('utf-8')
        except UnicodeDecodeError:
            raise errors.FormatError('record name is not UTF-8', start)
        code = self.unpack(_U8, 'dtype code of ' + name)
        if code not in DTYPE_CODES:
            raise errors.FormatError(
                'unknown dtype code {0} for {1}'.format(code, name),
                self.offset - 1)
        rank = self.unpack(_U8, 'rank of ' + name)
        shape = tuple(self.unpack(_U64, 'extents of ' + name)
                      for _ in range(rank))
        dtype = DTYPE_CODES[code]
        count = 1
        for extent in shape:
            count *= extent
        raw = self.take(count * dtype.itemsize, 'values of ' + name)
        return name, np.frombuffer(raw, dtype=dtype).reshape(shape), start


def _seal(payload):
    return payload + _U32.pack(zlib.crc32(payload) & 0xffffffff)


def _open(data, magic, what):
    """Check magic and version, return a reader positioned after them."""
    reader = _Reader(data, end=max(len(data) - _U32.size, 0))
    reader.take(len(magic), 'magic')
    version = reader.unpack(_U32, 'version')
    if version != VERSION:
        raise errors.VersionError(
            'unknown {0} format version {1}'.format(what, version),
            len(magic))
    return reader


def _check_end(reader):
    if reader.offset != reader.end:
        raise errors.FormatError('{0} trailing bytes before checksum'.format(
            reader.end - reader.offset), reader.offset)


def _read_sealed(data, magic, what, parse):
    """Run ``parse(reader)`` over a sealed payload.

    A stored CRC-32 that does not match makes every structural complaint a
    :py:class:`errors.ChecksumError`, except a layout that runs past the
    end of the file, which stays a :py:class:`errors.TruncationError`.
    """
    if data[:len(magic)] != magic[:len(data)] or not data:
        raise errors.FormatError('not a {0} file (bad magic)'.format(what), 0)
    minimum = len(magic) + 2 * _U32.size
    if len(data) < minimum:
        raise errors.TruncationError(
            '{0} file has {1} bytes, at least {2} needed'.format(
                what, len(data), minimum), len(data))
    end = len(data) - _U32.size
    stored = _U32.unpack(data[end:])[0]
    actual = zlib.crc32(data[:end]) & 0xffffffff
    if stored == actual:
        reader = _open(data, magic, what)
        result = parse(reader)
        _check_end(reader)
        return result
    try:
        reader = _open(data, magic, what)
        parse(reader)
    except errors.TruncationError:
        raise
    except errors.FormatError:
        pass
    raise errors.ChecksumError(
        'CRC-32 mismatch: stored {0:08x}, computed {1:08x}'.format(
            stored, actual), end)


def _read_bytes(path):
    try:
        with open(path, 'rb') as stream:
            return stream.read()
    except IOError as exception:
        raise errors.FormatError('cannot read {0}: {1}'.format(
            path, exception.strerror or exception))


def _write_bytes(path, data):
    with open(path, 'wb') as stream:
        stream.write(data)


def checkpoint_bytes(model):
    """Serialize ``model`` to checkpoint bytes."""
    config_text = format_config(model.config).encode('utf-8')
    names, arrays = model.state_names(), model.state_arrays()
    chunks = [CHECKPOINT_MAGIC, _U32.pack(VERSION),
              _U32.pack(len(config_text)), config_text,
              _U32.pack(len(names))]
    chunks.extend(encode_record(name, array)
                  for name, array in zip(names, arrays))
    return _seal(b''.join(chunks))


def save_checkpoint(model, path):
    """Write ``model`` (config, parameters, running statistics) to ``path``."""
    data = checkpoint_bytes(model)
    _write_bytes(path, data)
    log.info('checkpoint saved', path=str(path), size=len(data),
             tensors=len(model.state_names()))


def _checkpoint_payload(reader):
    length = reader.unpack(_U32, 'config length')
    raw_config = reader.take(length, 'config text')
    count = reader.unpack(_U32, 'tensor count')
    return raw_config, [reader.record() for _ in range(count)]


def checkpoint_from_bytes(data, expected_config=None):
    """Rebuild a model from checkpoint bytes.

    :raises errors.FormatError: with a subclass per failure kind
    :raises errors.ConfigMismatchError: when ``expected_config`` differs
    :rtype: model.ConvMLP
    """
    raw_config, records = _read_sealed(data, CHECKPOINT_MAGIC, 'checkpoint',
                                       _checkpoint_payload)
    config_start = len(CHECKPOINT_MAGIC) + 2 * _U32.size
    count, length = len(records), len(raw_config)

    try:
        config = parse_config(raw_config.decode('utf-8'))
    except UnicodeDecodeError:
        raise errors.FormatError('config text is not UTF-8', config_start)
    if expected_config is not None and config != expected_config:
        field = config.first_difference(expected_config)
        raise errors.ConfigMismatchError(field, expected_config.get(field),
                                         config.get(field))

    dtype = records[0][1].dtype if records else np.float32
    model = model_module.build(config, dtype=dtype.newbyteorder('='),
                               initialize=False)
    names, arrays = model.state_names(), model.state_arrays()
    if len(names) != count:
        raise errors.NameMismatchError(
            'checkpoint holds {0} tensors, model needs {1}'.format(
                count, len(names)), config_start + length)
    for expected, target, (name, array, offset) in zip(names, arrays,
                                                       records):
        if name != expected:
            raise errors.NameMismatchError(
                'tensor {0!r} found where {1!r} was expected'.format(
                    name, expected), offset)
        if array.shape != target.shape:
            raise errors.NameMismatchError(
                'tensor {0!r} has shape {1}, model needs {2}'.format(
                    name, array.shape, target.shape), offset)
        target[...] = array
    return model


def load_checkpoint(path, expected_config=None):
    """Load the model stored at ``path``."""
    model = checkpoint_from_bytes(_read_bytes(path), expected_config)
    log.info('checkpoint loaded', path=str(path),
             params=model.params.total_size())
    return model


def save_tensor(path, array, name='tensor'):
    """Write one array to a tensor file."""
    _write_bytes(path, _seal(b''.join((TENSOR_MAGIC, _U32.pack(VERSION),
                                       encode_record(name, array)))))


def load_tensor(path):
    """Read the array stored in a tensor file.

    :rtype: numpy.ndarray
    """
    _, array, _ = _read_sealed(_read_bytes(path), TENSOR_MAGIC, 'tensor',
                               _Reader.record)
    return array.astype(array.dtype.newbyteorder('='))


def format_config(config):
    """Return the canonical ``key = value`` text of ``config``.

    Fields appear in declaration order; unset optional fields are omitted.
    """
    lines = []
    for name, value in six.iteritems(config.get_data()):
        if value is None:
            continue
        if isinstance(value, bool):
            text = 'true' if value else 'false'
        elif isinstance(value, (tuple, list)):
            text = ','.join(str(item) for item in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append('{0} = {1}'.format(name, text))
    return '\n'.join(lines) + '\n'


def parse_config(text):
    """Parse the line-oriented ``key = value`` config grammar.

    ``#`` starts a comment. ``variant = NAME`` loads a preset; later lines
    override its values in file order. Unknown keys are rejected.

    :raises errors.ConfigError: line-numbered
    :rtype: model.ModelConfig
    """
    known = model_module.ModelConfig.__fields__
    values, lines = {}, {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        key, separator, value = line.partition('=')
        key, value = key.strip(), value.strip()
        if not separator or not key:
            raise errors.ConfigError('expected "key = value"', number)
        if not value:
            raise errors.ConfigError('missing value for {0}'.format(key),
                                     number, key)
        if key == 'variant':
            try:
                values = model_module.preset(value).get_data()
            except KeyError as exception:
                raise errors.ConfigError(exception.args[0], number, key)
            lines = dict.fromkeys(values, number)
            continue
        if key not in known:
            raise errors.ConfigError('unknown key {0!r}'.format(key), number,
                                     key)
        try:
            values[key] = known[key]._converter(value)
        except (TypeError, ValueError) as exception:
            raise errors.ConfigError(str(exception), number, key)
        lines[key] = number
    try:
        config = model_module.ModelConfig(**values)
        return config.validate()
    except errors.ConfigError as exception:
        raise errors.ConfigError(str(exception), lines.get(exception.field),
                                 exception.field)


def _pnm_tokens(data, count):
    """Return ``count`` header tokens and the offset after the header."""
    tokens, offset = [], 0
    while len(tokens) < count:
        while offset < len(data) and data[offset:offset + 1].isspace():
            offset += 1
        if data[offset:offset + 1] == b'#':
            while offset < len(data) and data[offset:offset + 1] != b'\n':
                offset += 1
            continue
        start = offset
        while offset < len(data) and not data[offset:offset + 1].isspace():
            offset += 1
        if start == offset:
            raise errors.TruncationError('raster header ends early', start)
        tokens.append(data[start:offset])
    return tokens, offset + 1


def read_pnm(path):
    """Read a binary PGM (P5) or PPM (P6) raster with 8-bit samples.

    :returns: ``float64`` array ``(channels, H, W)`` scaled to ``[0, 1]``
    """
    data = _read_bytes(path)
    tokens, offset = _pnm_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b'P5', b'P6'):
        raise errors.FormatError('unsupported raster magic {0!r}'.format(
            magic), 0)
    try:
        width, height, maxval = (int(token) for token in tokens[1:])
    except ValueError:
        raise errors.FormatError('malformed raster header', 0)
    if maxval <= 0 or maxval > 255:
        raise errors.FormatError('only 8-bit rasters are supported', 0)
    channels = 1 if magic == b'P5' else 3
    size = width * height * channels
    if len(data) < offset + size:
        raise errors.TruncationError('raster pixels end early', len(data))
    pixels = np.frombuffer(data[offset:offset + size], dtype=np.uint8)
    pixels = pixels.reshape(height, width, channels).transpose(2, 0, 1)
    return pixels.astype(np.float64) / maxval


def read_pgm(path):
    """Read a P5 raster as ``(H, W)`` values in ``[0, 1]``."""
    image = read_pnm(path)
    if image.shape[0] != 1:
        raise errors.FormatError('{0} is not a greyscale raster'.format(path))
    return image[0]


def write_pgm(path, image):
    """Write a ``(H, W)`` map with values in ``[0, 1]`` as 8-bit P5."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise errors.DimensionError('PGM takes a 2-D map, shape {0} '
                                    'given'.format(image.shape))
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    header = 'P5\n{0} {1}\n255\n'.format(image.shape[1], image.shape[0])
    _write_bytes(path, header.encode('ascii') + pixels.tobytes())


def read_image(path):
    """Read a raster or tensor file as a ``(1, 3, H, W)`` batch.

    Greyscale rasters are repeated over three channels.
    """
    path = str(path)
    if path.lower().endswith(('.pgm', '.ppm', '.pnm')):
        image = read_pnm(path)
        if image.shape[0] == 1:
            image = np.repeat(image, 3, axis=0)
    else:
        image = load_tensor(path)
    if image.ndim == 3:
        image = image[np.newaxis]
    if image.ndim != 4 or image.shape[:2] != (1, 3):
        raise errors.DimensionError(
            'image must be (3, H, W) or (1, 3, H, W), {0} given'.format(
                image.shape))
    return image
