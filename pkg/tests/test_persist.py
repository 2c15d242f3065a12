"""File format tests."""

import os
import shutil
import struct
import tempfile
import unittest
import zlib

import numpy as np

from convmlp import errors
from convmlp import model
from convmlp import persist


class ScratchTestCase(unittest.TestCase):
    """Test case with a scratch directory."""

    def setUp(self):
        """Create the scratch directory."""
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        """Remove the scratch directory."""
        shutil.rmtree(self.directory)

    def path(self, name):
        """Return a scratch file path."""
        return os.path.join(self.directory, name)


def reseal(data):
    """Replace the trailing CRC after editing a payload."""
    payload = data[:-4]
    return payload + struct.pack('<I', zlib.crc32(payload) & 0xffffffff)


class CheckpointTests(ScratchTestCase):
    """Checkpoint round trips and corruption handling."""

    def setUp(self):
        """Build the tiny model with non-trivial running statistics."""
        super(CheckpointTests, self).setUp()
        self.model = model.build(model.preset('tiny'), seed=4)
        self.model.forward(np.random.default_rng(0).standard_normal(
            (2, 3, 32, 32)).astype(np.float32))
        self.data = persist.checkpoint_bytes(self.model)

    def test_layout(self):
        """Test magic, version and trailing CRC."""
        self.assertEqual(self.data[:4], b'CMLP')
        self.assertEqual(struct.unpack('<I', self.data[4:8])[0], 1)
        self.assertEqual(struct.unpack('<I', self.data[-4:])[0],
                         zlib.crc32(self.data[:-4]) & 0xffffffff)

    def test_round_trip_byte_identical(self):
        """Test save, load and save again."""
        first = self.path('first.ckpt')
        second = self.path('second.ckpt')

        persist.save_checkpoint(self.model, first)
        persist.save_checkpoint(persist.load_checkpoint(first), second)

        with open(first, 'rb') as one, open(second, 'rb') as two:
            self.assertEqual(one.read(), two.read())

    def test_round_trip_values(self):
        """Test parameters and running statistics come back bit-exactly."""
        loaded = persist.checkpoint_from_bytes(self.data)

        self.assertEqual(loaded.config, self.model.config)
        self.assertEqual(loaded.state_names(), self.model.state_names())
        for one, two in zip(loaded.state_arrays(),
                            self.model.state_arrays()):
            self.assertEqual(one.dtype, two.dtype)
            self.assertTrue(np.array_equal(one, two))

    def test_small_round_trip(self):
        """Test the small preset round trip."""
        built = model.build(model.preset('S'), seed=1)

        loaded = persist.checkpoint_from_bytes(persist.checkpoint_bytes(built))

        for one, two in zip(loaded.params, built.params):
            self.assertTrue(np.array_equal(one.value, two.value), one.name)

    def test_float64(self):
        """Test that the stored dtype is kept."""
        built = model.build(model.preset('tiny'), dtype=np.float64)

        loaded = persist.checkpoint_from_bytes(persist.checkpoint_bytes(built))

        self.assertEqual(loaded.params[0].value.dtype, np.float64)

    def test_flipped_byte(self):
        """Test a flipped payload byte fails the CRC."""
        corrupted = bytearray(self.data)
        corrupted[len(corrupted) // 2] ^= 0xff

        with self.assertRaises(errors.ChecksumError):
            persist.checkpoint_from_bytes(bytes(corrupted))

    def flipped(self, offset):
        """Return the checkpoint with one byte inverted."""
        corrupted = bytearray(self.data)
        corrupted[offset] ^= 0xff
        return bytes(corrupted)

    def first_record_offset(self):
        """Return the offset of the first tensor record."""
        config_length = struct.unpack('<I', self.data[8:12])[0]
        return 12 + config_length + 4

    def test_flipped_header_bytes(self):
        """Test version and config text bytes are covered by the CRC."""
        for offset in (4, 12):
            with self.assertRaises(errors.ChecksumError):
                persist.checkpoint_from_bytes(self.flipped(offset))

    def test_flipped_record_header_bytes(self):
        """Test record name length, name and dtype bytes are covered."""
        start = self.first_record_offset()
        name_length = struct.unpack('<I', self.data[start:start + 4])[0]
        dtype_offset = start + 4 + name_length

        self.assertIn(self.data[dtype_offset], (1, 2))
        for offset in (start, start + 4, dtype_offset):
            with self.assertRaises(errors.ChecksumError):
                persist.checkpoint_from_bytes(self.flipped(offset))

    def test_truncated_before_checksum(self):
        """Test a file cut inside its fixed header is truncated."""
        with self.assertRaises(errors.TruncationError):
            persist.checkpoint_from_bytes(self.data[:10])

    def test_truncated(self):
        """Test truncation reports an offset."""
        with self.assertRaises(errors.TruncationError) as context:
            persist.checkpoint_from_bytes(self.data[:len(self.data) // 3])

        self.assertIsNotNone(context.exception.offset)

    def test_unknown_version(self):
        """Test version checks."""
        data = reseal(self.data[:4] + struct.pack('<I', 2) + self.data[8:])

        with self.assertRaises(errors.VersionError):
            persist.checkpoint_from_bytes(data)

    def test_bad_magic(self):
        """Test magic checks."""
        with self.assertRaises(errors.FormatError):
            persist.checkpoint_from_bytes(b'XXXX' + self.data[4:])

    def test_renamed_tensor(self):
        """Test a renamed record is a name mismatch."""
        data = reseal(self.data.replace(b'tokenizer.conv1.weight',
                                        b'tokenizer.conv9.weight'))

        with self.assertRaises(errors.NameMismatchError) as context:
            persist.checkpoint_from_bytes(data)

        self.assertIn('tokenizer.conv9.weight', str(context.exception))

    def test_expected_config_mismatch(self):
        """Test the first differing field is named."""
        with self.assertRaises(errors.ConfigMismatchError) as context:
            persist.checkpoint_from_bytes(self.data, model.preset('S'))

        self.assertEqual(context.exception.field, 'conv_stage_blocks')

    def test_expected_config_match(self):
        """Test loading with the right expectation."""
        loaded = persist.checkpoint_from_bytes(self.data,
                                               model.preset('tiny'))

        self.assertEqual(loaded.config, model.preset('tiny'))

    def test_missing_file(self):
        """Test a missing checkpoint is a format error."""
        with self.assertRaises(errors.FormatError):
            persist.load_checkpoint(self.path('missing.ckpt'))


class TensorFileTests(ScratchTestCase):
    """Tensor file tests."""

    def test_round_trip(self):
        """Test value and dtype round trip."""
        array = np.random.default_rng(0).standard_normal((3, 4, 5))
        path = self.path('values.cmlt')

        persist.save_tensor(path, array)

        restored = persist.load_tensor(path)
        self.assertEqual(restored.dtype, np.float64)
        self.assertTrue(np.array_equal(restored, array))

    def test_unsupported_dtype(self):
        """Test integer arrays are rejected."""
        with self.assertRaises(errors.FormatError):
            persist.save_tensor(self.path('ints.cmlt'), np.arange(3))

    def test_corruption(self):
        """Test a flipped byte in a tensor file."""
        path = self.path('values.cmlt')
        persist.save_tensor(path, np.ones(4, dtype=np.float32))
        with open(path, 'rb') as stream:
            data = bytearray(stream.read())
        data[-6] ^= 0x01
        with open(path, 'wb') as stream:
            stream.write(bytes(data))

        with self.assertRaises(errors.ChecksumError):
            persist.load_tensor(path)


class ConfigTextTests(unittest.TestCase):
    """Config grammar tests."""

    def test_variant(self):
        """Test a variant line expands to the preset."""
        self.assertEqual(persist.parse_config('variant = S\n'),
                         model.preset('S'))

    def test_override_in_order(self):
        """Test later lines override the preset."""
        config = persist.parse_config('variant = S  # small\n'
                                      'mlp_ratio = 3\n'
                                      'stage_depths = 3, 6, 3\n')

        self.assertEqual(config.mlp_ratio, 3)
        self.assertEqual(config.stage_depths, (3, 6, 3))
        self.assertEqual(config.channels, (64, 128, 256, 512))

    def test_explicit(self):
        """Test a config without a variant."""
        config = persist.parse_config(
            '# explicit\n\nchannels = 8,16,32,64\nstage_depths = 1,1,1\n'
            'use_dw_conv = false\nnum_classes = 10\n')

        self.assertEqual(config.channels, (8, 16, 32, 64))
        self.assertFalse(config.use_dw_conv)

    def test_canonical_round_trip(self):
        """Test format then parse gives an equal config."""
        for name in model.PRESET_NAMES:
            config = model.preset(name)
            self.assertEqual(persist.parse_config(
                persist.format_config(config)), config, name)

    def test_canonical_text(self):
        """Test the canonical spelling."""
        text = persist.format_config(model.preset('S'))

        self.assertIn('stage_depths = 2,4,2\n', text)
        self.assertIn('use_dw_conv = true\n', text)
        self.assertIn('dropout = 0.0\n', text)
        self.assertNotIn('tokenizer_channels', text)

    def test_unknown_key(self):
        """Test the line number of an unknown key."""
        with self.assertRaises(errors.ConfigError) as context:
            persist.parse_config('variant = S\ndepth = 3\n')

        self.assertEqual(context.exception.line, 2)
        self.assertIn('line 2', str(context.exception))

    def test_malformed_value(self):
        """Test the line number of a malformed value."""
        with self.assertRaises(errors.ConfigError) as context:
            persist.parse_config('\nmlp_ratio = two\n')

        self.assertEqual(context.exception.line, 2)

    def test_missing_separator(self):
        """Test lines without '='."""
        with self.assertRaises(errors.ConfigError):
            persist.parse_config('variant S\n')

    def test_unknown_variant(self):
        """Test unknown presets."""
        with self.assertRaises(errors.ConfigError):
            persist.parse_config('variant = XL\n')

    def test_invariant_violation(self):
        """Test cross-field errors point at the offending line."""
        with self.assertRaises(errors.ConfigError) as context:
            persist.parse_config('variant = S\ntokenizer_channels = 8,8,16\n')

        self.assertEqual(context.exception.line, 2)
        self.assertEqual(context.exception.field, 'tokenizer_channels')


class RasterTests(unittest.TestCase):
    """PGM and PPM tests."""

    def setUp(self):
        """Create the scratch directory."""
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        """Remove the scratch directory."""
        shutil.rmtree(self.directory)

    def test_pgm_round_trip(self):
        """Test 8-bit quantization on the way back."""
        path = os.path.join(self.directory, 'map.pgm')
        values = np.linspace(0.0, 1.0, 12).reshape(3, 4)

        persist.write_pgm(path, values)

        restored = persist.read_pgm(path)
        self.assertEqual(restored.shape, (3, 4))
        self.assertLessEqual(np.abs(restored - values).max(), 0.5 / 255 + 1e-12)

    def test_ppm_image(self):
        """Test reading a colour raster as a batch of one."""
        path = os.path.join(self.directory, 'image.ppm')
        pixels = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
        with open(path, 'wb') as stream:
            stream.write(b'P6\n# comment\n3 2\n255\n' + pixels.tobytes())

        image = persist.read_image(path)

        self.assertEqual(image.shape, (1, 3, 2, 3))
        self.assertEqual(image[0, 1, 0, 2], pixels[0, 2, 1] / 255.0)

    def test_greyscale_repeated(self):
        """Test greyscale rasters fill three channels."""
        path = os.path.join(self.directory, 'grey.pgm')
        persist.write_pgm(path, np.full((4, 4), 0.5))

        image = persist.read_image(path)

        self.assertEqual(image.shape, (1, 3, 4, 4))
        self.assertTrue(np.array_equal(image[0, 0], image[0, 2]))

    def test_truncated_raster(self):
        """Test short pixel data."""
        path = os.path.join(self.directory, 'short.pgm')
        with open(path, 'wb') as stream:
            stream.write(b'P5\n4 4\n255\n' + b'\x00' * 5)

        with self.assertRaises(errors.TruncationError):
            persist.read_pgm(path)
