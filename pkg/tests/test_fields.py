"""Fields tests."""

import unittest

import numpy as np

from convmlp import errors
from convmlp import fields
from convmlp import records


class Sample(records.Record):
    """Record with one field of every kind."""

    flag = fields.Bool(default=False)
    count = fields.Int(minimum=1)
    rate = fields.Float(minimum=0.0, maximum=1.0)
    label = fields.String()
    mode = fields.Choice(('fast', 'full'), default='fast')
    sizes = fields.Ints(arity=2, minimum=0)
    values = fields.Array(dtype=np.float64)
    required = fields.Int(required=True, default=5)


class FieldTests(unittest.TestCase):
    """Base field tests."""

    def test_field_default(self):
        """Test that defaults are applied on init."""
        sample = Sample()

        self.assertIs(sample.flag, False)
        self.assertEqual(sample.mode, 'fast')
        self.assertEqual(sample.required, 5)

    def test_field_required_set_invalid(self):
        """Test that required field rejects None."""
        sample = Sample()

        with self.assertRaises(AttributeError):
            sample.required = None

    def test_field_could_not_be_rebound(self):
        """Test that a bound field refuses a second name."""
        field = fields.Int().bind_name('first')

        with self.assertRaises(errors.Error):
            field.bind_name('second')


class BoolTests(unittest.TestCase):
    """Bool field tests."""

    def test_set_value_conversion_str(self):
        """Test conversion of config words."""
        sample = Sample()

        sample.flag = 'true'
        self.assertIs(sample.flag, True)
        sample.flag = 'No'
        self.assertIs(sample.flag, False)

    def test_set_incorrect(self):
        """Test that other words are rejected."""
        sample = Sample()

        with self.assertRaises(ValueError):
            sample.flag = 'maybe'


class NumberTests(unittest.TestCase):
    """Int and Float field tests."""

    def test_int_conversion_str(self):
        """Test int conversion."""
        sample = Sample()

        sample.count = '7'

        self.assertEqual(sample.count, 7)

    def test_int_minimum(self):
        """Test lower bound."""
        sample = Sample()

        with self.assertRaises(ValueError):
            sample.count = 0

    def test_int_rejects_fraction(self):
        """Test that fractional floats are not truncated."""
        sample = Sample()

        with self.assertRaises(ValueError):
            sample.count = 2.5

    def test_float_half_open_range(self):
        """Test that the maximum is exclusive."""
        sample = Sample()

        sample.rate = 0.0
        self.assertEqual(sample.rate, 0.0)
        with self.assertRaises(ValueError):
            sample.rate = 1.0

    def test_float_rejects_nan(self):
        """Test non-finite values are rejected."""
        sample = Sample()

        with self.assertRaises(ValueError):
            sample.rate = float('nan')


class ChoiceTests(unittest.TestCase):
    """Choice field tests."""

    def test_set_value(self):
        """Test that surrounding spaces are stripped."""
        sample = Sample()

        sample.mode = ' full '

        self.assertEqual(sample.mode, 'full')

    def test_set_incorrect(self):
        """Test values outside the choices."""
        sample = Sample()

        with self.assertRaises(ValueError):
            sample.mode = 'slow'


class IntsTests(unittest.TestCase):
    """Ints field tests."""

    def test_set_value_conversion_str(self):
        """Test comma separated text."""
        sample = Sample()

        sample.sizes = '3, 4'

        self.assertEqual(sample.sizes, (3, 4))

    def test_set_incorrect_arity(self):
        """Test that the item count is checked."""
        sample = Sample()

        with self.assertRaises(ValueError) as context:
            sample.sizes = (1, 2, 3)

        self.assertIn('takes exactly 2 values, 3 given',
                      str(context.exception))

    def test_set_incorrect_minimum(self):
        """Test that every item is bounded."""
        sample = Sample()

        with self.assertRaises(ValueError):
            sample.sizes = (1, -1)


class ArrayTests(unittest.TestCase):
    """Array field tests."""

    def test_held_by_reference(self):
        """Test that matching arrays are not copied."""
        array = np.zeros(3)
        sample = Sample(values=array)

        self.assertIs(sample.values, array)

    def test_conversion(self):
        """Test that lists and other dtypes are converted."""
        sample = Sample(values=[1, 2])

        self.assertEqual(sample.values.dtype, np.float64)
        self.assertEqual(sample.get_data()['values'], [1.0, 2.0])
