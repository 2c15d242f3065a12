"""Fields module.

A field is a property stored in a ``_<name>`` slot of its record. Every
assignment goes through :py:meth:`Field._converter`, which normalizes raw
input (config text, CLI strings, numpy scalars) and raises ``ValueError`` or
``TypeError`` for values outside the field's domain.
"""

import numpy as np
import six

from . import errors


class Field(property):
    """Base field."""

    def __init__(self, default=None, required=False):
        """Initializer.

        :param default: value or zero-argument factory used for ``None``
        :param bool required: reject ``None`` after defaults are applied
        """
        super(Field, self).__init__(self.get_value, self.set_value)
        self.name = None
        self.storage_name = None
        self.record_cls = None
        self.default = default
        self.required = required

    def bind_name(self, name):
        """Attach the attribute name; a field belongs to one record class."""
        if self.name is not None:
            raise errors.Error('field {0!r} cannot be reused as {1!r}'.format(
                self.name, name))
        self.name = name
        self.storage_name = '_' + name
        return self

    def bind_record_cls(self, record_cls):
        """Attach the owning record class."""
        if self.record_cls is not None:
            raise errors.Error('field {0!r} already belongs to {1}'.format(
                self.name, self.record_cls.__name__))
        self.record_cls = record_cls
        return self

    def init_record(self, record, value):
        """Assign ``value`` or, when it is ``None``, the default."""
        if value is None and self.default is not None:
            value = self.default() if callable(self.default) else self.default
        self.set_value(record, value)

    def get_value(self, record, default=None):
        """Return the stored value, or converted ``default`` when unset."""
        value = getattr(record, self.storage_name)
        if value is None and default is not None:
            return self._converter(default)
        return value

    def set_value(self, record, value):
        """Convert and store ``value``.

        :raises AttributeError: ``None`` for a required field
        """
        if value is None:
            if self.required:
                raise AttributeError('{0} is required'.format(self.name))
        else:
            value = self._converter(value)
        setattr(record, self.storage_name, value)

    def get_builtin_type(self, record):
        """Return the value as plain Python data."""
        return self.get_value(record)

    def _converter(self, value):
        return value


class Bool(Field):
    """Bool field.

    Accepts ``true``/``false``/``yes``/``no``/``1``/``0`` strings as well.
    """

    TRUE = ('true', 'yes', 'on', '1')
    FALSE = ('false', 'no', 'off', '0')

    def _converter(self, value):
        if isinstance(value, six.string_types):
            lowered = value.strip().lower()
            if lowered in self.TRUE:
                return True
            if lowered in self.FALSE:
                return False
            raise ValueError('{0!r} is not a valid boolean'.format(value))
        return bool(value)


class Int(Field):
    """Int field with optional lower bound."""

    def __init__(self, default=None, required=False, minimum=None):
        """Initializer."""
        super(Int, self).__init__(default=default, required=required)
        self.minimum = minimum

    def _converter(self, value):
        if isinstance(value, float) and not value.is_integer():
            raise ValueError('{0!r} is not an integer'.format(value))
        value = int(value)
        if self.minimum is not None and value < self.minimum:
            raise ValueError('{0} must be >= {1}, {2} given'.format(
                self.name, self.minimum, value))
        return value


class Float(Field):
    """Float field with optional half-open range ``[minimum, maximum)``."""

    def __init__(self, default=None, required=False, minimum=None,
                 maximum=None):
        """Initializer."""
        super(Float, self).__init__(default=default, required=required)
        self.minimum = minimum
        self.maximum = maximum

    def _converter(self, value):
        value = float(value)
        if not np.isfinite(value):
            raise ValueError('{0} must be finite'.format(self.name))
        if self.minimum is not None and value < self.minimum:
            raise ValueError('{0} must be >= {1}, {2} given'.format(
                self.name, self.minimum, value))
        if self.maximum is not None and value >= self.maximum:
            raise ValueError('{0} must be < {1}, {2} given'.format(
                self.name, self.maximum, value))
        return value


class String(Field):
    """String field."""

    def _converter(self, value):
        return str(value)


class Choice(String):
    """String field restricted to a fixed set of values."""

    def __init__(self, choices, default=None, required=False):
        """Initializer."""
        super(Choice, self).__init__(default=default, required=required)
        self.choices = tuple(choices)

    def _converter(self, value):
        value = str(value).strip()
        if value not in self.choices:
            raise ValueError('{0} must be one of {1}, {2!r} given'.format(
                self.name, ', '.join(self.choices), value))
        return value


class Ints(Field):
    """Tuple of integers.

    ``arity`` fixes the number of items; ``minimum`` bounds every item.
    Comma separated strings are accepted.
    """

    def __init__(self, arity=None, minimum=None, default=None,
                 required=False):
        """Initializer."""
        super(Ints, self).__init__(default=default, required=required)
        self.arity = arity
        self.minimum = minimum

    def _converter(self, value):
        if isinstance(value, six.string_types):
            value = [item for item in value.replace(' ', '').split(',')
                     if item]
        items = tuple(int(item) for item in value)
        if self.arity is not None and len(items) != self.arity:
            raise ValueError('{0} takes exactly {1} values, {2} given'.format(
                self.name, self.arity, len(items)))
        if not items:
            raise ValueError('{0} takes at least one value'.format(self.name))
        if self.minimum is not None and min(items) < self.minimum:
            raise ValueError('{0} values must be >= {1}, {2} given'.format(
                self.name, self.minimum, items))
        return items


class Array(Field):
    """Numpy array field, held by reference."""

    def __init__(self, dtype=None, default=None, required=False):
        """Initializer."""
        super(Array, self).__init__(default=default, required=required)
        self.dtype = dtype

    def _converter(self, value):
        if not isinstance(value, np.ndarray):
            value = np.asarray(value, dtype=self.dtype)
        elif self.dtype is not None and value.dtype != self.dtype:
            value = value.astype(self.dtype)
        return value

    def get_builtin_type(self, record):
        """Return built-in type representation of Array.

        :param Record record:
        :rtype list:
        """
        value = self.get_value(record)
        return None if value is None else value.tolist()


class Collection(Field):
    """Typed list of records of one class; dicts are promoted to records."""

    def __init__(self, related_record_cls, default=None, required=False):
        """Initializer."""
        super(Collection, self).__init__(default=default, required=required)
        self.related_record_cls = related_record_cls

    def _converter(self, value):
        collection_cls = self.related_record_cls.Collection
        if isinstance(value, collection_cls):
            return value
        return collection_cls([self._promote(item) for item in value])

    def _promote(self, item):
        if isinstance(item, dict):
            return self.related_record_cls(**item)
        if not isinstance(item, self.related_record_cls):
            raise TypeError('{0} holds {1} records or dicts, {2!r} '
                            'given'.format(self.name,
                                           self.related_record_cls.__name__,
                                           item))
        return item

    def get_builtin_type(self, record):
        """Return a list of dictionaries."""
        return [item.get_data() for item in self.get_value(record)]
