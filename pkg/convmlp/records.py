"""Records module.

Declarative value objects: configurations, geometries, registry entries and
cost rows are all records built from :py:mod:`convmlp.fields`.

A record class lists its fields as class attributes. The metaclass names
them, orders them (inherited first), gives each instance one slot per field
and derives a typed :py:class:`convmlp.collections.Collection` subclass.
"""

from __future__ import absolute_import

import collections as std_collections

import six

from . import fields
from . import collections
from . import errors


def _field_tuple(record_cls_name, key_name, value):
    """Normalize a ``__unique_key__``/``__view_key__`` declaration."""
    if not value:
        return ()
    if isinstance(value, fields.Field):
        return (value,)
    try:
        keys = tuple(value)
    except TypeError:
        raise errors.Error('{0}.{1} must list fields, {2!r} given'.format(
            record_cls_name, key_name, value))
    for key in keys:
        if not isinstance(key, fields.Field):
            raise errors.Error('{0}.{1} must list fields, {2!r} given'.format(
                record_cls_name, key_name, key))
    return keys


class RecordMetaClass(type):
    """Binds declared fields, keys and the typed collection of a record."""

    def __new__(mcs, class_name, bases, attributes):
        """Create the record class."""
        own = [field.bind_name(name)
               for name, field in six.iteritems(attributes)
               if isinstance(field, fields.Field)]
        if attributes.get('__slots_optimization__', True):
            attributes['__slots__'] = tuple(field.storage_name
                                            for field in own)

        cls = type.__new__(mcs, class_name, bases, attributes)

        bound = std_collections.OrderedDict()
        for base in bases:
            bound.update(getattr(base, '__fields__', {}))
        for field in own:
            bound[field.name] = field.bind_record_cls(cls)
        cls.__fields__ = bound

        if attributes.get('__value_semantics__'):
            cls.__unique_key__ = tuple(six.itervalues(bound))
        else:
            cls.__unique_key__ = _field_tuple(
                class_name, '__unique_key__',
                attributes.get('__unique_key__'))
        cls.__view_key__ = _field_tuple(class_name, '__view_key__',
                                        attributes.get('__view_key__'))

        cls.Collection = type('{0}.Collection'.format(class_name),
                              (cls.Collection,), {'value_type': cls})
        cls.Collection.__module__ = cls.__module__
        return cls


@six.add_metaclass(RecordMetaClass)
class Record(object):
    """Base record.

    .. py:attribute:: __fields__

        Fields by name, inherited ones first.

    .. py:attribute:: __unique_key__

        Fields compared by ``==`` and hashed. Empty means identity.

    .. py:attribute:: __view_key__

        Fields shown by ``str()``. Empty means ``repr()``.

    .. py:attribute:: __value_semantics__

        Shortcut: every field is part of the unique key.
    """

    Collection = collections.Collection

    __fields__ = std_collections.OrderedDict()
    __unique_key__ = ()
    __view_key__ = ()
    __slots_optimization__ = True
    __value_semantics__ = False

    def __init__(self, **kwargs):
        """Initializer."""
        unknown = sorted(set(kwargs).difference(self.__fields__))
        if unknown:
            raise AttributeError('{0} has no fields {1}'.format(
                type(self).__name__, ', '.join(unknown)))
        self.set_data(kwargs)

    def _values(self, keys=None):
        """Yield ``(name, value)`` pairs for ``keys`` (all fields)."""
        if keys is None:
            keys = six.itervalues(self.__fields__)
        for field in keys:
            yield field.name, field.get_value(self)

    def _identity(self):
        return tuple(_hashable(value)
                     for _, value in self._values(self.__unique_key__))

    def __eq__(self, other):
        """Compare unique keys; identity when no key is declared."""
        if self is other:
            return True
        if not isinstance(other, type(self)):
            return False
        if not self.__unique_key__:
            return NotImplemented
        return self._identity() == other._identity()

    def __ne__(self, other):
        """Negate ``==``."""
        result = self.__eq__(other)
        return result if result is NotImplemented else not result

    def __hash__(self):
        """Hash the unique key; identity hash when no key is declared."""
        if self.__unique_key__:
            return hash(self._identity())
        return object.__hash__(self)

    def __repr__(self):
        """Return every field as ``name=repr(value)``."""
        return '{0}.{1}({2})'.format(
            type(self).__module__, type(self).__name__,
            ', '.join('{0}={1!r}'.format(name, value)
                      for name, value in self._values()))

    def __str__(self):
        """Return view-key fields as ``name=value``."""
        if not self.__view_key__:
            return repr(self)
        return '{0}({1})'.format(
            type(self).__name__,
            ', '.join('{0}={1}'.format(name, value)
                      for name, value in self._values(self.__view_key__)))

    def get(self, field_name, default=None):
        """Return a field value, or ``default`` when it is unset.

        :raises AttributeError: for undeclared field names
        """
        field = self.__fields__.get(field_name)
        if field is None:
            raise AttributeError('{0} has no field {1!r}'.format(
                type(self).__name__, field_name))
        return field.get_value(self, default)

    def get_data(self):
        """Return field values as builtin types, in declaration order.

        :rtype: collections.OrderedDict
        """
        return std_collections.OrderedDict(
            (name, field.get_builtin_type(self))
            for name, field in six.iteritems(self.__fields__))

    def set_data(self, data):
        """Assign every field from ``data``; absent keys take defaults.

        :type data: dict
        """
        for name, field in six.iteritems(self.__fields__):
            field.init_record(self, data.get(name))

    def replace(self, **changes):
        """Return a copy with ``changes`` applied."""
        values = dict(self._values())
        values.update(changes)
        return type(self)(**values)

    def first_difference(self, other):
        """Name of the first field, in declaration order, that differs.

        :rtype: str or None
        """
        for (name, mine), (_, theirs) in zip(self._values(),
                                             other._values()):
            if _hashable(mine) != _hashable(theirs):
                return name
        return None


def _hashable(value):
    """Arrays compare and hash by dtype, shape and bytes."""
    if hasattr(value, 'tobytes') and hasattr(value, 'shape'):
        return (str(value.dtype), value.shape, value.tobytes())
    return value
