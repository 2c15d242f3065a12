"""Collections module."""


class Collection(list):
    """List that only holds ``value_type`` items.

    Items are looked up by ``key_attribute`` (``name`` by default); the
    first item wins when names repeat.
    """

    value_type = object
    key_attribute = 'name'

    def __init__(self, iterable=()):
        """Initializer."""
        super(Collection, self).__init__(self._checked(iterable or ()))

    @classmethod
    def _check(cls, value):
        if not isinstance(value, cls.value_type):
            raise TypeError('{0} holds {1} items, {2!r} given'.format(
                cls.__name__, cls.value_type.__name__, value))
        return value

    @classmethod
    def _checked(cls, iterable):
        items = list(iterable)
        for item in items:
            cls._check(item)
        return items

    def append(self, value):
        """Append a checked item."""
        super(Collection, self).append(self._check(value))

    def extend(self, iterable):
        """Append checked items."""
        super(Collection, self).extend(self._checked(iterable))

    def insert(self, index, value):
        """Insert a checked item."""
        super(Collection, self).insert(index, self._check(value))

    def __setitem__(self, index, value):
        """Replace an item or a slice with checked items."""
        if isinstance(index, slice):
            value = self._checked(value)
        else:
            value = self._check(value)
        super(Collection, self).__setitem__(index, value)

    def __getitem__(self, index):
        """Slices stay collections of the same class."""
        value = super(Collection, self).__getitem__(index)
        if isinstance(index, slice):
            return type(self)(value)
        return value

    def keys(self):
        """Item keys in collection order.

        :rtype: list[str]
        """
        return [getattr(item, self.key_attribute) for item in self]

    def find(self, key):
        """First item whose key equals ``key``.

        :raises KeyError: when nothing matches
        """
        for item in self:
            if getattr(item, self.key_attribute) == key:
                return item
        raise KeyError(key)

    def sum_of(self, attribute):
        """Integer sum of ``attribute`` over all items."""
        return sum(int(getattr(item, attribute)) for item in self)
