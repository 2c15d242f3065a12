"""Collections tests."""

import unittest

from convmlp import collections


class IntCollection(collections.Collection):
    """Test collection of ints."""

    value_type = int


class Named(object):
    """Item with a name and a size."""

    def __init__(self, name, size):
        self.name = name
        self.size = size


class NamedCollection(collections.Collection):
    """Test collection of named items."""

    value_type = Named


class CollectionTests(unittest.TestCase):
    """Collection tests."""

    def test_init_empty(self):
        """Test creation of collection."""
        collection = IntCollection()

        self.assertIsInstance(collection, collections.Collection)
        self.assertIsInstance(collection, list)

    def test_init_with_incorrect_values(self):
        """Test creation of collection with values of a wrong type."""
        with self.assertRaises(TypeError):
            IntCollection(('1', '2', '3'))

    def test_append_invalid_type(self):
        """Test append."""
        collection = IntCollection()

        with self.assertRaises(TypeError):
            collection.append('1')

    def test_extend_invalid_type(self):
        """Test extend."""
        collection = IntCollection()

        with self.assertRaises(TypeError):
            collection.extend(['1'])

    def test_insert_invalid_type(self):
        """Test insert."""
        collection = IntCollection()

        with self.assertRaises(TypeError):
            collection.insert(0, '1')

    def test_set_invalid_slice(self):
        """Test set slice keeps the collection intact on bad values."""
        collection = IntCollection([1, 2, 3])

        with self.assertRaises(TypeError):
            collection[0:3] = [7, '7', 7]

        self.assertEqual(collection, [1, 2, 3])

    def test_get_slice(self):
        """Test getting of slice."""
        collection = IntCollection([1, 2, 3])

        collection_slice = collection[0:2]

        self.assertEqual(collection_slice, [1, 2])
        self.assertIsInstance(collection_slice, IntCollection)


class KeyedCollectionTests(unittest.TestCase):
    """Lookup by key and sums."""

    def setUp(self):
        """Prepare a collection with a repeated name."""
        self.collection = NamedCollection([Named('a', 1), Named('b', 2),
                                           Named('a', 3)])

    def test_keys(self):
        """Test keys keep collection order."""
        self.assertEqual(self.collection.keys(), ['a', 'b', 'a'])

    def test_find_first_match(self):
        """Test that the first item wins on repeated keys."""
        self.assertEqual(self.collection.find('a').size, 1)

    def test_find_missing(self):
        """Test that unknown keys raise KeyError."""
        with self.assertRaises(KeyError):
            self.collection.find('c')

    def test_sum_of(self):
        """Test integer sum of an attribute."""
        self.assertEqual(self.collection.sum_of('size'), 6)
