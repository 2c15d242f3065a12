"""Common unittests."""

import contextlib
import io
import unittest

from convmlp import VERSION
from convmlp import cli


class VersionTest(unittest.TestCase):
    """Version constant tests."""

    def test_semantic_version(self):
        """Test that the version is three dot-separated integers."""
        parts = VERSION.split('.')

        self.assertEqual(len(parts), 3)
        self.assertTrue(all(part.isdigit() for part in parts))

    def test_cli_reports_version(self):
        """Test that ``--version`` prints the package version."""
        stdout = io.StringIO()
        with contextlib.redirect_stdout(stdout):
            code = cli.main(['--version'], io.StringIO(), io.StringIO())

        self.assertEqual(code, cli.EXIT_OK)
        self.assertEqual(stdout.getvalue().strip(), VERSION)
