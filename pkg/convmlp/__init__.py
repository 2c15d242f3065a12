"""ConvMLP vision backbones on numpy."""

VERSION = '0.1.0'
