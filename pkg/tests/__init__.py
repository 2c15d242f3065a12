"""ConvMLP unittests."""
