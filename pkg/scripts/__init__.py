"""Dataset preparation scripts for aptsbench."""
