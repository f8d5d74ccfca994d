# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

"""Few-shot predicate classification over scene graphs with decomposed prototypes."""

__all__ = []
