# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

"""fsrel."""

__version__ = "0.1.0"
