# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

from fsrel.cli import main

if __name__ == "__main__":
    """Run the fsrel command line."""
    main()
