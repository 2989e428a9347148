"""Entry point for ``python -m matrix_ad``."""

import sys

from .cli import main

if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        # Ctrl+C
        sys.exit(130)
