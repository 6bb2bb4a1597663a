"""Allow ``python -m pairedinv``."""

import sys

from pairedinv.cli import main

if __name__ == "__main__":
    sys.exit(main())
