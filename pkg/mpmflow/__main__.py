"""Entry point for ``python -m mpmflow``."""

import sys

from mpmflow.cli import main

sys.exit(main())
