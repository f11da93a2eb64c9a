"""Allow ``python -m camox``."""

import sys

from .cli import main

sys.exit(main())
