"""``python -m objformer``."""

import sys

from .cli import main

sys.exit(main())
