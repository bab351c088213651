"""Allow ``python -m deobflab``."""

import sys

from .cli import main

sys.exit(main())
