"""Allow ``python -m gsweather``."""
import sys

from .cli import main

sys.exit(main())
