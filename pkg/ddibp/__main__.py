"""Allow `python -m ddibp`."""

import sys

from .main import main

sys.exit(main())
