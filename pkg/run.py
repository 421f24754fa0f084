#!/usr/bin/env python3
"""
Convenient entry point for the ddibp command line.
"""

import sys
from ddibp.main import main

if __name__ == "__main__":
    sys.exit(main())
