#!/usr/bin/env python3
"""
ISS CLI Tool
Selects the pretraining documents with the most positive influence on a
downstream task, then pretrains, finetunes and reports on them.
"""

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
