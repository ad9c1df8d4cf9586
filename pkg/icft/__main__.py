"""Run the command-line interface: python -m icft."""

import sys

from icft.main import main

sys.exit(main())
