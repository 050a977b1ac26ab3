from __future__ import annotations

import sys

from mode_lab.cli import main


sys.exit(main())
