"""Entry point for finmdp_pg."""
from __future__ import annotations

import sys

from finmdp_pg.cli import main  # pragma: no cover

if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
