import sys

from toolpresence.cli import main

sys.exit(main())
