import sys

from emus.cli import main

sys.exit(main())
