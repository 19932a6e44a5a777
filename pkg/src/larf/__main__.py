import sys

from larf.cli import main

sys.exit(main())
