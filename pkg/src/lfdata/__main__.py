import sys

from lfdata.cli import main

sys.exit(main())
