import sys

from seqforge.cli import main

sys.exit(main())
