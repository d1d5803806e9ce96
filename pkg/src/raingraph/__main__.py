import sys

from raingraph.cli import main

sys.exit(main())
