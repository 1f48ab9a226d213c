import sys

from taskfed.cli import main

sys.exit(main())
