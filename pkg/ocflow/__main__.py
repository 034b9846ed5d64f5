import sys

from ocflow.cli import main

sys.exit(main())
