import sys

from advml.harness.cli import main

sys.exit(main())
