import sys

from tissueflow.cli import main

sys.exit(main())
