import sys

from bamlab.cli import main

sys.exit(main())
