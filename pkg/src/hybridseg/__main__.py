import sys

from hybridseg.cli import main

sys.exit(main())
