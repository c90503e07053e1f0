import sys

from fflogo.cli import main

sys.exit(main())
