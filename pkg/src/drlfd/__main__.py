import sys

from drlfd.cli import main

sys.exit(main())
