import sys

from hoifkit.cli import main

sys.exit(main())
