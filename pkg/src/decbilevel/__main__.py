import sys

from decbilevel.cli import main

sys.exit(main())
