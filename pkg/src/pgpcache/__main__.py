import sys

from pgpcache.cli import main

sys.exit(main())
