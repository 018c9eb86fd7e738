import sys

from helixct.cli import main

sys.exit(main())
