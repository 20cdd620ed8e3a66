import sys

from g2b.cli import main

sys.exit(main())
