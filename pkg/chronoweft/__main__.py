import sys

from chronoweft.cli import main

sys.exit(main())
