import sys

from svlb.cli import main

sys.exit(main())
