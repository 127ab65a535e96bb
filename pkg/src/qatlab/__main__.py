import sys

from qatlab.cli import main

sys.exit(main())
