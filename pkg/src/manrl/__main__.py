import sys

from manrl.cli import main

sys.exit(main())
