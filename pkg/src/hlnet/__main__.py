import sys

from hlnet.cli import main

sys.exit(main())
