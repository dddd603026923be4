import sys

from refscorer.server import main

sys.exit(main())
