import sys

from semstereo.pipeline.cli import main

sys.exit(main())
