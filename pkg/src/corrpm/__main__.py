import sys

from corrpm.cli import main

sys.exit(main())
