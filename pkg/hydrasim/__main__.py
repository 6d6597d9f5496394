import sys

from hydrasim.cli import main

sys.exit(main())
