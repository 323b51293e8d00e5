import sys

from fedcausal.cli import main

sys.exit(main())
