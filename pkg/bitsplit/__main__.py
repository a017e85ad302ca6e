import sys

from bitsplit.main import main

sys.exit(main())
