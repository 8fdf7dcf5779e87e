import sys

from fedsem.main import main

sys.exit(main())
