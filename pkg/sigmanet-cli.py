import sys

from sigmanet.cliio import main

if __name__ == "__main__":
    sys.exit(main())
