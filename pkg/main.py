import sys

from conformal_risk.cli import main


if __name__ == "__main__":
    sys.exit(main())
