# src/ale_flow_lab/__main__.py
import sys

from ale_flow_lab.cli import main

sys.exit(main())
