#!/usr/bin/env python
import sys

from modprompt.cli import main


sys.exit(main())
