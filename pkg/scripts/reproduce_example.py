#!/usr/bin/env python3
"""Run the diffusion-reaction benchmark end to end and print the gate verdicts.

Equivalent to `koopctrl --delay-mode reproduce-example`; kept as a script so
the experiment is runnable straight from a checkout.
"""

import sys

from koopctrl.cli import main

if __name__ == "__main__":
    sys.exit(main(["--delay-mode", "reproduce-example", *sys.argv[1:]]))
