"""
Root entry point for the fedsem simulator
=========================================

This module exposes the command line defined in ``fedsem/main.py`` so
the simulator can be started from a checkout without installing it as a
package.  Subcommand registration and exit-code handling stay in
``fedsem.main``.

Usage
-----

.. code-block:: bash

    python main.py run --config configs/default.yaml --seed 7 --out runs/seed7
    python main.py prototypes --out runs/stages
    python main.py gen --out runs/stages

Setting ``FEDSEM_ENCODER_URL`` (and ``FEDSEM_ENCODER_TOKEN``) makes the
``prototypes`` stage call a remote encoder instead of the seeded stubs.
"""

import sys

from fedsem.main import main

__all__ = ["main"]

if __name__ == "__main__":
    sys.exit(main())
