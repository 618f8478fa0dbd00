"""seedlab: a desk-scale laboratory for seed-area generation.

Submodules are imported explicitly (``from seedlab import train``); the
package root stays import-light so the CLI can pin threading env vars
before numpy loads.
"""

__version__ = "0.1.0"
