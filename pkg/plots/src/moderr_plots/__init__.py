"""Figure regeneration from the experiment result CSVs.

Pure CSV-to-image mapping: nothing is recomputed, every series drawn
comes straight out of a results table, and rendering is byte-stable for
identical inputs.
"""

__version__ = "0.1.0"
