################################################################################
"""

        ▄▄▄▄▄   ▄▄▄▄   ▄▄▄▄▄▄  ▄▄▄▄▄▄▄
          █    █▀  ▀▀  █          █
          █    █       █▄▄▄▄      █
          █    █       █          █
        ▄▄█▄▄   ▀▄▄▄▀  █          █


   Incremental curriculum fine-tuning for small medical language models.
                        (c) 2025 Stanley Solutions
"""
################################################################################

__version__ = "0.1.0"
__header__ = __doc__
