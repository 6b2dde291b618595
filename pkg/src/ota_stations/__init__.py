"""Station-assisted over-the-air vehicle software updates: signed manifest
algebra, update director / image repository / distribution broker / vehicle
actors, a deterministic discrete-event network, a scriptable adversary, and
scenario tooling that measures download times and cellular bandwidth cost.
"""

__version__ = "0.1.0"
